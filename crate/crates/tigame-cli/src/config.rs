//! JSON problem configurations: strict parsing, dimension checking with
//! located errors, and conversion to the solver's problem types.
//!
//! A configuration is a single JSON document with a `problem` section (tagged
//! by `kind` ∈ {`lq`, `mv`, `glq`}) plus optional `punishment`, `initial`,
//! `evaluation`, and `tolerances` sections. Matrices are arrays of row
//! arrays; every matrix is checked against the declared dimensions and every
//! violation is reported with its path into the document.

use anyhow::{anyhow, bail, Result};
use serde::{Deserialize, Serialize};
use tigame::meanvar::MarketData;
use tigame::model::{
    CostTable, GLQDynamics, GLQProblem, LQCostTable, LQProblem, LQStageWeights,
    LQTerminalWeights, NoiseSpec, PlayerCost, SamplerKind, StageWeights, TerminalWeights,
};
use tigame::numkit::{Mat, Tolerances, Vecf};

/// A matrix as nested row arrays.
pub type Rows = Vec<Vec<f64>>;

/// A per-stage quantity given either once (broadcast to all stages) or as an
/// explicit per-stage list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrPer<T> {
    One(T),
    Per(Vec<T>),
}

impl<T: Clone> OneOrPer<T> {
    fn expand(&self, n: usize, path: &str, errs: &mut Vec<String>) -> Vec<T> {
        match self {
            OneOrPer::One(x) => vec![x.clone(); n],
            OneOrPer::Per(v) => {
                if v.len() == n {
                    v.clone()
                } else {
                    errs.push(format!("{path}: {} entries, expected {n}", v.len()));
                    if let Some(first) = v.first() {
                        vec![first.clone(); n]
                    } else {
                        Vec::new()
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerArg {
    /// Independent two-point (±1) factors scaled to the stage covariance.
    TwoPoint,
    /// Mean-zero Gaussian with the stage covariance.
    Gaussian,
}

impl SamplerArg {
    fn kind(self) -> SamplerKind {
        match self {
            SamplerArg::TwoPoint => SamplerKind::TwoPointProduct,
            SamplerArg::Gaussian => SamplerKind::GaussianWithCov,
        }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub punishment: Option<PunishmentConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerances: Option<TolerancesConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProblemConfig {
    Lq(LqConfig),
    Mv(MvConfig),
    Glq(GlqConfig),
}

/// Coupling term configuration: intensity (scalar broadcast or per-stage
/// list), optional weight matrix, and the sign-pattern choice for the
/// cross-copy blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PunishmentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<OneOrPer<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<OneOrPer<Rows>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub literal_coupling: bool,
}

/// Initial pair: evaluation time plus either a state vector (`x`, for `lq`
/// and `glq`) or a scalar initial wealth (`z`, for `mv`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolerancesConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank_rtol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psd_atol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_rtol: Option<f64>,
}

/// Single-control problem with plain and mean-weighted quadratic costs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqConfig {
    pub n_stages: usize,
    pub n_state: usize,
    pub m: usize,
    pub p: usize,
    pub a0: Vec<Rows>,
    pub b0: Vec<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c0: Option<Vec<Vec<Rows>>>,
    pub d0: Vec<Vec<Rows>>,
    pub deltas: OneOrPer<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerArg>,
    pub weights: LqWeightsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqWeightsConfig {
    pub stages: Vec<LqStageConfig>,
    pub terminal: LqTerminalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqStageConfig {
    pub q: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bar: Option<Rows>,
    pub r: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_bar: Option<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LqTerminalConfig {
    pub g: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_bar: Option<Rows>,
}

/// Multi-period mean-variance market data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvConfig {
    pub n_stages: usize,
    pub p0: usize,
    pub s: OneOrPer<f64>,
    pub mean_e: OneOrPer<Vec<f64>>,
    pub cov_e: OneOrPer<Rows>,
    pub lambda: f64,
    pub initial_wealth: f64,
}

/// Full two-player game with stationary per-stage weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlqConfig {
    pub n_stages: usize,
    pub n_state: usize,
    pub m1: usize,
    pub m2: usize,
    pub p: usize,
    pub a: Vec<Rows>,
    pub b1: Vec<Rows>,
    pub b2: Vec<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Vec<Vec<Rows>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<Vec<Vec<Rows>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<Vec<Vec<Rows>>>,
    pub deltas: OneOrPer<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerArg>,
    pub cost1: GlqCostConfig,
    pub cost2: GlqCostConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlqCostConfig {
    pub stages: Vec<GlqStageConfig>,
    pub terminal: GlqTerminalConfig,
}

/// One stage of one player's weights; omitted blocks are zero.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlqStageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s1_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s2_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r11: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r11_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r12: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r12_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r22: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r22_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_lin: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlqTerminalConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_bar: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_lin: Option<Vec<f64>>,
}

/// A parsed and dimension-checked problem.
#[derive(Debug, Clone)]
pub enum BuiltProblem {
    Lq(LQProblem),
    Mv(MarketData),
    Glq(GLQProblem),
}

impl BuiltProblem {
    pub fn n_stages(&self) -> usize {
        match self {
            BuiltProblem::Lq(lq) => lq.n_stages,
            BuiltProblem::Mv(md) => md.n_stages,
            BuiltProblem::Glq(g) => g.dynamics.n_stages,
        }
    }

    /// First-player control dimension (the coupling weight's dimension).
    pub fn control_dim(&self) -> usize {
        match self {
            BuiltProblem::Lq(lq) => lq.m,
            BuiltProblem::Mv(md) => md.p0,
            BuiltProblem::Glq(g) => g.dynamics.m1,
        }
    }
}

fn to_mat(rows: &Rows, nr: usize, nc: usize, path: &str, errs: &mut Vec<String>) -> Mat {
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        errs.push(format!(
            "{path}: expected a {nr}x{nc} matrix, got {}x{cols}",
            rows.len()
        ));
        return Mat::zeros(nr, nc);
    }
    Mat::from_fn(nr, nc, |i, j| rows[i][j])
}

fn to_vec(v: &[f64], n: usize, path: &str, errs: &mut Vec<String>) -> Vecf {
    if v.len() != n {
        errs.push(format!("{path}: expected a length-{n} vector, got {}", v.len()));
        return Vecf::zeros(n);
    }
    Vecf::from_column_slice(v)
}

fn stage_mats(
    list: &[Rows],
    n_stages: usize,
    nr: usize,
    nc: usize,
    path: &str,
    errs: &mut Vec<String>,
) -> Vec<Mat> {
    if list.len() != n_stages {
        errs.push(format!("{path}: {} stage entries, expected {n_stages}", list.len()));
    }
    (0..n_stages)
        .map(|k| {
            list.get(k)
                .map(|rows| to_mat(rows, nr, nc, &format!("{path}[{k}]"), errs))
                .unwrap_or_else(|| Mat::zeros(nr, nc))
        })
        .collect()
}

fn channel_mats(
    list: Option<&Vec<Vec<Rows>>>,
    n_stages: usize,
    p: usize,
    nr: usize,
    nc: usize,
    path: &str,
    errs: &mut Vec<String>,
) -> Vec<Vec<Mat>> {
    let Some(list) = list else {
        return vec![vec![Mat::zeros(nr, nc); p]; n_stages];
    };
    if list.len() != n_stages {
        errs.push(format!("{path}: {} stage entries, expected {n_stages}", list.len()));
    }
    (0..n_stages)
        .map(|k| {
            let Some(channels) = list.get(k) else {
                return vec![Mat::zeros(nr, nc); p];
            };
            if channels.len() != p {
                errs.push(format!(
                    "{path}[{k}]: {} noise channels, expected {p}",
                    channels.len()
                ));
            }
            (0..p)
                .map(|i| {
                    channels
                        .get(i)
                        .map(|rows| to_mat(rows, nr, nc, &format!("{path}[{k}][{i}]"), errs))
                        .unwrap_or_else(|| Mat::zeros(nr, nc))
                })
                .collect()
        })
        .collect()
}

fn finish(errs: Vec<String>) -> Result<()> {
    if errs.is_empty() {
        Ok(())
    } else {
        bail!("invalid configuration:\n  - {}", errs.join("\n  - "))
    }
}

impl Config {
    /// Parse a JSON document; unknown keys are rejected by the data model.
    pub fn from_json(text: &str) -> Result<Config> {
        serde_json::from_str(text).map_err(|e| anyhow!("config parse error: {e}"))
    }

    /// Convert to a solver problem, collecting every dimension error with its
    /// path into the document.
    pub fn build(&self) -> Result<BuiltProblem> {
        let mut errs = Vec::new();
        let built = match &self.problem {
            ProblemConfig::Lq(c) => BuiltProblem::Lq(build_lq(c, &mut errs)),
            ProblemConfig::Mv(c) => BuiltProblem::Mv(build_mv_data(c, &mut errs)),
            ProblemConfig::Glq(c) => BuiltProblem::Glq(build_glq(c, &mut errs)),
        };
        // Structural cross-validation as a second net (symmetry, horizon
        // consistency, ...).
        match &built {
            BuiltProblem::Lq(lq) => {
                errs.extend(tigame::model::validate_lq(lq).issues);
            }
            BuiltProblem::Glq(g) => {
                errs.extend(tigame::model::validate(g).issues);
            }
            BuiltProblem::Mv(md) => {
                if let Err(e) = md.validate() {
                    errs.push(format!("problem: {e}"));
                }
            }
        }
        finish(errs)?;
        Ok(built)
    }

    /// Effective numeric tolerances, with an optional rank-tolerance
    /// override from the command line.
    pub fn tolerances(&self, rank_override: Option<f64>) -> Tolerances {
        let mut tol = Tolerances::default();
        if let Some(t) = &self.tolerances {
            if let Some(x) = t.rank_rtol {
                tol.rank_rtol = x;
            }
            if let Some(x) = t.psd_atol {
                tol.psd_atol = x;
            }
            if let Some(x) = t.range_rtol {
                tol.range_rtol = x;
            }
        }
        if let Some(x) = rank_override {
            tol.rank_rtol = x;
        }
        tol
    }

    /// Coupling intensities per stage: command-line value, else the config's
    /// (scalar broadcast or per-stage list), else zero.
    pub fn mus(&self, override_mu: Option<f64>, n_stages: usize) -> Result<Vec<f64>> {
        if let Some(mu) = override_mu {
            return Ok(vec![mu; n_stages]);
        }
        let Some(p) = &self.punishment else {
            return Ok(vec![0.0; n_stages]);
        };
        let mut errs = Vec::new();
        let mus = match &p.mu {
            None => vec![0.0; n_stages],
            Some(spec) => spec.expand(n_stages, "punishment.mu", &mut errs),
        };
        finish(errs)?;
        Ok(mus)
    }

    /// Coupling weight matrices per stage (identity when absent).
    pub fn psis(&self, m: usize, n_stages: usize) -> Result<Vec<Mat>> {
        let spec = self.punishment.as_ref().and_then(|p| p.psi.as_ref());
        let Some(spec) = spec else {
            return Ok(vec![Mat::identity(m, m); n_stages]);
        };
        let mut errs = Vec::new();
        let rows = spec.expand(n_stages, "punishment.psi", &mut errs);
        let psis = rows
            .iter()
            .enumerate()
            .map(|(k, r)| to_mat(r, m, m, &format!("punishment.psi[{k}]"), &mut errs))
            .collect();
        finish(errs)?;
        Ok(psis)
    }

    pub fn literal_coupling(&self) -> bool {
        self.punishment.as_ref().is_some_and(|p| p.literal_coupling)
    }
}

fn build_noise(
    deltas: &OneOrPer<Rows>,
    sampler: Option<SamplerArg>,
    p: usize,
    n_stages: usize,
    errs: &mut Vec<String>,
) -> NoiseSpec {
    let rows = deltas.expand(n_stages, "problem.deltas", errs);
    let deltas = (0..n_stages)
        .map(|k| {
            rows.get(k)
                .map(|r| to_mat(r, p, p, &format!("problem.deltas[{k}]"), errs))
                .unwrap_or_else(|| Mat::zeros(p, p))
        })
        .collect();
    NoiseSpec {
        p,
        deltas,
        sampler_kind: sampler.unwrap_or(SamplerArg::TwoPoint).kind(),
    }
}

fn build_lq(c: &LqConfig, errs: &mut Vec<String>) -> LQProblem {
    let (nn, n, m, p) = (c.n_stages, c.n_state, c.m, c.p);
    let a0 = stage_mats(&c.a0, nn, n, n, "problem.a0", errs);
    let b0 = stage_mats(&c.b0, nn, n, m, "problem.b0", errs);
    let c0 = channel_mats(c.c0.as_ref(), nn, p, n, n, "problem.c0", errs);
    let d0 = channel_mats(Some(&c.d0), nn, p, n, m, "problem.d0", errs);
    let noise = build_noise(&c.deltas, c.sampler, p, nn, errs);
    if c.weights.stages.len() != nn {
        errs.push(format!(
            "problem.weights.stages: {} entries, expected {nn}",
            c.weights.stages.len()
        ));
    }
    let stages = (0..nn)
        .map(|k| {
            let path = format!("problem.weights.stages[{k}]");
            let Some(w) = c.weights.stages.get(k) else {
                return LQStageWeights {
                    q: Mat::zeros(n, n),
                    q_bar: Mat::zeros(n, n),
                    r: Mat::zeros(m, m),
                    r_bar: Mat::zeros(m, m),
                };
            };
            LQStageWeights {
                q: to_mat(&w.q, n, n, &format!("{path}.q"), errs),
                q_bar: w
                    .q_bar
                    .as_ref()
                    .map(|r| to_mat(r, n, n, &format!("{path}.q_bar"), errs))
                    .unwrap_or_else(|| Mat::zeros(n, n)),
                r: to_mat(&w.r, m, m, &format!("{path}.r"), errs),
                r_bar: w
                    .r_bar
                    .as_ref()
                    .map(|r| to_mat(r, m, m, &format!("{path}.r_bar"), errs))
                    .unwrap_or_else(|| Mat::zeros(m, m)),
            }
        })
        .collect();
    let terminal = LQTerminalWeights {
        g: to_mat(&c.weights.terminal.g, n, n, "problem.weights.terminal.g", errs),
        g_bar: c
            .weights
            .terminal
            .g_bar
            .as_ref()
            .map(|r| to_mat(r, n, n, "problem.weights.terminal.g_bar", errs))
            .unwrap_or_else(|| Mat::zeros(n, n)),
    };
    LQProblem {
        n_stages: nn,
        n_state: n,
        m,
        a0,
        b0,
        c0,
        d0,
        weights: LQCostTable::Stationary { stages, terminal },
        noise,
    }
}

fn build_mv_data(c: &MvConfig, errs: &mut Vec<String>) -> MarketData {
    let nn = c.n_stages;
    let s = c.s.expand(nn, "problem.s", errs);
    let mean_rows = c.mean_e.expand(nn, "problem.mean_e", errs);
    let mean_e = (0..nn)
        .map(|k| {
            mean_rows
                .get(k)
                .map(|v| to_vec(v, c.p0, &format!("problem.mean_e[{k}]"), errs))
                .unwrap_or_else(|| Vecf::zeros(c.p0))
        })
        .collect();
    let cov_rows = c.cov_e.expand(nn, "problem.cov_e", errs);
    let cov_e = (0..nn)
        .map(|k| {
            cov_rows
                .get(k)
                .map(|r| to_mat(r, c.p0, c.p0, &format!("problem.cov_e[{k}]"), errs))
                .unwrap_or_else(|| Mat::zeros(c.p0, c.p0))
        })
        .collect();
    MarketData {
        n_stages: nn,
        p0: c.p0,
        s,
        mean_e,
        cov_e,
        lambda: c.lambda,
        initial_wealth: c.initial_wealth,
    }
}

fn build_glq_cost(
    c: &GlqCostConfig,
    label: &str,
    nn: usize,
    n: usize,
    m1: usize,
    m2: usize,
    errs: &mut Vec<String>,
) -> PlayerCost {
    if c.stages.len() != nn {
        errs.push(format!("{label}.stages: {} entries, expected {nn}", c.stages.len()));
    }
    let opt_mat = |rows: &Option<Rows>, nr: usize, nc: usize, path: &str, errs: &mut Vec<String>| {
        rows.as_ref()
            .map(|r| to_mat(r, nr, nc, path, errs))
            .unwrap_or_else(|| Mat::zeros(nr, nc))
    };
    let opt_vec = |v: &Option<Vec<f64>>, len: usize, path: &str, errs: &mut Vec<String>| {
        v.as_ref()
            .map(|v| to_vec(v, len, path, errs))
            .unwrap_or_else(|| Vecf::zeros(len))
    };
    let stages = (0..nn)
        .map(|k| {
            let path = format!("{label}.stages[{k}]");
            let Some(w) = c.stages.get(k) else {
                return StageWeights::zeros(n, m1, m2);
            };
            StageWeights {
                q: opt_mat(&w.q, n, n, &format!("{path}.q"), errs),
                q_bar: opt_mat(&w.q_bar, n, n, &format!("{path}.q_bar"), errs),
                s1: opt_mat(&w.s1, m1, n, &format!("{path}.s1"), errs),
                s1_bar: opt_mat(&w.s1_bar, m1, n, &format!("{path}.s1_bar"), errs),
                s2: opt_mat(&w.s2, m2, n, &format!("{path}.s2"), errs),
                s2_bar: opt_mat(&w.s2_bar, m2, n, &format!("{path}.s2_bar"), errs),
                r11: opt_mat(&w.r11, m1, m1, &format!("{path}.r11"), errs),
                r11_bar: opt_mat(&w.r11_bar, m1, m1, &format!("{path}.r11_bar"), errs),
                r12: opt_mat(&w.r12, m1, m2, &format!("{path}.r12"), errs),
                r12_bar: opt_mat(&w.r12_bar, m1, m2, &format!("{path}.r12_bar"), errs),
                r22: opt_mat(&w.r22, m2, m2, &format!("{path}.r22"), errs),
                r22_bar: opt_mat(&w.r22_bar, m2, m2, &format!("{path}.r22_bar"), errs),
                q_lin: opt_vec(&w.q_lin, n, &format!("{path}.q_lin"), errs),
                rho1: opt_vec(&w.rho1, m1, &format!("{path}.rho1"), errs),
                rho2: opt_vec(&w.rho2, m2, &format!("{path}.rho2"), errs),
            }
        })
        .collect();
    let terminal = TerminalWeights {
        g: opt_mat(&c.terminal.g, n, n, &format!("{label}.terminal.g"), errs),
        g_bar: opt_mat(&c.terminal.g_bar, n, n, &format!("{label}.terminal.g_bar"), errs),
        g_lin: opt_vec(&c.terminal.g_lin, n, &format!("{label}.terminal.g_lin"), errs),
    };
    PlayerCost {
        n_stages: nn,
        n_state: n,
        m1,
        m2,
        table: CostTable::Stationary { stages, terminal },
    }
}

fn build_glq(c: &GlqConfig, errs: &mut Vec<String>) -> GLQProblem {
    let (nn, n, m1, m2, p) = (c.n_stages, c.n_state, c.m1, c.m2, c.p);
    let dynamics = GLQDynamics {
        n_stages: nn,
        n_state: n,
        m1,
        m2,
        a: stage_mats(&c.a, nn, n, n, "problem.a", errs),
        b1: stage_mats(&c.b1, nn, n, m1, "problem.b1", errs),
        b2: stage_mats(&c.b2, nn, n, m2, "problem.b2", errs),
        c: channel_mats(c.c.as_ref(), nn, p, n, n, "problem.c", errs),
        d1: channel_mats(c.d1.as_ref(), nn, p, n, m1, "problem.d1", errs),
        d2: channel_mats(c.d2.as_ref(), nn, p, n, m2, "problem.d2", errs),
    };
    let noise = build_noise(&c.deltas, c.sampler, p, nn, errs);
    let cost1 = build_glq_cost(&c.cost1, "problem.cost1", nn, n, m1, m2, errs);
    let cost2 = build_glq_cost(&c.cost2, "problem.cost2", nn, n, m1, m2, errs);
    GLQProblem {
        dynamics,
        noise,
        cost1,
        cost2,
    }
}

fn rows_of(m: &Mat) -> Rows {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Bundled configuration for the four-period two-state single-control
/// benchmark, generated from the same source as the solver's fixture.
pub fn benchmark_lq_config() -> Config {
    let lq = tigame::fixtures::four_period_lq();
    let LQCostTable::Stationary { stages, terminal } = &lq.weights else {
        unreachable!("fixture uses stationary weights");
    };
    Config {
        problem: ProblemConfig::Lq(LqConfig {
            n_stages: lq.n_stages,
            n_state: lq.n_state,
            m: lq.m,
            p: lq.noise.p,
            a0: lq.a0.iter().map(rows_of).collect(),
            b0: lq.b0.iter().map(rows_of).collect(),
            c0: None,
            d0: lq
                .d0
                .iter()
                .map(|per| per.iter().map(rows_of).collect())
                .collect(),
            deltas: OneOrPer::One(rows_of(&lq.noise.deltas[0])),
            sampler: None,
            weights: LqWeightsConfig {
                stages: stages
                    .iter()
                    .map(|w| LqStageConfig {
                        q: rows_of(&w.q),
                        q_bar: Some(rows_of(&w.q_bar)),
                        r: rows_of(&w.r),
                        r_bar: None,
                    })
                    .collect(),
                terminal: LqTerminalConfig {
                    g: rows_of(&terminal.g),
                    g_bar: Some(rows_of(&terminal.g_bar)),
                },
            },
        }),
        punishment: Some(PunishmentConfig {
            mu: Some(OneOrPer::One(0.0)),
            psi: None,
            literal_coupling: false,
        }),
        initial: Some(InitialConfig {
            t: 0,
            x: Some(tigame::fixtures::four_period_initial_state().iter().copied().collect()),
            z: None,
        }),
        evaluation: Some(EvaluationConfig {
            k: Some(vec![0, 1, 2, 3]),
            grid: Some("standard".to_string()),
            paths: Some(100_000),
            seed: Some(1),
        }),
        tolerances: None,
    }
}

/// Bundled configuration for the four-period three-asset mean-variance
/// benchmark, generated from the same source as the solver's fixture.
pub fn benchmark_mv_config() -> Config {
    let md = tigame::fixtures::three_asset_market();
    Config {
        problem: ProblemConfig::Mv(MvConfig {
            n_stages: md.n_stages,
            p0: md.p0,
            s: OneOrPer::One(md.s[0]),
            mean_e: OneOrPer::One(md.mean_e[0].iter().copied().collect()),
            cov_e: OneOrPer::One(rows_of(&md.cov_e[0])),
            lambda: md.lambda,
            initial_wealth: md.initial_wealth,
        }),
        punishment: None,
        initial: Some(InitialConfig {
            t: 0,
            x: None,
            z: Some(md.initial_wealth),
        }),
        evaluation: Some(EvaluationConfig {
            k: Some(vec![0, 1, 2, 3]),
            grid: Some("standard".to_string()),
            paths: Some(100_000),
            seed: Some(1),
        }),
        tolerances: None,
    }
}

/// Bundled fixture text for `--config benchmark-lq` / `benchmark-mv`.
pub fn bundled(name: &str) -> Option<&'static str> {
    match name {
        "benchmark-lq" => Some(include_str!("../fixtures/benchmark_lq.json")),
        "benchmark-mv" => Some(include_str!("../fixtures/benchmark_mv.json")),
        _ => None,
    }
}

/// Load a configuration from a bundled name or a filesystem path.
pub fn load(spec: &str) -> Result<Config> {
    let text = match bundled(spec) {
        Some(text) => text.to_string(),
        None => std::fs::read_to_string(spec)
            .map_err(|e| anyhow!("cannot read config `{spec}`: {e}"))?,
    };
    Config::from_json(&text)
}

/// Parse a sweep-grid specification:
/// `standard[:CAP]` (the three-lattice union `{l*1e-5} ∪ {l*1e-3} ∪ {l}`,
/// `l = 0..=100000`, optionally capped), `list:[a,b,...]`,
/// `linspace:a,b,n`, or `logspace:a,b,n` (geometric between positive
/// endpoints).
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    if spec == "standard" {
        return Ok(tigame::evaluate::standard_grid(None));
    }
    if let Some(cap) = spec.strip_prefix("standard:") {
        let cap: f64 = cap
            .parse()
            .map_err(|_| anyhow!("grid `{spec}`: cap must be a number"))?;
        return Ok(tigame::evaluate::standard_grid(Some(cap)));
    }
    if let Some(body) = spec.strip_prefix("list:") {
        let body = body.trim().trim_start_matches('[').trim_end_matches(']');
        let mut out = Vec::new();
        for part in body.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            out.push(
                part.parse::<f64>()
                    .map_err(|_| anyhow!("grid `{spec}`: `{part}` is not a number"))?,
            );
        }
        if out.is_empty() {
            bail!("grid `{spec}`: empty list");
        }
        return Ok(out);
    }
    for (prefix, log) in [("linspace:", false), ("logspace:", true)] {
        if let Some(body) = spec.strip_prefix(prefix) {
            let parts: Vec<&str> = body.split(',').collect();
            if parts.len() != 3 {
                bail!("grid `{spec}`: expected {prefix}a,b,n");
            }
            let a: f64 = parts[0].trim().parse().map_err(|_| anyhow!("grid `{spec}`: bad start"))?;
            let b: f64 = parts[1].trim().parse().map_err(|_| anyhow!("grid `{spec}`: bad end"))?;
            let n: usize = parts[2].trim().parse().map_err(|_| anyhow!("grid `{spec}`: bad count"))?;
            if n < 2 {
                bail!("grid `{spec}`: need at least 2 points");
            }
            if log && (a <= 0.0 || b <= 0.0) {
                bail!("grid `{spec}`: logspace endpoints must be positive");
            }
            let pts = (0..n)
                .map(|i| {
                    let t = i as f64 / (n - 1) as f64;
                    if log {
                        (a.ln() + t * (b.ln() - a.ln())).exp()
                    } else {
                        a + t * (b - a)
                    }
                })
                .collect();
            return Ok(pts);
        }
    }
    bail!("unknown grid specification `{spec}` (expected standard[:CAP], list:[...], linspace:a,b,n, or logspace:a,b,n)")
}

/// Parse a comma-separated stage list, e.g. `0,1,2,3`.
pub fn parse_k_list(spec: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|_| anyhow!("stage list `{spec}`: `{part}` is not a stage index"))?,
        );
    }
    Ok(out)
}
