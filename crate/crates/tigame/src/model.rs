//! Problem containers for the two-player coordination game and the plain
//! time-inconsistent LQ problem it is built from.
//!
//! The game couples two controls `u` (dimension `m1`) and `v` (dimension
//! `m2`) through shared linear dynamics
//!
//! ```text
//! X_{k+1} = (A_k X_k + B1_k u_k + B2_k v_k)
//!         + sum_i (C_k^i X_k + D1_k^i u_k + D2_k^i v_k) w_k^i
//! ```
//!
//! with martingale-difference noise `w_k` (`E_k[w_k] = 0`,
//! `E_k[w_k w_k'] = Delta_k`). Each player's quadratic objective carries
//! *two* time indices: `t` is the evaluation time the objective is judged
//! from, `k` is the running stage. This double indexing is exactly what makes
//! the problem time-inconsistent. Every weight also comes in a plain and a
//! barred version; the barred one multiplies conditional means (`E_t X`,
//! `E_t u`, ...). Throughout the crate the "script" version of a weight means
//! the sum plain + barred — it is the coefficient seen by the mean component
//! when an adapted process is split into conditional mean plus deviation.

use crate::numkit::{Mat, Vecf};
use crate::{Error, Result};

/// How Monte-Carlo sampling realizes the noise; the exact evaluators only
/// ever use the first two moments and ignore this.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    /// `w = L eps` with independent `eps_i` uniform on `{-1, +1}` and
    /// `L L' = Delta_k`.
    TwoPointProduct,
    /// Mean-zero Gaussian with covariance `Delta_k`.
    GaussianWithCov,
}

/// Martingale-difference noise description: dimension, per-stage conditional
/// second moments, and a sampler choice for Monte Carlo.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub p: usize,
    /// `Delta_k`, symmetric PSD `p x p`, one per stage.
    pub deltas: Vec<Mat>,
    pub sampler_kind: SamplerKind,
}

impl NoiseSpec {
    /// Noise that is identically zero (`p` channels, all `Delta_k = 0`).
    pub fn zero(p: usize, n_stages: usize) -> Self {
        NoiseSpec {
            p,
            deltas: vec![Mat::zeros(p, p); n_stages],
            sampler_kind: SamplerKind::TwoPointProduct,
        }
    }
}

/// Per-stage system matrices for the two-control dynamics.
#[derive(Debug, Clone)]
pub struct GLQDynamics {
    /// Horizon: stages are `0..n_stages`, the state runs to `n_stages`.
    pub n_stages: usize,
    /// State dimension.
    pub n_state: usize,
    /// Control dimensions for the two players.
    pub m1: usize,
    pub m2: usize,
    /// Drift: `A_k` (`n x n`), `B1_k` (`n x m1`), `B2_k` (`n x m2`).
    pub a: Vec<Mat>,
    pub b1: Vec<Mat>,
    pub b2: Vec<Mat>,
    /// Diffusion, outer index stage, inner index noise channel:
    /// `C_k^i` (`n x n`), `D1_k^i` (`n x m1`), `D2_k^i` (`n x m2`).
    pub c: Vec<Vec<Mat>>,
    pub d1: Vec<Vec<Mat>>,
    pub d2: Vec<Vec<Mat>>,
}

/// All quadratic/linear weights of one player at one `(t, k)` pair.
///
/// Shapes: `q`, `q_bar` are `n x n`; `s1`, `s1_bar` are `m1 x n`; `s2`,
/// `s2_bar` are `m2 x n`; `r11` is `m1 x m1`, `r12` is `m1 x m2`, `r22` is
/// `m2 x m2` (the `(2,1)` block is implied as `r12'`); `q_lin` is `n`,
/// `rho1` is `m1`, `rho2` is `m2`. The running cost contributed by this
/// entry is
///
/// ```text
///   X' q X + (E_t X)' q_bar (E_t X) + 2 u' s1 X + 2 (E_t u)' s1_bar (E_t X)
/// + 2 v' s2 X + 2 (E_t v)' s2_bar (E_t X)
/// + [u; v]' [[r11, r12], [r12', r22]] [u; v]  (+ barred version on means)
/// + 2 q_lin' X + 2 rho1' u + 2 rho2' v.
/// ```
#[derive(Debug, Clone)]
pub struct StageWeights {
    pub q: Mat,
    pub q_bar: Mat,
    pub s1: Mat,
    pub s1_bar: Mat,
    pub s2: Mat,
    pub s2_bar: Mat,
    pub r11: Mat,
    pub r11_bar: Mat,
    pub r12: Mat,
    pub r12_bar: Mat,
    pub r22: Mat,
    pub r22_bar: Mat,
    pub q_lin: Vecf,
    pub rho1: Vecf,
    pub rho2: Vecf,
}

impl StageWeights {
    pub fn zeros(n: usize, m1: usize, m2: usize) -> Self {
        StageWeights {
            q: Mat::zeros(n, n),
            q_bar: Mat::zeros(n, n),
            s1: Mat::zeros(m1, n),
            s1_bar: Mat::zeros(m1, n),
            s2: Mat::zeros(m2, n),
            s2_bar: Mat::zeros(m2, n),
            r11: Mat::zeros(m1, m1),
            r11_bar: Mat::zeros(m1, m1),
            r12: Mat::zeros(m1, m2),
            r12_bar: Mat::zeros(m1, m2),
            r22: Mat::zeros(m2, m2),
            r22_bar: Mat::zeros(m2, m2),
            q_lin: Vecf::zeros(n),
            rho1: Vecf::zeros(m1),
            rho2: Vecf::zeros(m2),
        }
    }
}

/// Terminal weights of one player at evaluation time `t`.
#[derive(Debug, Clone)]
pub struct TerminalWeights {
    pub g: Mat,
    pub g_bar: Mat,
    pub g_lin: Vecf,
}

impl TerminalWeights {
    pub fn zeros(n: usize) -> Self {
        TerminalWeights {
            g: Mat::zeros(n, n),
            g_bar: Mat::zeros(n, n),
            g_lin: Vecf::zeros(n),
        }
    }
}

/// Storage for the double-indexed weight family of one player.
#[derive(Debug, Clone)]
pub enum CostTable {
    /// One entry per stage; the accessor ignores the evaluation time `t`
    /// (the lift `weight(t, k) = weight(k)`).
    Stationary {
        stages: Vec<StageWeights>,
        terminal: TerminalWeights,
    },
    /// Triangular storage: `rows[t][k - t]` for `t <= k < n_stages`, plus a
    /// terminal entry per `t`.
    DoubleIndexed {
        rows: Vec<Vec<StageWeights>>,
        terminals: Vec<TerminalWeights>,
    },
}

/// One player's complete cost description.
#[derive(Debug, Clone)]
pub struct PlayerCost {
    pub n_stages: usize,
    pub n_state: usize,
    pub m1: usize,
    pub m2: usize,
    pub table: CostTable,
}

impl PlayerCost {
    /// All-zero stationary cost.
    pub fn zeros_stationary(n_stages: usize, n: usize, m1: usize, m2: usize) -> Self {
        PlayerCost {
            n_stages,
            n_state: n,
            m1,
            m2,
            table: CostTable::Stationary {
                stages: vec![StageWeights::zeros(n, m1, m2); n_stages],
                terminal: TerminalWeights::zeros(n),
            },
        }
    }

    /// All-zero double-indexed cost (triangular storage).
    pub fn zeros_double(n_stages: usize, n: usize, m1: usize, m2: usize) -> Self {
        PlayerCost {
            n_stages,
            n_state: n,
            m1,
            m2,
            table: CostTable::DoubleIndexed {
                rows: (0..n_stages)
                    .map(|t| vec![StageWeights::zeros(n, m1, m2); n_stages - t])
                    .collect(),
                terminals: vec![TerminalWeights::zeros(n); n_stages],
            },
        }
    }

    /// Stage weights at `(t, k)`; for stationary storage `t` is ignored.
    pub fn stage(&self, t: usize, k: usize) -> Result<&StageWeights> {
        if t > k || k >= self.n_stages {
            return Err(Error::IndexOutOfRange(format!(
                "stage weights requested at (t={t}, k={k}) with horizon {}",
                self.n_stages
            )));
        }
        match &self.table {
            CostTable::Stationary { stages, .. } => Ok(&stages[k]),
            CostTable::DoubleIndexed { rows, .. } => Ok(&rows[t][k - t]),
        }
    }

    /// Mutable stage accessor with the same indexing rule.
    pub fn stage_mut(&mut self, t: usize, k: usize) -> Result<&mut StageWeights> {
        if t > k || k >= self.n_stages {
            return Err(Error::IndexOutOfRange(format!(
                "stage weights requested at (t={t}, k={k}) with horizon {}",
                self.n_stages
            )));
        }
        match &mut self.table {
            CostTable::Stationary { stages, .. } => Ok(&mut stages[k]),
            CostTable::DoubleIndexed { rows, .. } => Ok(&mut rows[t][k - t]),
        }
    }

    /// Terminal weights for evaluation time `t`.
    pub fn terminal(&self, t: usize) -> Result<&TerminalWeights> {
        if t >= self.n_stages {
            return Err(Error::IndexOutOfRange(format!(
                "terminal weights requested at t={t} with horizon {}",
                self.n_stages
            )));
        }
        match &self.table {
            CostTable::Stationary { terminal, .. } => Ok(terminal),
            CostTable::DoubleIndexed { terminals, .. } => Ok(&terminals[t]),
        }
    }

    /// Mutable terminal accessor.
    pub fn terminal_mut(&mut self, t: usize) -> Result<&mut TerminalWeights> {
        if t >= self.n_stages {
            return Err(Error::IndexOutOfRange(format!(
                "terminal weights requested at t={t} with horizon {}",
                self.n_stages
            )));
        }
        match &mut self.table {
            CostTable::Stationary { terminal, .. } => Ok(terminal),
            CostTable::DoubleIndexed { terminals, .. } => Ok(&mut terminals[t]),
        }
    }
}

/// Names of the quadratic weight blocks, used by [`script_weight`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightName {
    Q,
    S1,
    S2,
    R11,
    R12,
    R21,
    R22,
    G,
}

/// The "script" (plain + barred) version of a weight block at `(t, k)`; for
/// `G` the terminal pair at `t` is summed and `k` is ignored.
pub fn script_weight(cost: &PlayerCost, which: WeightName, t: usize, k: usize) -> Result<Mat> {
    if which == WeightName::G {
        let term = cost.terminal(t)?;
        return Ok(&term.g + &term.g_bar);
    }
    let w = cost.stage(t, k)?;
    Ok(match which {
        WeightName::Q => &w.q + &w.q_bar,
        WeightName::S1 => &w.s1 + &w.s1_bar,
        WeightName::S2 => &w.s2 + &w.s2_bar,
        WeightName::R11 => &w.r11 + &w.r11_bar,
        WeightName::R12 => &w.r12 + &w.r12_bar,
        WeightName::R21 => (&w.r12 + &w.r12_bar).transpose(),
        WeightName::R22 => &w.r22 + &w.r22_bar,
        WeightName::G => unreachable!(),
    })
}

/// The full two-player game: dynamics, noise, and one cost per player.
#[derive(Debug, Clone)]
pub struct GLQProblem {
    pub dynamics: GLQDynamics,
    pub noise: NoiseSpec,
    pub cost1: PlayerCost,
    pub cost2: PlayerCost,
}

/// Outcome of structural validation; empty iff the problem is well-formed.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub issues: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

fn check_shape(issues: &mut Vec<String>, m: &Mat, shape: (usize, usize), what: &str) {
    if m.shape() != shape {
        issues.push(format!(
            "{what}: shape {:?}, expected {:?}",
            m.shape(),
            shape
        ));
    }
}

fn check_symmetric(issues: &mut Vec<String>, m: &Mat, what: &str) {
    if m.nrows() == m.ncols() {
        let asym = (m - m.transpose()).norm();
        if asym > 1e-12 * (1.0 + m.norm()) {
            issues.push(format!("{what}: not symmetric (asymmetry {asym:.2e})"));
        }
    }
}

fn validate_player(
    issues: &mut Vec<String>,
    cost: &PlayerCost,
    label: &str,
    n: usize,
    m1: usize,
    m2: usize,
    n_stages: usize,
) {
    if cost.n_stages != n_stages || cost.n_state != n || cost.m1 != m1 || cost.m2 != m2 {
        issues.push(format!(
            "{label}: declared dims (N={}, n={}, m1={}, m2={}) disagree with dynamics (N={n_stages}, n={n}, m1={m1}, m2={m2})",
            cost.n_stages, cost.n_state, cost.m1, cost.m2
        ));
        return;
    }
    let visit = |issues: &mut Vec<String>, t: usize, k: usize, w: &StageWeights| {
        let tag = |b: &str| format!("{label} ({t},{k}) {b}");
        check_shape(issues, &w.q, (n, n), &tag("Q"));
        check_shape(issues, &w.q_bar, (n, n), &tag("Q bar"));
        check_shape(issues, &w.s1, (m1, n), &tag("S1"));
        check_shape(issues, &w.s1_bar, (m1, n), &tag("S1 bar"));
        check_shape(issues, &w.s2, (m2, n), &tag("S2"));
        check_shape(issues, &w.s2_bar, (m2, n), &tag("S2 bar"));
        check_shape(issues, &w.r11, (m1, m1), &tag("R11"));
        check_shape(issues, &w.r11_bar, (m1, m1), &tag("R11 bar"));
        check_shape(issues, &w.r12, (m1, m2), &tag("R12"));
        check_shape(issues, &w.r12_bar, (m1, m2), &tag("R12 bar"));
        check_shape(issues, &w.r22, (m2, m2), &tag("R22"));
        check_shape(issues, &w.r22_bar, (m2, m2), &tag("R22 bar"));
        check_symmetric(issues, &w.q, &tag("Q"));
        check_symmetric(issues, &w.q_bar, &tag("Q bar"));
        check_symmetric(issues, &w.r11, &tag("R11"));
        check_symmetric(issues, &w.r11_bar, &tag("R11 bar"));
        check_symmetric(issues, &w.r22, &tag("R22"));
        check_symmetric(issues, &w.r22_bar, &tag("R22 bar"));
        if w.q_lin.len() != n {
            issues.push(tag("q linear term length"));
        }
        if w.rho1.len() != m1 || w.rho2.len() != m2 {
            issues.push(tag("rho linear term length"));
        }
    };
    match &cost.table {
        CostTable::Stationary { stages, terminal } => {
            if stages.len() != n_stages {
                issues.push(format!("{label}: {} stage entries, expected {n_stages}", stages.len()));
            }
            for (k, w) in stages.iter().enumerate() {
                visit(issues, 0, k, w);
            }
            check_shape(issues, &terminal.g, (n, n), &format!("{label} terminal G"));
            check_shape(issues, &terminal.g_bar, (n, n), &format!("{label} terminal G bar"));
            check_symmetric(issues, &terminal.g, &format!("{label} terminal G"));
            check_symmetric(issues, &terminal.g_bar, &format!("{label} terminal G bar"));
        }
        CostTable::DoubleIndexed { rows, terminals } => {
            if rows.len() != n_stages || terminals.len() != n_stages {
                issues.push(format!("{label}: triangular storage has wrong row count"));
            }
            for (t, row) in rows.iter().enumerate() {
                if row.len() != n_stages - t {
                    issues.push(format!(
                        "{label}: row t={t} has {} entries, expected {}",
                        row.len(),
                        n_stages - t
                    ));
                }
                for (off, w) in row.iter().enumerate() {
                    visit(issues, t, t + off, w);
                }
            }
            for (t, term) in terminals.iter().enumerate() {
                check_shape(issues, &term.g, (n, n), &format!("{label} terminal G (t={t})"));
                check_shape(issues, &term.g_bar, (n, n), &format!("{label} terminal G bar (t={t})"));
                check_symmetric(issues, &term.g, &format!("{label} terminal G (t={t})"));
                check_symmetric(issues, &term.g_bar, &format!("{label} terminal G bar (t={t})"));
            }
        }
    }
}

fn validate_dynamics(
    issues: &mut Vec<String>,
    n_stages: usize,
    n: usize,
    p: usize,
    mats: &[Vec<Mat>],
    cols: usize,
    label: &str,
) {
    if mats.len() != n_stages {
        issues.push(format!("{label}: {} stages, expected {n_stages}", mats.len()));
        return;
    }
    for (k, per_channel) in mats.iter().enumerate() {
        if per_channel.len() != p {
            issues.push(format!(
                "{label} stage {k}: {} channels, expected {p}",
                per_channel.len()
            ));
            continue;
        }
        for (i, m) in per_channel.iter().enumerate() {
            check_shape(issues, m, (n, cols), &format!("{label} stage {k} channel {i}"));
        }
    }
}

/// Structural validation of a two-player game instance. Report-based: every
/// dimension or symmetry violation is listed; an empty report means valid.
pub fn validate(problem: &GLQProblem) -> ValidationReport {
    let mut issues = Vec::new();
    let d = &problem.dynamics;
    let (nn, n, m1, m2) = (d.n_stages, d.n_state, d.m1, d.m2);
    let p = problem.noise.p;
    if d.a.len() != nn || d.b1.len() != nn || d.b2.len() != nn {
        issues.push(format!(
            "dynamics: drift stage counts (A: {}, B1: {}, B2: {}) disagree with horizon {nn}",
            d.a.len(),
            d.b1.len(),
            d.b2.len()
        ));
    }
    for (k, a) in d.a.iter().enumerate() {
        check_shape(&mut issues, a, (n, n), &format!("A stage {k}"));
    }
    for (k, b) in d.b1.iter().enumerate() {
        check_shape(&mut issues, b, (n, m1), &format!("B1 stage {k}"));
    }
    for (k, b) in d.b2.iter().enumerate() {
        check_shape(&mut issues, b, (n, m2), &format!("B2 stage {k}"));
    }
    validate_dynamics(&mut issues, nn, n, p, &d.c, n, "C");
    validate_dynamics(&mut issues, nn, n, p, &d.d1, m1, "D1");
    validate_dynamics(&mut issues, nn, n, p, &d.d2, m2, "D2");
    if problem.noise.deltas.len() != nn {
        issues.push(format!(
            "noise: {} stage moments, expected {nn}",
            problem.noise.deltas.len()
        ));
    }
    for (k, delta) in problem.noise.deltas.iter().enumerate() {
        check_shape(&mut issues, delta, (p, p), &format!("Delta stage {k}"));
        check_symmetric(&mut issues, delta, &format!("Delta stage {k}"));
    }
    validate_player(&mut issues, &problem.cost1, "player 1 cost", n, m1, m2, nn);
    validate_player(&mut issues, &problem.cost2, "player 2 cost", n, m1, m2, nn);
    ValidationReport { issues }
}

/// Per-`(t, k)` weights of the plain (single-control) LQ problem.
#[derive(Debug, Clone)]
pub struct LQStageWeights {
    pub q: Mat,
    pub q_bar: Mat,
    pub r: Mat,
    pub r_bar: Mat,
}

/// Terminal weights of the plain LQ problem at evaluation time `t`.
#[derive(Debug, Clone)]
pub struct LQTerminalWeights {
    pub g: Mat,
    pub g_bar: Mat,
}

/// Weight storage for the plain LQ problem (same indexing rule as
/// [`CostTable`]).
#[derive(Debug, Clone)]
pub enum LQCostTable {
    Stationary {
        stages: Vec<LQStageWeights>,
        terminal: LQTerminalWeights,
    },
    DoubleIndexed {
        rows: Vec<Vec<LQStageWeights>>,
        terminals: Vec<LQTerminalWeights>,
    },
}

/// A time-inconsistent LQ problem with a single control `v`:
///
/// ```text
/// X_{k+1} = (A0_k X_k + B0_k v_k) + sum_i (C0_k^i X_k + D0_k^i v_k) w_k^i,
/// J(t,x;v) = E_t sum_k [ X' Q0_{t,k} X + (E_t X)' Qbar0_{t,k} (E_t X)
///                      + v' R0_{t,k} v + (E_t v)' Rbar0_{t,k} (E_t v) ]
///          + E_t [ X_N' G0_t X_N ] + (E_t X_N)' Gbar0_t (E_t X_N).
/// ```
#[derive(Debug, Clone)]
pub struct LQProblem {
    pub n_stages: usize,
    pub n_state: usize,
    pub m: usize,
    pub a0: Vec<Mat>,
    pub b0: Vec<Mat>,
    pub c0: Vec<Vec<Mat>>,
    pub d0: Vec<Vec<Mat>>,
    pub weights: LQCostTable,
    pub noise: NoiseSpec,
}

impl LQProblem {
    pub fn stage_weights(&self, t: usize, k: usize) -> Result<&LQStageWeights> {
        if t > k || k >= self.n_stages {
            return Err(Error::IndexOutOfRange(format!(
                "LQ stage weights requested at (t={t}, k={k}) with horizon {}",
                self.n_stages
            )));
        }
        match &self.weights {
            LQCostTable::Stationary { stages, .. } => Ok(&stages[k]),
            LQCostTable::DoubleIndexed { rows, .. } => Ok(&rows[t][k - t]),
        }
    }

    pub fn terminal_weights(&self, t: usize) -> Result<&LQTerminalWeights> {
        if t >= self.n_stages {
            return Err(Error::IndexOutOfRange(format!(
                "LQ terminal weights requested at t={t} with horizon {}",
                self.n_stages
            )));
        }
        match &self.weights {
            LQCostTable::Stationary { terminal, .. } => Ok(terminal),
            LQCostTable::DoubleIndexed { terminals, .. } => Ok(&terminals[t]),
        }
    }
}

/// Structural validation of a plain LQ problem.
pub fn validate_lq(problem: &LQProblem) -> ValidationReport {
    let mut issues = Vec::new();
    let (nn, n, m, p) = (
        problem.n_stages,
        problem.n_state,
        problem.m,
        problem.noise.p,
    );
    if problem.a0.len() != nn || problem.b0.len() != nn {
        issues.push("dynamics: drift stage counts disagree with horizon".to_string());
    }
    for (k, a) in problem.a0.iter().enumerate() {
        check_shape(&mut issues, a, (n, n), &format!("A0 stage {k}"));
    }
    for (k, b) in problem.b0.iter().enumerate() {
        check_shape(&mut issues, b, (n, m), &format!("B0 stage {k}"));
    }
    validate_dynamics(&mut issues, nn, n, p, &problem.c0, n, "C0");
    validate_dynamics(&mut issues, nn, n, p, &problem.d0, m, "D0");
    if problem.noise.deltas.len() != nn {
        issues.push("noise: stage moment count disagrees with horizon".to_string());
    }
    for (k, delta) in problem.noise.deltas.iter().enumerate() {
        check_shape(&mut issues, delta, (p, p), &format!("Delta stage {k}"));
        check_symmetric(&mut issues, delta, &format!("Delta stage {k}"));
    }
    let visit = |issues: &mut Vec<String>, t: usize, k: usize, w: &LQStageWeights| {
        let tag = |b: &str| format!("LQ cost ({t},{k}) {b}");
        check_shape(issues, &w.q, (n, n), &tag("Q0"));
        check_shape(issues, &w.q_bar, (n, n), &tag("Q0 bar"));
        check_shape(issues, &w.r, (m, m), &tag("R0"));
        check_shape(issues, &w.r_bar, (m, m), &tag("R0 bar"));
        check_symmetric(issues, &w.q, &tag("Q0"));
        check_symmetric(issues, &w.q_bar, &tag("Q0 bar"));
        check_symmetric(issues, &w.r, &tag("R0"));
        check_symmetric(issues, &w.r_bar, &tag("R0 bar"));
    };
    match &problem.weights {
        LQCostTable::Stationary { stages, terminal } => {
            if stages.len() != nn {
                issues.push("LQ cost: stage entry count disagrees with horizon".to_string());
            }
            for (k, w) in stages.iter().enumerate() {
                visit(&mut issues, 0, k, w);
            }
            check_shape(&mut issues, &terminal.g, (n, n), "LQ terminal G0");
            check_shape(&mut issues, &terminal.g_bar, (n, n), "LQ terminal G0 bar");
            check_symmetric(&mut issues, &terminal.g, "LQ terminal G0");
            check_symmetric(&mut issues, &terminal.g_bar, "LQ terminal G0 bar");
        }
        LQCostTable::DoubleIndexed { rows, terminals } => {
            for (t, row) in rows.iter().enumerate() {
                if row.len() != nn - t {
                    issues.push(format!("LQ cost: row t={t} has wrong length"));
                }
                for (off, w) in row.iter().enumerate() {
                    visit(&mut issues, t, t + off, w);
                }
            }
            for (t, term) in terminals.iter().enumerate() {
                check_shape(&mut issues, &term.g, (n, n), &format!("LQ terminal G0 (t={t})"));
                check_shape(
                    &mut issues,
                    &term.g_bar,
                    (n, n),
                    &format!("LQ terminal G0 bar (t={t})"),
                );
            }
        }
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::mat;

    fn tiny_problem() -> GLQProblem {
        // N=1 scalar game used throughout the crate's unit tests.
        let dynamics = GLQDynamics {
            n_stages: 1,
            n_state: 1,
            m1: 1,
            m2: 1,
            a: vec![mat(&[&[1.0]])],
            b1: vec![mat(&[&[1.0]])],
            b2: vec![mat(&[&[1.0]])],
            c: vec![vec![mat(&[&[0.0]])]],
            d1: vec![vec![mat(&[&[0.0]])]],
            d2: vec![vec![mat(&[&[0.0]])]],
        };
        let mut cost1 = PlayerCost::zeros_stationary(1, 1, 1, 1);
        cost1.stage_mut(0, 0).unwrap().r11[(0, 0)] = 1.0;
        cost1.terminal_mut(0).unwrap().g[(0, 0)] = 1.0;
        let mut cost2 = PlayerCost::zeros_stationary(1, 1, 1, 1);
        cost2.stage_mut(0, 0).unwrap().r22[(0, 0)] = 1.0;
        cost2.terminal_mut(0).unwrap().g[(0, 0)] = 1.0;
        GLQProblem {
            dynamics,
            noise: NoiseSpec::zero(1, 1),
            cost1,
            cost2,
        }
    }

    #[test]
    fn valid_problem_yields_empty_report() {
        let report = validate(&tiny_problem());
        assert!(report.is_ok(), "unexpected issues: {:?}", report.issues);
    }

    #[test]
    fn wrong_block_shape_is_reported_with_location() {
        let mut p = tiny_problem();
        p.cost1.stage_mut(0, 0).unwrap().r12 = Mat::zeros(2, 1);
        let report = validate(&p);
        assert_eq!(report.issues.len(), 1, "issues: {:?}", report.issues);
        assert!(
            report.issues[0].contains("player 1 cost (0,0) R12"),
            "issue should name player, indices, block: {}",
            report.issues[0]
        );
    }

    #[test]
    fn script_weight_is_plain_plus_barred() {
        let mut p = tiny_problem();
        {
            let w = p.cost1.stage_mut(0, 0).unwrap();
            w.q[(0, 0)] = 2.0;
            w.q_bar[(0, 0)] = 0.5;
            w.r12[(0, 0)] = 3.0;
            w.r12_bar[(0, 0)] = -3.0;
        }
        let qs = script_weight(&p.cost1, WeightName::Q, 0, 0).unwrap();
        assert_eq!(qs[(0, 0)], 2.5);
        let r12s = script_weight(&p.cost1, WeightName::R12, 0, 0).unwrap();
        assert_eq!(r12s[(0, 0)], 0.0, "barred = -plain cancels exactly");
        let r21s = script_weight(&p.cost1, WeightName::R21, 0, 0).unwrap();
        assert_eq!(r21s, r12s.transpose());
        let gs = script_weight(&p.cost1, WeightName::G, 0, 0).unwrap();
        assert_eq!(gs[(0, 0)], 1.0);
    }

    #[test]
    fn stationary_lift_ignores_evaluation_time() {
        let mut cost = PlayerCost::zeros_stationary(3, 1, 1, 1);
        cost.stage_mut(0, 2).unwrap().q[(0, 0)] = 7.0;
        assert_eq!(cost.stage(0, 2).unwrap().q[(0, 0)], 7.0);
        assert_eq!(cost.stage(2, 2).unwrap().q[(0, 0)], 7.0);
        assert_eq!(cost.stage(1, 2).unwrap().q[(0, 0)], 7.0);
        assert!(cost.stage(2, 1).is_err(), "k < t must be rejected");
        assert!(cost.stage(0, 3).is_err(), "k = N must be rejected");
    }

    #[test]
    fn validate_is_pure_and_idempotent() {
        let p = tiny_problem();
        let r1 = validate(&p);
        let r2 = validate(&p);
        assert_eq!(r1.issues, r2.issues);
        assert!(r1.is_ok());
    }
}
