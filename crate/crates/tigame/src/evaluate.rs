//! Cost evaluation: exact scenario trees, exact moment propagation, Monte
//! Carlo estimation, punishment-weight sweeps, and a brute-force oracle.
//!
//! The [`ScenarioTree`] realizes the martingale-difference noise exactly in
//! its first two conditional moments: each stage branches into `2^p` product
//! two-point outcomes `w = L eps`, `eps_i in {-1, +1}` equiprobable, with
//! `L L' = Delta_k`. Every quantity appearing in the stationarity system, the
//! adjoint recursions, and the quadratic costs involves only conditional
//! first and second noise moments, so evaluation on the tree is exact (up to
//! roundoff) for those quantities.

use crate::equilibrium::{self, EquilibriumLaw};
use crate::fictitious::{self, Punishment, SelfCoordinationSolution};
use crate::meanvar::{self, MarketData};
use crate::model::{GLQProblem, LQProblem, NoiseSpec, SamplerKind};
use crate::numkit::{self, Mat, Tolerances, Vecf};
use crate::riccati::LeftBracket;
use crate::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// A product two-point scenario tree over stages `t..t+depth`.
///
/// Nodes at level `s` (state epoch `t + s`) are indexed `0..nodes_at(s)`;
/// the children of node `m` under transition `s` are `m * nb + b` for the
/// `nb` branches `b` of that transition. Level 0 has the single root.
#[derive(Debug, Clone)]
pub struct ScenarioTree {
    /// First stage (absolute).
    pub t: usize,
    /// Number of transitions; states live at levels `0..=depth`.
    pub depth: usize,
    /// Noise dimension.
    pub p: usize,
    /// `branch_w[s][b]`: noise vector of branch `b` of transition `s`.
    pub branch_w: Vec<Vec<Vecf>>,
    /// `branch_prob[s][b]`: probability of that branch.
    pub branch_prob: Vec<Vec<f64>>,
}

impl ScenarioTree {
    /// Build the exact-moment tree for stages `t..n_stages`: transition `s`
    /// uses `L_s = sqrt(Delta_{t+s})` and the `2^p` sign patterns.
    pub fn two_point(noise: &NoiseSpec, t: usize, n_stages: usize) -> Self {
        let p = noise.p;
        let depth = n_stages - t;
        let mut branch_w = Vec::with_capacity(depth);
        let mut branch_prob = Vec::with_capacity(depth);
        for s in 0..depth {
            let l = numkit::psd_sqrt(&noise.deltas[t + s]);
            let nb = 1usize << p;
            let prob = 1.0 / nb as f64;
            let mut ws = Vec::with_capacity(nb);
            for pattern in 0..nb {
                let eps = Vecf::from_fn(p, |i, _| {
                    if (pattern >> i) & 1 == 1 {
                        1.0
                    } else {
                        -1.0
                    }
                });
                ws.push(&l * eps);
            }
            branch_w.push(ws);
            branch_prob.push(vec![prob; nb]);
        }
        ScenarioTree {
            t,
            depth,
            p,
            branch_w,
            branch_prob,
        }
    }

    pub fn n_branches(&self, s: usize) -> usize {
        self.branch_w[s].len()
    }

    pub fn nodes_at(&self, s: usize) -> usize {
        (0..s).map(|j| self.n_branches(j)).product()
    }

    /// Parent (at level `s - 1`) of node `m` at level `s`.
    pub fn parent(&self, s: usize, m: usize) -> usize {
        m / self.n_branches(s - 1)
    }

    /// Branch index of the transition that produced node `m` at level `s`.
    pub fn branch_of(&self, s: usize, m: usize) -> usize {
        m % self.n_branches(s - 1)
    }

    /// Ancestor of node `m` (level `s`) at the earlier level `s0 <= s`.
    pub fn ancestor(&self, s: usize, m: usize, s0: usize) -> usize {
        let mut node = m;
        for level in (s0 + 1..=s).rev() {
            node = self.parent(level, node);
        }
        node
    }

    /// Unconditional probability of reaching node `m` at level `s`.
    pub fn path_prob(&self, s: usize, m: usize) -> f64 {
        let mut prob = 1.0;
        let mut node = m;
        for level in (1..=s).rev() {
            prob *= self.branch_prob[level - 1][self.branch_of(level, node)];
            node = self.parent(level, node);
        }
        prob
    }

    /// One conditional-expectation step: values on level `s + 1` reduced to
    /// their conditional means on level `s`.
    pub fn cond_step<T>(&self, s: usize, vals: &[T]) -> Vec<T>
    where
        T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let nb = self.n_branches(s);
        (0..self.nodes_at(s))
            .map(|m| {
                let mut acc = vals[m * nb].clone() * self.branch_prob[s][0];
                for b in 1..nb {
                    acc = acc + vals[m * nb + b].clone() * self.branch_prob[s][b];
                }
                acc
            })
            .collect()
    }

    /// Conditional mean of `value * w^i` across one step (used for the noise
    /// cross terms in the adjoint recursions).
    pub fn cond_step_weighted<T>(&self, s: usize, vals: &[T], i: usize) -> Vec<T>
    where
        T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let nb = self.n_branches(s);
        (0..self.nodes_at(s))
            .map(|m| {
                let mut acc = vals[m * nb].clone()
                    * (self.branch_prob[s][0] * self.branch_w[s][0][i]);
                for b in 1..nb {
                    acc = acc
                        + vals[m * nb + b].clone()
                            * (self.branch_prob[s][b] * self.branch_w[s][b][i]);
                }
                acc
            })
            .collect()
    }

    /// Fold values on level `s_from` down to conditional means on `s_to`.
    pub fn cond_to<T>(&self, s_from: usize, vals: &[T], s_to: usize) -> Vec<T>
    where
        T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let mut cur = vals.to_vec();
        for s in (s_to..s_from).rev() {
            cur = self.cond_step(s, &cur);
        }
        cur
    }

    /// Full expectation (root conditional mean) of values on level `s`.
    pub fn expect<T>(&self, s: usize, vals: &[T]) -> T
    where
        T: Clone + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        self.cond_to(s, vals, 0).remove(0)
    }
}

// ---------------------------------------------------------------------------
// Exact moment-propagation evaluation of expected tail objectives.
// ---------------------------------------------------------------------------

/// First and second moments of the stacked pair `(Z, m)` where `Z` is the
/// closed-loop doubled state and `m` the conditional mean run forward from
/// the evaluation stage (`m` evolves by drift only).
#[derive(Debug, Clone)]
pub struct MomentState {
    pub mean: Vecf,
    /// `E[S S']` for the stacked vector `S = (Z; m)`; symmetric PSD.
    pub smom: Mat,
}

fn hstack2(a: &Mat, b: &Mat) -> Mat {
    let mut m = Mat::zeros(a.nrows(), a.ncols() + b.ncols());
    m.view_mut((0, 0), a.shape()).copy_from(a);
    m.view_mut((0, a.ncols()), b.shape()).copy_from(b);
    m
}

/// Affine closed-loop coefficients at stage `k` under the law:
/// `Z' = F Z + f + sum_i (G_i Z + g_i) w_i`.
fn closed_loop(
    problem: &GLQProblem,
    law: &EquilibriumLaw,
    k: usize,
) -> (Mat, Vecf, Vec<Mat>, Vec<Vecf>) {
    let d = &problem.dynamics;
    let i = k - law.t;
    let kd = &law.k_dev[i];
    let q = &law.mean_ctrl[i] - kd * &law.mean_path[i];
    let b = hstack2(&d.b1[k], &d.b2[k]);
    let f_mat = &d.a[k] + &b * kd;
    let f_off = &b * &q;
    let mut g_mats = Vec::with_capacity(problem.noise.p);
    let mut g_offs = Vec::with_capacity(problem.noise.p);
    for ni in 0..problem.noise.p {
        let dm = hstack2(&d.d1[k][ni], &d.d2[k][ni]);
        g_mats.push(&d.c[k][ni] + &dm * kd);
        g_offs.push(&dm * &q);
    }
    (f_mat, f_off, g_mats, g_offs)
}

/// `E[(A1 S + b1)' M (A2 S + b2)]` for the stacked moments `(mean, smom)`.
fn expect_quad(
    m: &Mat,
    a1: &Mat,
    b1: &Vecf,
    a2: &Mat,
    b2: &Vecf,
    mean: &Vecf,
    smom: &Mat,
) -> f64 {
    ((a1.transpose() * m * a2) * smom).trace()
        + (b1.transpose() * m * (a2 * mean))[(0, 0)]
        + ((a1 * mean).transpose() * m * b2)[(0, 0)]
        + (b1.transpose() * m * b2)[(0, 0)]
}

/// Selector that reads `nrows` consecutive entries starting at `col0` out of
/// a stacked vector of width `width`.
fn selector(nrows: usize, col0: usize, width: usize) -> Mat {
    Mat::from_fn(nrows, width, |i, j| if j == col0 + i { 1.0 } else { 0.0 })
}

/// Which state process the tail objective is judged on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailDynamics {
    /// The copy of the doubled closed loop driven by the stage-wise control
    /// in both drift and noise.
    Stagewise,
    /// A third process whose drift is driven by the whole-horizon control
    /// and whose noise is driven by the stage-wise control; the cost still
    /// charges the stage-wise control.
    Mixed,
}

/// The affine evaluation process `S' = F S + f + sum_i (G_i S + g_i) w_i`
/// together with the read-outs of the judged state and the charged control.
struct TailSystem {
    dim: usize,
    init: Vecf,
    /// Per stage `l - t`: `(F, f, {G_i}, {g_i})`.
    coeff: Vec<(Mat, Vecf, Vec<Mat>, Vec<Vecf>)>,
    /// Per stage `l - t`: charged control `= K S + q`.
    ctrl: Vec<(Mat, Vecf)>,
    /// Row where the judged state block starts.
    state_row: usize,
}

/// Evaluation process that is one copy of the doubled closed loop;
/// `state_row` selects the copy and `ctrl_row` the matching control rows.
fn copy_tail_system(
    lq: &LQProblem,
    scs: &SelfCoordinationSolution,
    state_row: usize,
    ctrl_row: usize,
) -> TailSystem {
    let (game, law) = (&scs.game, &scs.law);
    let (t, nn) = (law.t, law.n_stages);
    let (d2, m0) = (game.dynamics.n_state, lq.m);
    let mut coeff = Vec::with_capacity(nn - t);
    let mut ctrl = Vec::with_capacity(nn - t);
    for l in t..nn {
        coeff.push(closed_loop(game, law, l));
        let kd = law.k_dev[l - t].rows(ctrl_row, m0).clone_owned();
        let q = (&law.mean_ctrl[l - t] - &law.k_dev[l - t] * &law.mean_path[l - t])
            .rows(ctrl_row, m0)
            .clone_owned();
        ctrl.push((kd, q));
    }
    TailSystem {
        dim: d2,
        init: law.mean_path[0].clone(),
        coeff,
        ctrl,
        state_row,
    }
}

/// Evaluation process with split roles: the doubled closed loop is carried
/// along, and a third state copy takes its drift from the whole-horizon
/// control rows and its noise from the stage-wise control rows. The charged
/// control is the stage-wise one.
fn mixed_tail_system(lq: &LQProblem, scs: &SelfCoordinationSolution) -> TailSystem {
    let (game, law) = (&scs.game, &scs.law);
    let (t, nn) = (law.t, law.n_stages);
    let d2 = game.dynamics.n_state;
    let (n0, m0) = (lq.n_state, lq.m);
    let dim = d2 + n0;
    let mut coeff = Vec::with_capacity(nn - t);
    let mut ctrl = Vec::with_capacity(nn - t);
    for l in t..nn {
        let (f, foff, gs, goffs) = closed_loop(game, law, l);
        let kd = &law.k_dev[l - t];
        let q = &law.mean_ctrl[l - t] - kd * &law.mean_path[l - t];
        let ku = kd.rows(0, m0).clone_owned();
        let qu = q.rows(0, m0).clone_owned();
        let kv = kd.rows(game.dynamics.m1, m0).clone_owned();
        let qv = q.rows(game.dynamics.m1, m0).clone_owned();

        let mut fe = Mat::zeros(dim, dim);
        fe.view_mut((0, 0), (d2, d2)).copy_from(&f);
        fe.view_mut((d2, 0), (n0, d2)).copy_from(&(&lq.b0[l] * &ku));
        fe.view_mut((d2, d2), (n0, n0)).copy_from(&lq.a0[l]);
        let mut fe_off = Vecf::zeros(dim);
        fe_off.rows_mut(0, d2).copy_from(&foff);
        fe_off.rows_mut(d2, n0).copy_from(&(&lq.b0[l] * &qu));

        let mut ge = Vec::with_capacity(gs.len());
        let mut ge_off = Vec::with_capacity(gs.len());
        for i in 0..gs.len() {
            let mut g = Mat::zeros(dim, dim);
            g.view_mut((0, 0), (d2, d2)).copy_from(&gs[i]);
            g.view_mut((d2, 0), (n0, d2))
                .copy_from(&(&lq.d0[l][i] * &kv));
            g.view_mut((d2, d2), (n0, n0)).copy_from(&lq.c0[l][i]);
            let mut go = Vecf::zeros(dim);
            go.rows_mut(0, d2).copy_from(&goffs[i]);
            go.rows_mut(d2, n0).copy_from(&(&lq.d0[l][i] * &qv));
            ge.push(g);
            ge_off.push(go);
        }
        coeff.push((fe, fe_off, ge, ge_off));

        let mut kc = Mat::zeros(m0, dim);
        kc.view_mut((0, 0), (m0, d2)).copy_from(&kv);
        ctrl.push((kc, qv));
    }
    let mut init = Vecf::zeros(dim);
    init.rows_mut(0, d2).copy_from(&law.mean_path[0]);
    init.rows_mut(d2, n0)
        .copy_from(&law.mean_path[0].rows(0, n0));
    TailSystem {
        dim,
        init,
        coeff,
        ctrl,
        state_row: d2,
    }
}

fn tail_system(
    lq: &LQProblem,
    scs: &SelfCoordinationSolution,
    dynamics: TailDynamics,
) -> TailSystem {
    match dynamics {
        TailDynamics::Stagewise => copy_tail_system(lq, scs, lq.n_state, scs.game.dynamics.m1),
        TailDynamics::Mixed => mixed_tail_system(lq, scs),
    }
}

/// Shared worker: the expected tail objective from stage `k`, judged with
/// stage-`k` conditional means, of the original objective read off the
/// evaluation process `sys`.
fn tail_cost_block(
    lq: &LQProblem,
    scs: &SelfCoordinationSolution,
    sys: &TailSystem,
    k: usize,
    term_lin: Option<&Vecf>,
) -> Result<f64> {
    let law = &scs.law;
    let (t, nn) = (law.t, law.n_stages);
    if k < t || k > nn {
        return Err(Error::IndexOutOfRange(format!(
            "tail cost requested at stage {k}, law covers {t}..{nn}"
        )));
    }
    let n0 = lq.n_state;
    let ds = sys.dim;
    if let Some(gl) = term_lin {
        if gl.len() != n0 {
            return Err(Error::InvalidProblem(format!(
                "terminal linear weight has {} entries, expected {n0}",
                gl.len()
            )));
        }
    }

    // Moments of S alone from the initial stage up to k.
    let mut mean = sys.init.clone();
    let mut smom = &mean * mean.transpose();
    for l in t..k {
        let (f, foff, gs, goffs) = &sys.coeff[l - t];
        let (m_next, s_next) = numkit::second_moment_step(
            f,
            foff,
            gs,
            goffs,
            &scs.game.noise.deltas[l],
            &mean,
            &smom,
        );
        mean = m_next;
        smom = s_next;
    }

    // Stack (S, m) with m_k = S_k: equal means, fully correlated blocks.
    let dd = 2 * ds;
    let mut st = MomentState {
        mean: Vecf::zeros(dd),
        smom: Mat::zeros(dd, dd),
    };
    st.mean.rows_mut(0, ds).copy_from(&mean);
    st.mean.rows_mut(ds, ds).copy_from(&mean);
    for bi in 0..2 {
        for bj in 0..2 {
            st.smom
                .view_mut((bi * ds, bj * ds), (ds, ds))
                .copy_from(&smom);
        }
    }

    let ax = selector(n0, sys.state_row, dd);
    let axm = selector(n0, ds + sys.state_row, dd);
    let zn = Vecf::zeros(n0);
    let mut total = 0.0;
    for l in k..nn {
        let w = lq.stage_weights(k, l)?;
        let (kc, qv) = &sys.ctrl[l - t];
        let m0 = kc.nrows();
        let mut au = Mat::zeros(m0, dd);
        au.view_mut((0, 0), (m0, ds)).copy_from(kc);
        let mut aum = Mat::zeros(m0, dd);
        aum.view_mut((0, ds), (m0, ds)).copy_from(kc);
        total += expect_quad(&w.q, &ax, &zn, &ax, &zn, &st.mean, &st.smom)
            + expect_quad(&w.q_bar, &axm, &zn, &axm, &zn, &st.mean, &st.smom)
            + expect_quad(&w.r, &au, qv, &au, qv, &st.mean, &st.smom)
            + expect_quad(&w.r_bar, &aum, qv, &aum, qv, &st.mean, &st.smom);

        // Propagate the stack: the S block carries drift and noise, the m
        // block drift only.
        let (f, foff, gs, goffs) = &sys.coeff[l - t];
        let mut fs = Mat::zeros(dd, dd);
        fs.view_mut((0, 0), (ds, ds)).copy_from(f);
        fs.view_mut((ds, ds), (ds, ds)).copy_from(f);
        let mut fs_off = Vecf::zeros(dd);
        fs_off.rows_mut(0, ds).copy_from(foff);
        fs_off.rows_mut(ds, ds).copy_from(foff);
        let gss: Vec<Mat> = gs
            .iter()
            .map(|g| {
                let mut gg = Mat::zeros(dd, dd);
                gg.view_mut((0, 0), (ds, ds)).copy_from(g);
                gg
            })
            .collect();
        let goffs_s: Vec<Vecf> = goffs
            .iter()
            .map(|g| {
                let mut gg = Vecf::zeros(dd);
                gg.rows_mut(0, ds).copy_from(g);
                gg
            })
            .collect();
        let (m_next, s_next) = numkit::second_moment_step(
            &fs,
            &fs_off,
            &gss,
            &goffs_s,
            &scs.game.noise.deltas[l],
            &st.mean,
            &st.smom,
        );
        st.mean = m_next;
        st.smom = s_next;
    }

    // At k = N only the terminal term remains; its weights are read from the
    // last evaluation stage.
    let tw = lq.terminal_weights(k.min(nn - 1))?;
    total += expect_quad(&tw.g, &ax, &zn, &ax, &zn, &st.mean, &st.smom)
        + expect_quad(&tw.g_bar, &axm, &zn, &axm, &zn, &st.mean, &st.smom);
    if let Some(gl) = term_lin {
        total += 2.0 * gl.dot(&(&axm * &st.mean));
    }
    Ok(total)
}

/// Expected tail objective of the stage-wise (self-coordination) control:
/// the original objective judged at stage `k` on the evaluation process
/// selected by `dynamics`, computed exactly by moment propagation.
/// `term_lin` is an optional linear terminal weight on the stage-`k`
/// conditional mean (used by the mean-variance objective).
pub fn expected_tail_cost(
    lq: &LQProblem,
    scs: &SelfCoordinationSolution,
    k: usize,
    dynamics: TailDynamics,
    term_lin: Option<&Vecf>,
) -> Result<f64> {
    let sys = tail_system(lq, scs, dynamics);
    tail_cost_block(lq, scs, &sys, k, term_lin)
}

/// Expected tail objective of the precommitted baseline: the whole-horizon
/// control rows applied to the fictitious copy, from the zero-punishment
/// solution.
pub fn precommit_baseline(
    lq: &LQProblem,
    scs: &SelfCoordinationSolution,
    k: usize,
    term_lin: Option<&Vecf>,
) -> Result<f64> {
    for l in scs.law.t..scs.law.n_stages {
        if scs.game.cost2.stage(l, l)?.r12.norm() > 0.0 {
            return Err(Error::InvalidProblem(
                "precommitted baseline needs the zero-punishment solution (the two copies are coupled)"
                    .to_string(),
            ));
        }
    }
    let sys = copy_tail_system(lq, scs, 0, 0);
    tail_cost_block(lq, scs, &sys, k, term_lin)
}

// ---------------------------------------------------------------------------
// Monte-Carlo cross-check.
// ---------------------------------------------------------------------------

fn sample_noise(rng: &mut ChaCha8Rng, kind: SamplerKind, l_mat: &Mat) -> Vecf {
    let p = l_mat.nrows();
    let eps = match kind {
        SamplerKind::TwoPointProduct => Vecf::from_fn(p, |_, _| {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        }),
        SamplerKind::GaussianWithCov => Vecf::from_fn(p, |_, _| {
            // Box-Muller transform; u1 bounded away from zero.
            let u1: f64 = 1.0 - rng.random::<f64>();
            let u2: f64 = rng.random();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }),
    };
    l_mat * eps
}

/// Monte-Carlo estimate of the stage-`k` expected tail objective of the
/// stage-wise control; conditional means inside the objective are computed
/// by the exact drift recursion from the simulated stage-`k` state (valid
/// because the closed loop is affine). Returns `(estimate, standard error)`.
pub fn monte_carlo_tail_cost(
    lq: &LQProblem,
    scs: &SelfCoordinationSolution,
    k: usize,
    dynamics: TailDynamics,
    paths: usize,
    seed: u64,
    term_lin: Option<&Vecf>,
) -> Result<(f64, f64)> {
    if paths < 2 {
        return Err(Error::InvalidProblem(format!(
            "Monte-Carlo needs at least 2 paths, got {paths}"
        )));
    }
    let game = &scs.game;
    let law = &scs.law;
    let (t, nn) = (law.t, law.n_stages);
    if k < t || k > nn {
        return Err(Error::IndexOutOfRange(format!(
            "tail cost requested at stage {k}, law covers {t}..{nn}"
        )));
    }
    let n0 = lq.n_state;
    if let Some(gl) = term_lin {
        if gl.len() != n0 {
            return Err(Error::InvalidProblem(format!(
                "terminal linear weight has {} entries, expected {n0}",
                gl.len()
            )));
        }
    }

    let sys = tail_system(lq, scs, dynamics);
    let state_row = sys.state_row;
    let roots: Vec<Mat> = (t..nn)
        .map(|l| numkit::psd_sqrt(&game.noise.deltas[l]))
        .collect();
    let kind = game.noise.sampler_kind;

    let one_path = |rng: &mut ChaCha8Rng| -> f64 {
        // Simulated evaluation state at every stage.
        let mut z = Vec::with_capacity(nn - t + 1);
        z.push(sys.init.clone());
        for si in 0..(nn - t) {
            let (f, foff, gs, goffs) = &sys.coeff[si];
            let w = sample_noise(rng, kind, &roots[si]);
            let zc = &z[si];
            let mut next = f * zc + foff;
            for i in 0..w.len() {
                if w[i] != 0.0 {
                    next += w[i] * (&gs[i] * zc + &goffs[i]);
                }
            }
            z.push(next);
        }
        // Conditional means from stage k onward: drift recursion.
        let mut m = Vec::with_capacity(nn - k + 1);
        m.push(z[k - t].clone());
        for l in k..nn {
            let (f, foff, _, _) = &sys.coeff[l - t];
            let last = m.last().unwrap();
            m.push(f * last + foff);
        }
        let mut cost = 0.0;
        for l in k..nn {
            let w = lq.stage_weights(k, l).expect("stage weights");
            let (kc, qv) = &sys.ctrl[l - t];
            let x = z[l - t].rows(state_row, n0);
            let xb = m[l - k].rows(state_row, n0);
            let u = kc * &z[l - t] + qv;
            let ub = kc * &m[l - k] + qv;
            cost += (x.transpose() * &w.q * &x)[(0, 0)]
                + (xb.transpose() * &w.q_bar * &xb)[(0, 0)]
                + (u.transpose() * &w.r * &u)[(0, 0)]
                + (ub.transpose() * &w.r_bar * &ub)[(0, 0)];
        }
        let tw = lq.terminal_weights(k.min(nn - 1)).expect("terminal weights");
        let x = z[nn - t].rows(state_row, n0);
        let xb = m[nn - k].rows(state_row, n0);
        cost += (x.transpose() * &tw.g * &x)[(0, 0)] + (xb.transpose() * &tw.g_bar * &xb)[(0, 0)];
        if let Some(gl) = term_lin {
            cost += 2.0 * gl.dot(&xb.clone_owned());
        }
        cost
    };

    // Fixed-size chunks with counter-based seeds: the estimate is
    // independent of the thread count. Accumulating squared deviations
    // around a pilot value keeps the variance free of cancellation.
    let pilot = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
        one_path(&mut rng)
    };
    const CHUNK: usize = 4096;
    let n_chunks = paths.div_ceil(CHUNK);
    let (sum, sumsq) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let count = CHUNK.min(paths - c * CHUNK);
            let mut s = 0.0;
            let mut s2 = 0.0;
            for _ in 0..count {
                let v = one_path(&mut rng) - pilot;
                s += v;
                s2 += v * v;
            }
            (s, s2)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = paths as f64;
    let mean_dev = sum / n;
    let var = ((sumsq / n - mean_dev * mean_dev) * n / (n - 1.0)).max(0.0);
    Ok((pilot + mean_dev, (var / n).sqrt()))
}

// ---------------------------------------------------------------------------
// Brute-force scenario-tree equilibrium oracle.
// ---------------------------------------------------------------------------

/// Node controls found by the brute-force oracle, plus the least-squares
/// residual of the stationarity system.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub u: Vec<Vec<Vecf>>,
    pub v: Vec<Vec<Vecf>>,
    /// Norm of the stationarity residual at the least-squares solution.
    pub residual: f64,
    /// True iff the system is consistent (residual below `1e-8` relative to
    /// the zero-control residual), i.e. an open-loop equilibrium exists on
    /// the tree.
    pub consistent: bool,
}

/// Solve the first-order conditions on the tree directly, treating every
/// node control as an unknown: the adjoints are eliminated by exact backward
/// substitution, the resulting system is affine in the controls, and its
/// matrix is recovered by probing with unit controls. Returns the
/// least-squares solution; an inconsistent system (no equilibrium from this
/// initial state) is reported through the `consistent` flag.
pub fn tree_oracle_equilibrium(
    problem: &GLQProblem,
    tree: &ScenarioTree,
    y: &Vecf,
    tol: &Tolerances,
) -> Result<OracleSolution> {
    let d = &problem.dynamics;
    let (m1, m2) = (d.m1, d.m2);
    let mc = m1 + m2;
    let n_unknowns: usize = (0..tree.depth).map(|s| tree.nodes_at(s) * mc).sum();
    if n_unknowns > 512 {
        return Err(Error::InvalidProblem(format!(
            "tree oracle limited to 512 control unknowns, this tree needs {n_unknowns}"
        )));
    }
    if y.len() != d.n_state {
        return Err(Error::InvalidProblem(format!(
            "initial state has dimension {}, expected {}",
            y.len(),
            d.n_state
        )));
    }

    let unpack = |c: &Vecf| -> (Vec<Vec<Vecf>>, Vec<Vec<Vecf>>) {
        let mut u = Vec::with_capacity(tree.depth);
        let mut v = Vec::with_capacity(tree.depth);
        let mut at = 0;
        for s in 0..tree.depth {
            let nodes = tree.nodes_at(s);
            let mut us = Vec::with_capacity(nodes);
            let mut vs = Vec::with_capacity(nodes);
            for _ in 0..nodes {
                us.push(c.rows(at, m1).clone_owned());
                vs.push(c.rows(at + m1, m2).clone_owned());
                at += mc;
            }
            u.push(us);
            v.push(vs);
        }
        (u, v)
    };

    let eval = |c: &Vecf| -> Result<Vecf> {
        let (u, v) = unpack(c);
        let x_ref = vec![vec![y.clone()]];
        let x = equilibrium::forward_with_controls(problem, tree, &x_ref, &u, &v, 0);
        let (y_adj, z_adj) = equilibrium::tree_adjoints(problem, tree, &x, &u, &v)?;
        let terms = equilibrium::stationarity_terms(problem, tree, &x, &u, &v, &y_adj, &z_adj)?;
        let mut out = Vecf::zeros(n_unknowns);
        let mut at = 0;
        for nodes in &terms {
            for (r1, r2) in nodes {
                out.rows_mut(at, m1).copy_from(r1);
                out.rows_mut(at + m1, m2).copy_from(r2);
                at += mc;
            }
        }
        Ok(out)
    };

    let r0 = eval(&Vecf::zeros(n_unknowns))?;
    let mut m = Mat::zeros(n_unknowns, n_unknowns);
    for j in 0..n_unknowns {
        let mut e = Vecf::zeros(n_unknowns);
        e[j] = 1.0;
        let col = eval(&e)? - &r0;
        m.column_mut(j).copy_from(&col);
    }
    let sol = -numkit::pinv(&m, tol) * &r0;
    let residual = (&m * &sol + &r0).norm();
    let consistent = residual <= 1e-8 * (1.0 + r0.norm());
    let (u, v) = unpack(&sol);
    Ok(OracleSolution {
        u,
        v,
        residual,
        consistent,
    })
}

// ---------------------------------------------------------------------------
// Punishment-intensity sweeps.
// ---------------------------------------------------------------------------

/// A problem that can be swept over punishment intensities.
#[derive(Debug, Clone)]
pub enum SweepProblem<'a> {
    /// Plain LQ benchmark with its initial state.
    Lq { lq: &'a LQProblem, x0: &'a Vecf },
    /// Mean-variance market (initial wealth carried by the market data).
    Mv { market: &'a MarketData },
}

/// Options for [`sweep`].
#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Evaluation stages.
    pub ks: Vec<usize>,
    /// Punishment intensities (nonnegative; sorted and deduplicated here).
    pub grid: Vec<f64>,
    /// Punishment direction; identity when absent.
    pub psi: Option<Mat>,
    /// Use the all-plus block coupling instead of the default sign pattern.
    pub literal_coupling: bool,
    /// Left-bracket orientation of the backward pass. The frozen benchmark
    /// reference values were generated under
    /// [`LeftBracket::PlainAdjoints`]; the default is the
    /// stationarity-consistent orientation.
    pub bracket: LeftBracket,
    pub tol: Tolerances,
}

/// One grid row: the evaluated values per requested stage, or the failure
/// that prevented them.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub mu: f64,
    pub values: Vec<Option<f64>>,
    pub error: Option<String>,
}

/// Sweep output: per-μ values, the two baselines, and per-stage minima.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub ks: Vec<usize>,
    pub rows: Vec<SweepRow>,
    /// Precommitted baseline per stage (whole-horizon control, zero
    /// punishment).
    pub precommit: Vec<f64>,
    /// Time-consistent baseline per stage; bit-identical to the `μ = 0` row
    /// when the grid contains zero.
    pub timeconsistent: Vec<f64>,
    /// Per stage: `(argmin μ, min value)` over rows without failures at that
    /// stage; ties broken toward the smallest μ.
    pub minima: Vec<Option<(f64, f64)>>,
}

impl SweepProblem<'_> {
    fn n_stages(&self) -> usize {
        match self {
            SweepProblem::Lq { lq, .. } => lq.n_stages,
            SweepProblem::Mv { market } => market.n_stages,
        }
    }

    fn control_dim(&self) -> usize {
        match self {
            SweepProblem::Lq { lq, .. } => lq.m,
            SweepProblem::Mv { market } => market.p0,
        }
    }

    /// The evaluation process used for the tail objective: both benchmark
    /// kinds judge the stage-wise copy (at zero intensity this reduces the
    /// evaluated value to the time-consistent one, which pins the reading).
    fn tail_dynamics(&self) -> TailDynamics {
        TailDynamics::Stagewise
    }

    /// Solve the embedded game at intensity `mu` and return everything the
    /// evaluators need: the solution, the underlying LQ encoding, and the
    /// linear terminal weight (if any).
    fn solve(
        &self,
        mu: f64,
        psi: &Mat,
        literal: bool,
        bracket: LeftBracket,
        tol: &Tolerances,
    ) -> Result<(SelfCoordinationSolution, LQProblem, Option<Vecf>)> {
        let nn = self.n_stages();
        let pun = Punishment {
            mus: vec![mu; nn],
            psis: vec![psi.clone(); nn],
            literal_coupling: literal,
        };
        match self {
            SweepProblem::Lq { lq, x0 } => {
                let scs = fictitious::self_coordination_oriented(lq, &pun, 0, x0, tol, bracket)?;
                Ok((scs, (*lq).clone(), None))
            }
            SweepProblem::Mv { market } => {
                let game = meanvar::build_mv(market, &pun)?;
                let z0 = Vecf::from_element(2, market.initial_wealth);
                let scs = fictitious::solve_game_oriented(game, 0, &z0, tol, bracket)?;
                let lq = meanvar::mv_lq(market)?;
                let term_lin = Vecf::from_element(1, -market.lambda / 2.0);
                Ok((scs, lq, Some(term_lin)))
            }
        }
    }
}

/// Sweep the punishment intensity over `grid`, evaluating the stage-wise
/// expected tail objective at every requested stage, and attach the
/// precommitted and time-consistent baselines (both read off the zero-
/// intensity solution). Rows are computed in parallel; per-μ failures are
/// recorded in the row and excluded from the minima.
pub fn sweep(problem: &SweepProblem, opts: &SweepOptions) -> Result<SweepResult> {
    let nn = problem.n_stages();
    let mc = problem.control_dim();
    for &k in &opts.ks {
        if k >= nn {
            return Err(Error::IndexOutOfRange(format!(
                "sweep stage {k} out of range for horizon {nn}"
            )));
        }
    }
    let psi = opts
        .psi
        .clone()
        .unwrap_or_else(|| Mat::identity(mc, mc));
    if psi.shape() != (mc, mc) {
        return Err(Error::InvalidProblem(format!(
            "punishment direction has shape {:?}, expected ({mc}, {mc})",
            psi.shape()
        )));
    }
    let mut grid = opts.grid.clone();
    if grid.iter().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(Error::InvalidProblem(
            "sweep grid must contain finite nonnegative intensities".to_string(),
        ));
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::InvalidProblem("sweep grid is empty".to_string()));
    }

    let eval_row = |mu: f64| -> SweepRow {
        match problem.solve(mu, &psi, opts.literal_coupling, opts.bracket, &opts.tol) {
            Err(e) => SweepRow {
                mu,
                values: vec![None; opts.ks.len()],
                error: Some(e.to_string()),
            },
            Ok((scs, lq, term_lin)) => {
                let mut values = Vec::with_capacity(opts.ks.len());
                let mut error = None;
                for &k in &opts.ks {
                    match expected_tail_cost(&lq, &scs, k, problem.tail_dynamics(), term_lin.as_ref())
                    {
                        Ok(v) => values.push(Some(v)),
                        Err(e) => {
                            values.push(None);
                            if error.is_none() {
                                error = Some(e.to_string());
                            }
                        }
                    }
                }
                SweepRow { mu, values, error }
            }
        }
    };

    // Baselines come from the zero-intensity solution, whether or not zero
    // is on the grid.
    let row0 = eval_row(0.0);
    if let Some(e) = &row0.error {
        return Err(Error::InvalidProblem(format!(
            "baseline solve at zero intensity failed: {e}"
        )));
    }
    let timeconsistent: Vec<f64> = row0.values.iter().map(|v| v.unwrap()).collect();
    let (scs0, lq0, term_lin0) =
        problem.solve(0.0, &psi, opts.literal_coupling, opts.bracket, &opts.tol)?;
    let precommit: Vec<f64> = opts
        .ks
        .iter()
        .map(|&k| precommit_baseline(&lq0, &scs0, k, term_lin0.as_ref()))
        .collect::<Result<_>>()?;

    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&mu| if mu == 0.0 { row0.clone() } else { eval_row(mu) })
        .collect();

    let minima = (0..opts.ks.len())
        .map(|ki| {
            let mut best: Option<(f64, f64)> = None;
            for row in &rows {
                if let Some(v) = row.values[ki] {
                    if best.map_or(true, |(_, bv)| v < bv) {
                        best = Some((row.mu, v));
                    }
                }
            }
            best
        })
        .collect();

    Ok(SweepResult {
        ks: opts.ks.clone(),
        rows,
        precommit,
        timeconsistent,
        minima,
    })
}

/// The benchmark sweep grid: the union of the three lattices
/// `{l·10⁻⁵} ∪ {l·10⁻³} ∪ {l}` for `l = 0..=100000`, sorted and
/// deduplicated, optionally truncated at `cap` (inclusive).
pub fn standard_grid(cap: Option<f64>) -> Vec<f64> {
    let mut g = Vec::with_capacity(300_003);
    for &step in &[1e-5, 1e-3, 1.0] {
        let l_max = match cap {
            Some(c) => ((c / step).floor() as usize).min(100_000),
            None => 100_000,
        };
        for l in 0..=l_max {
            g.push(l as f64 * step);
        }
    }
    g.sort_by(|a, b| a.partial_cmp(b).unwrap());
    g.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    g
}

/// Format with 17 significant digits (round-trip exact for 64-bit floats).
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Long-form CSV: one line per `(μ, stage, policy)` with the evaluated
/// value; baseline policies are constant in μ and written once with `mu = 0`.
pub fn sweep_csv(r: &SweepResult) -> String {
    let mut out = String::from("mu,k,policy,value\n");
    for row in &r.rows {
        for (ki, &k) in r.ks.iter().enumerate() {
            if let Some(v) = row.values[ki] {
                out.push_str(&format!("{},{},selfcoord,{}\n", fmt17(row.mu), k, fmt17(v)));
            }
        }
    }
    for (ki, &k) in r.ks.iter().enumerate() {
        out.push_str(&format!(
            "{},{},precommit,{}\n",
            fmt17(0.0),
            k,
            fmt17(r.precommit[ki])
        ));
        out.push_str(&format!(
            "{},{},timeconsistent,{}\n",
            fmt17(0.0),
            k,
            fmt17(r.timeconsistent[ki])
        ));
    }
    out
}

/// Summary CSV: per stage, the minimizing intensity and value plus both
/// baselines; failed stages leave the minimum columns empty.
pub fn summary_csv(r: &SweepResult) -> String {
    let mut out = String::from("k,argmin_mu,min_value,precommit,timeconsistent\n");
    for (ki, &k) in r.ks.iter().enumerate() {
        let (amu, amin) = match r.minima[ki] {
            Some((mu, v)) => (fmt17(mu), fmt17(v)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            k,
            amu,
            amin,
            fmt17(r.precommit[ki]),
            fmt17(r.timeconsistent[ki])
        ));
    }
    out
}

#[cfg(test)]
mod tree_tests {
    use super::*;
    use crate::model::SamplerKind;
    use crate::numkit::mat;

    fn corr_noise() -> NoiseSpec {
        NoiseSpec {
            p: 2,
            deltas: vec![mat(&[&[1.0, 0.3], &[0.3, 0.5]]); 3],
            sampler_kind: SamplerKind::TwoPointProduct,
        }
    }

    #[test]
    fn branch_moments_match_noise_spec_exactly() {
        let tree = ScenarioTree::two_point(&corr_noise(), 0, 3);
        for s in 0..3 {
            let nb = tree.n_branches(s);
            assert_eq!(nb, 4);
            let mut mean = Vecf::zeros(2);
            let mut smom = mat(&[&[0.0, 0.0], &[0.0, 0.0]]);
            for b in 0..nb {
                let w = &tree.branch_w[s][b];
                let p = tree.branch_prob[s][b];
                mean += p * w;
                smom += p * w * w.transpose();
            }
            assert!(mean.norm() < 1e-14, "branch mean must vanish");
            assert!(
                (smom - mat(&[&[1.0, 0.3], &[0.3, 0.5]])).norm() < 1e-13,
                "branch second moment must equal the specified covariance"
            );
        }
    }

    #[test]
    fn path_probabilities_sum_to_one_and_match_products() {
        let tree = ScenarioTree::two_point(&corr_noise(), 1, 3);
        assert_eq!(tree.depth, 2);
        let leaves = tree.nodes_at(2);
        assert_eq!(leaves, 16);
        let total: f64 = (0..leaves).map(|m| tree.path_prob(2, m)).sum();
        assert!((total - 1.0).abs() < 1e-14);
        assert!((tree.path_prob(2, 7) - 1.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn conditional_folds_agree_with_direct_averages() {
        let tree = ScenarioTree::two_point(&corr_noise(), 0, 2);
        let leaves = tree.nodes_at(2);
        let vals: Vec<f64> = (0..leaves).map(|m| (m * m) as f64 + 0.5).collect();
        let direct: f64 = (0..leaves).map(|m| tree.path_prob(2, m) * vals[m]).sum();
        assert!((tree.expect(2, &vals) - direct).abs() < 1e-12);
        // Tower property: conditioning to level 1 and then to the root
        // matches the one-shot expectation.
        let level1 = tree.cond_to(2, &vals, 1);
        assert!((tree.expect(1, &level1) - direct).abs() < 1e-12);
    }

    #[test]
    fn ancestors_are_consistent_with_parents() {
        let tree = ScenarioTree::two_point(&corr_noise(), 0, 3);
        let m = 37; // some node at level 3
        assert_eq!(tree.ancestor(3, m, 2), tree.parent(3, m));
        assert_eq!(tree.ancestor(3, m, 0), 0);
        assert_eq!(
            tree.ancestor(3, m, 1),
            tree.parent(2, tree.parent(3, m))
        );
    }
}
