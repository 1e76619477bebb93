//! Equilibrium law synthesis and scenario-tree verification.
//!
//! The backward pass yields per-stage gains; [`synthesize_law`] turns them
//! into an explicit affine law `(u; v)_k = Kdev_k (X_k - xbar_k) + Kmean_k
//! xbar_k + c_k` together with the deterministic mean path `xbar`. The rest
//! of the module verifies, on an exact scenario tree, that this law really is
//! an equilibrium: [`solve_on_tree`] reconstructs both adjoint processes
//! node by node from their defining backward equations,
//! [`stationarity_residual`] evaluates the two first-order conditions, and
//! [`verify_equilibrium_inequalities`] perturbs each player's control with
//! random adapted directions and checks the exact quadratic expansion of the
//! cost differences (zero first-order term, nonnegative second-order term).

use crate::evaluate::ScenarioTree;
use crate::model::{GLQProblem, PlayerCost};
use crate::numkit::{self, Mat, Tolerances, Vecf};
use crate::riccati::{ConvexityBundle, RiccatiBundle};
use crate::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Affine equilibrium law for stages `t..n_stages`, acting on the stacked
/// control `(u; v)`.
#[derive(Debug, Clone)]
pub struct EquilibriumLaw {
    pub t: usize,
    pub n_stages: usize,
    /// Deviation gain per stage, `(m1 + m2) x n`.
    pub k_dev: Vec<Mat>,
    /// Mean gain per stage.
    pub k_mean: Vec<Mat>,
    /// Affine offset per stage.
    pub c_off: Vec<Vecf>,
    /// Deterministic mean state path `xbar_k`, `k` in `t..=n_stages`.
    pub mean_path: Vec<Vecf>,
    /// Mean stacked control `Kmean xbar + c` per stage.
    pub mean_ctrl: Vec<Vecf>,
}

impl EquilibriumLaw {
    /// Stacked control `(u; v)` at stage `k` for state `x`.
    pub fn control(&self, k: usize, x: &Vecf) -> Vecf {
        let i = k - self.t;
        &self.k_dev[i] * (x - &self.mean_path[i]) + &self.mean_ctrl[i]
    }
}

/// Build the equilibrium law from the backward-pass gains and the initial
/// state `y`, propagating the mean path forward through the drift.
pub fn synthesize_law(problem: &GLQProblem, r: &RiccatiBundle, y: &Vecf) -> Result<EquilibriumLaw> {
    let d = &problem.dynamics;
    if y.len() != d.n_state {
        return Err(Error::InvalidProblem(format!(
            "initial state has dimension {}, expected {}",
            y.len(),
            d.n_state
        )));
    }
    let t = r.t;
    let nn = r.n_stages;
    let mut mean_path = Vec::with_capacity(nn - t + 1);
    let mut mean_ctrl = Vec::with_capacity(nn - t);
    let mut k_dev = Vec::with_capacity(nn - t);
    let mut k_mean = Vec::with_capacity(nn - t);
    let mut c_off = Vec::with_capacity(nn - t);
    mean_path.push(y.clone());
    for k in t..nn {
        let st = r.stage(k);
        let xbar = mean_path.last().unwrap().clone();
        let ubar = &st.k_mean * &xbar + &st.c_off;
        let (m1, m2) = (d.m1, d.m2);
        let next = &d.a[k] * &xbar
            + &d.b1[k] * ubar.rows(0, m1)
            + &d.b2[k] * ubar.rows(m1, m2);
        mean_path.push(next);
        mean_ctrl.push(ubar);
        k_dev.push(st.k_dev.clone());
        k_mean.push(st.k_mean.clone());
        c_off.push(st.c_off.clone());
    }
    Ok(EquilibriumLaw {
        t,
        n_stages: nn,
        k_dev,
        k_mean,
        c_off,
        mean_path,
        mean_ctrl,
    })
}

/// One dynamics step under noise realization `w`.
fn step(problem: &GLQProblem, k: usize, x: &Vecf, u: &Vecf, v: &Vecf, w: &Vecf) -> Vecf {
    let d = &problem.dynamics;
    let mut next = &d.a[k] * x + &d.b1[k] * u + &d.b2[k] * v;
    for i in 0..problem.noise.p {
        if w[i] != 0.0 {
            next += w[i] * (&d.c[k][i] * x + &d.d1[k][i] * u + &d.d2[k][i] * v);
        }
    }
    next
}

/// States and controls of the closed-loop system on the tree.
struct ForwardPath {
    x: Vec<Vec<Vecf>>,
    u: Vec<Vec<Vecf>>,
    v: Vec<Vec<Vecf>>,
}

fn forward_under_law(
    problem: &GLQProblem,
    law: &EquilibriumLaw,
    tree: &ScenarioTree,
) -> ForwardPath {
    let (m1, m2) = (problem.dynamics.m1, problem.dynamics.m2);
    let mut x: Vec<Vec<Vecf>> = vec![vec![law.mean_path[0].clone()]];
    let mut u = Vec::with_capacity(tree.depth);
    let mut v = Vec::with_capacity(tree.depth);
    for s in 0..tree.depth {
        let k = tree.t + s;
        let nb = tree.n_branches(s);
        let mut us = Vec::with_capacity(x[s].len());
        let mut vs = Vec::with_capacity(x[s].len());
        let mut next = Vec::with_capacity(x[s].len() * nb);
        for m in 0..x[s].len() {
            let ctrl = law.control(k, &x[s][m]);
            let uk = Vecf::from(ctrl.rows(0, m1));
            let vk = Vecf::from(ctrl.rows(m1, m2));
            for b in 0..nb {
                next.push(step(problem, k, &x[s][m], &uk, &vk, &tree.branch_w[s][b]));
            }
            us.push(uk);
            vs.push(vk);
        }
        u.push(us);
        v.push(vs);
        x.push(next);
    }
    ForwardPath { x, u, v }
}

/// Re-propagate states for given node controls, starting from the states at
/// level `s0` of a reference path (levels `<= s0` are copied).
pub fn forward_with_controls(
    problem: &GLQProblem,
    tree: &ScenarioTree,
    x_ref: &[Vec<Vecf>],
    u: &[Vec<Vecf>],
    v: &[Vec<Vecf>],
    s0: usize,
) -> Vec<Vec<Vecf>> {
    let mut x: Vec<Vec<Vecf>> = x_ref[..=s0].to_vec();
    for s in s0..tree.depth {
        let k = tree.t + s;
        let nb = tree.n_branches(s);
        let mut next = Vec::with_capacity(x[s].len() * nb);
        for m in 0..x[s].len() {
            for b in 0..nb {
                next.push(step(
                    problem,
                    k,
                    &x[s][m],
                    &u[s][m],
                    &v[s][m],
                    &tree.branch_w[s][b],
                ));
            }
        }
        x.push(next);
    }
    x
}

/// Node-wise solution of the stationarity system on a scenario tree.
///
/// `y_adj[s]` holds player 1's adjoint at level `s` (epoch `t + s`);
/// `z_adj[k - t][l - k]` holds player 2's stage-`k` adjoint at epoch `l`,
/// indexed by nodes at level `l - t`.
#[derive(Debug, Clone)]
pub struct TreeSolution {
    pub t: usize,
    pub n_stages: usize,
    pub x: Vec<Vec<Vecf>>,
    pub u: Vec<Vec<Vecf>>,
    pub v: Vec<Vec<Vecf>>,
    pub y_adj: Vec<Vec<Vecf>>,
    pub z_adj: Vec<Vec<Vec<Vecf>>>,
}

/// Run the closed loop forward and reconstruct both adjoint processes from
/// their defining backward equations, node by node.
pub fn solve_on_tree(
    problem: &GLQProblem,
    law: &EquilibriumLaw,
    tree: &ScenarioTree,
) -> Result<TreeSolution> {
    let t = law.t;
    let nn = law.n_stages;
    if tree.t != t || tree.depth != nn - t {
        return Err(Error::InvalidProblem(format!(
            "tree covers stages {}..{}, law covers {}..{}",
            tree.t,
            tree.t + tree.depth,
            t,
            nn
        )));
    }
    let path = forward_under_law(problem, law, tree);
    let (x, u, v) = (path.x, path.u, path.v);
    let (y_adj, z_adj) = tree_adjoints(problem, tree, &x, &u, &v)?;
    Ok(TreeSolution {
        t,
        n_stages: nn,
        x,
        u,
        v,
        y_adj,
        z_adj,
    })
}

/// Reconstruct both adjoint processes from their defining backward equations
/// for arbitrary node-indexed states and controls on the tree.
#[allow(clippy::type_complexity)]
pub fn tree_adjoints(
    problem: &GLQProblem,
    tree: &ScenarioTree,
    x: &[Vec<Vecf>],
    u: &[Vec<Vecf>],
    v: &[Vec<Vecf>],
) -> Result<(Vec<Vec<Vecf>>, Vec<Vec<Vec<Vecf>>>)> {
    let t = tree.t;
    let nn = t + tree.depth;
    let d = &problem.dynamics;

    // Player 1's adjoint, backward from the terminal condition.
    let term1 = problem.cost1.terminal(t)?;
    let ex_n = tree.expect(tree.depth, &x[tree.depth]);
    let mut y_adj: Vec<Vec<Vecf>> = vec![Vec::new(); tree.depth + 1];
    y_adj[tree.depth] = x[tree.depth]
        .iter()
        .map(|xn| &term1.g * xn + &term1.g_bar * &ex_n + &term1.g_lin)
        .collect();
    for k in (t..nn).rev() {
        let s = k - t;
        let w1 = problem.cost1.stage(t, k)?;
        let ey = tree.cond_step(s, &y_adj[s + 1]);
        let eyw: Vec<Vec<Vecf>> = (0..tree.p)
            .map(|i| tree.cond_step_weighted(s, &y_adj[s + 1], i))
            .collect();
        let ex = tree.expect(s, &x[s]);
        let eu = tree.expect(s, &u[s]);
        let ev = tree.expect(s, &v[s]);
        y_adj[s] = (0..x[s].len())
            .map(|m| {
                let mut val = &w1.q * &x[s][m]
                    + &w1.q_bar * &ex
                    + w1.s1.transpose() * &u[s][m]
                    + w1.s1_bar.transpose() * &eu
                    + w1.s2.transpose() * &v[s][m]
                    + w1.s2_bar.transpose() * &ev
                    + d.a[k].transpose() * &ey[m]
                    + &w1.q_lin;
                for i in 0..tree.p {
                    val += d.c[k][i].transpose() * &eyw[i][m];
                }
                val
            })
            .collect();
    }

    // Player 2's adjoint family: one backward pass per stage k, with drift
    // conditioning at the running epoch and mean conditioning at epoch k.
    let mut z_adj: Vec<Vec<Vec<Vecf>>> = Vec::with_capacity(nn - t);
    for k in t..nn {
        let sk = k - t;
        let term2 = problem.cost2.terminal(k)?;
        let mut rows: Vec<Vec<Vecf>> = vec![Vec::new(); nn - k + 1];
        let cond_xn = tree.cond_to(tree.depth, &x[tree.depth], sk);
        rows[nn - k] = x[tree.depth]
            .iter()
            .enumerate()
            .map(|(m, xn)| {
                let anc = tree.ancestor(tree.depth, m, sk);
                &term2.g * xn + &term2.g_bar * &cond_xn[anc] + &term2.g_lin
            })
            .collect();
        for l in (k..nn).rev() {
            let sl = l - t;
            let w2 = problem.cost2.stage(k, l)?;
            let ez = tree.cond_step(sl, &rows[l - k + 1]);
            let ezw: Vec<Vec<Vecf>> = (0..tree.p)
                .map(|i| tree.cond_step_weighted(sl, &rows[l - k + 1], i))
                .collect();
            let cond_x = tree.cond_to(sl, &x[sl], sk);
            let cond_u = tree.cond_to(sl, &u[sl], sk);
            let cond_v = tree.cond_to(sl, &v[sl], sk);
            rows[l - k] = (0..x[sl].len())
                .map(|m| {
                    let anc = tree.ancestor(sl, m, sk);
                    let mut val = &w2.q * &x[sl][m]
                        + &w2.q_bar * &cond_x[anc]
                        + w2.s1.transpose() * &u[sl][m]
                        + w2.s1_bar.transpose() * &cond_u[anc]
                        + w2.s2.transpose() * &v[sl][m]
                        + w2.s2_bar.transpose() * &cond_v[anc]
                        + d.a[l].transpose() * &ez[m]
                        + &w2.q_lin;
                    for i in 0..tree.p {
                        val += d.c[l][i].transpose() * &ezw[i][m];
                    }
                    val
                })
                .collect();
        }
        z_adj.push(rows);
    }

    Ok((y_adj, z_adj))
}

/// Max-norm residual of the two stationarity conditions at each stage.
///
/// Stage `k` of the returned vector is the maximum over tree nodes of the
/// norms of player 1's first-order condition (plain and barred weights,
/// adjoint `Y`) and player 2's diagonal first-order condition (script
/// weights, adjoint `Z^k`).
pub fn stationarity_residual(
    problem: &GLQProblem,
    ts: &TreeSolution,
    tree: &ScenarioTree,
) -> Result<Vec<f64>> {
    let terms = stationarity_terms(problem, tree, &ts.x, &ts.u, &ts.v, &ts.y_adj, &ts.z_adj)?;
    Ok(terms
        .iter()
        .map(|nodes| {
            nodes
                .iter()
                .map(|(r1, r2)| r1.norm().max(r2.norm()))
                .fold(0.0f64, f64::max)
        })
        .collect())
}

/// The two first-order-condition vectors at every `(stage, node)` pair:
/// player 1's condition (plain and barred weights, adjoint `Y`) and player
/// 2's diagonal condition (script weights, adjoint `Z^k`). Both vanish
/// exactly at an equilibrium.
#[allow(clippy::type_complexity)]
pub fn stationarity_terms(
    problem: &GLQProblem,
    tree: &ScenarioTree,
    x: &[Vec<Vecf>],
    u: &[Vec<Vecf>],
    v: &[Vec<Vecf>],
    y_adj: &[Vec<Vecf>],
    z_adj: &[Vec<Vec<Vecf>>],
) -> Result<Vec<Vec<(Vecf, Vecf)>>> {
    let d = &problem.dynamics;
    let t = tree.t;
    let nn = t + tree.depth;
    let mut out = Vec::with_capacity(nn - t);
    for k in t..nn {
        let s = k - t;
        let w1 = problem.cost1.stage(t, k)?;
        let w2 = problem.cost2.stage(k, k)?;
        let ey = tree.cond_step(s, &y_adj[s + 1]);
        let eyw: Vec<Vec<Vecf>> = (0..tree.p)
            .map(|i| tree.cond_step_weighted(s, &y_adj[s + 1], i))
            .collect();
        let zk = &z_adj[k - t];
        let ez = tree.cond_step(s, &zk[1]);
        let ezw: Vec<Vec<Vecf>> = (0..tree.p)
            .map(|i| tree.cond_step_weighted(s, &zk[1], i))
            .collect();
        let ex = tree.expect(s, &x[s]);
        let eu = tree.expect(s, &u[s]);
        let ev = tree.expect(s, &v[s]);
        let mut nodes = Vec::with_capacity(x[s].len());
        for m in 0..x[s].len() {
            let mut res1 = &w1.s1 * &x[s][m]
                + &w1.s1_bar * &ex
                + &w1.r11 * &u[s][m]
                + &w1.r11_bar * &eu
                + &w1.r12 * &v[s][m]
                + &w1.r12_bar * &ev
                + d.b1[k].transpose() * &ey[m]
                + &w1.rho1;
            for i in 0..tree.p {
                res1 += d.d1[k][i].transpose() * &eyw[i][m];
            }
            // At the diagonal the control equals its own conditional mean,
            // so the script (plain + barred) weights apply throughout.
            let mut res2 = (&w2.s2 + &w2.s2_bar) * &x[s][m]
                + (&w2.r12 + &w2.r12_bar).transpose() * &u[s][m]
                + (&w2.r22 + &w2.r22_bar) * &v[s][m]
                + d.b2[k].transpose() * &ez[m]
                + &w2.rho2;
            for i in 0..tree.p {
                res2 += d.d2[k][i].transpose() * &ezw[i][m];
            }
            nodes.push((res1, res2));
        }
        out.push(nodes);
    }
    Ok(out)
}

/// Maximum deviation between the node-wise adjoints and their closed forms
/// in terms of the backward-recursion matrices:
/// `Y_k = P (X - E_t X) + Pm E_t X + sigma` and
/// `Z^k_l = T (X - E_k X) + Tm E_k X + Tx E_t X + xi`.
pub fn adjoint_closed_form_residual(
    r: &RiccatiBundle,
    ts: &TreeSolution,
    tree: &ScenarioTree,
) -> f64 {
    let t = ts.t;
    let mut worst: f64 = 0.0;
    for k in t..=ts.n_stages {
        let s = k - t;
        let ex = tree.expect(s, &ts.x[s]);
        for m in 0..ts.x[s].len() {
            let cf = r.p_at(k) * (&ts.x[s][m] - &ex) + r.pm_at(k) * &ex + r.sigma_at(k);
            worst = worst.max((&ts.y_adj[s][m] - cf).norm());
        }
    }
    for k in t..ts.n_stages {
        let sk = k - t;
        for l in k..=ts.n_stages {
            let sl = l - t;
            let cond_x = tree.cond_to(sl, &ts.x[sl], sk);
            let ex = tree.expect(sl, &ts.x[sl]);
            for m in 0..ts.x[sl].len() {
                let anc = tree.ancestor(sl, m, sk);
                let cf = r.t_at(k, l) * (&ts.x[sl][m] - &cond_x[anc])
                    + r.tm_at(k, l) * &cond_x[anc]
                    + r.tx_at(k, l) * &ex
                    + r.xi_at(k, l);
                worst = worst.max((&ts.z_adj[k - t][l - k][m] - cf).norm());
            }
        }
    }
    worst
}

/// Evaluate one player's full quadratic cost on the tree, conditionally on
/// the node `root` at stage `eval_k`: running weights are read at
/// `(eval_k, l)` and all barred terms condition on stage `eval_k`.
pub fn game_cost(
    problem: &GLQProblem,
    cost: &PlayerCost,
    tree: &ScenarioTree,
    x: &[Vec<Vecf>],
    u: &[Vec<Vecf>],
    v: &[Vec<Vecf>],
    eval_k: usize,
    root: usize,
) -> Result<f64> {
    let _ = problem;
    let t = tree.t;
    let nn = t + tree.depth;
    let s0 = eval_k - t;
    let mut total = 0.0;
    for l in eval_k..nn {
        let sl = l - t;
        let w = cost.stage(eval_k, l)?;
        let cx = tree.cond_to(sl, &x[sl], s0)[root].clone();
        let cu = tree.cond_to(sl, &u[sl], s0)[root].clone();
        let cv = tree.cond_to(sl, &v[sl], s0)[root].clone();
        let quads: Vec<f64> = (0..x[sl].len())
            .map(|m| {
                let (xm, um, vm) = (&x[sl][m], &u[sl][m], &v[sl][m]);
                (xm.transpose() * &w.q * xm)[(0, 0)]
                    + 2.0 * (um.transpose() * &w.s1 * xm)[(0, 0)]
                    + 2.0 * (vm.transpose() * &w.s2 * xm)[(0, 0)]
                    + (um.transpose() * &w.r11 * um)[(0, 0)]
                    + 2.0 * (um.transpose() * &w.r12 * vm)[(0, 0)]
                    + (vm.transpose() * &w.r22 * vm)[(0, 0)]
                    + 2.0 * w.q_lin.dot(xm)
                    + 2.0 * w.rho1.dot(um)
                    + 2.0 * w.rho2.dot(vm)
            })
            .collect();
        total += tree.cond_to(sl, &quads, s0)[root];
        total += (cx.transpose() * &w.q_bar * &cx)[(0, 0)]
            + 2.0 * (cu.transpose() * &w.s1_bar * &cx)[(0, 0)]
            + 2.0 * (cv.transpose() * &w.s2_bar * &cx)[(0, 0)]
            + (cu.transpose() * &w.r11_bar * &cu)[(0, 0)]
            + 2.0 * (cu.transpose() * &w.r12_bar * &cv)[(0, 0)]
            + (cv.transpose() * &w.r22_bar * &cv)[(0, 0)];
    }
    let term = cost.terminal(eval_k)?;
    let sd = tree.depth;
    let cxn = tree.cond_to(sd, &x[sd], s0)[root].clone();
    let quads: Vec<f64> = x[sd]
        .iter()
        .map(|xn| (xn.transpose() * &term.g * xn)[(0, 0)])
        .collect();
    total += tree.cond_to(sd, &quads, s0)[root]
        + (cxn.transpose() * &term.g_bar * &cxn)[(0, 0)]
        + 2.0 * term.g_lin.dot(&cxn);
    Ok(total)
}

/// Player 1's second-order perturbation functional for state perturbation
/// `alpha` and control direction `du` (only player 1's own weight blocks
/// enter).
pub fn jtilde1(
    problem: &GLQProblem,
    tree: &ScenarioTree,
    alpha: &[Vec<Vecf>],
    du: &[Vec<Vecf>],
) -> Result<f64> {
    let t = tree.t;
    let nn = t + tree.depth;
    let mut total = 0.0;
    for k in t..nn {
        let s = k - t;
        let w = problem.cost1.stage(t, k)?;
        let ea = tree.expect(s, &alpha[s]);
        let ed = tree.expect(s, &du[s]);
        let quads: Vec<f64> = (0..alpha[s].len())
            .map(|m| {
                let (am, dm) = (&alpha[s][m], &du[s][m]);
                (am.transpose() * &w.q * am)[(0, 0)]
                    + 2.0 * (dm.transpose() * &w.s1 * am)[(0, 0)]
                    + (dm.transpose() * &w.r11 * dm)[(0, 0)]
            })
            .collect();
        total += tree.expect(s, &quads);
        total += (ea.transpose() * &w.q_bar * &ea)[(0, 0)]
            + 2.0 * (ed.transpose() * &w.s1_bar * &ea)[(0, 0)]
            + (ed.transpose() * &w.r11_bar * &ed)[(0, 0)];
    }
    let term = problem.cost1.terminal(t)?;
    let sd = tree.depth;
    let ea = tree.expect(sd, &alpha[sd]);
    let quads: Vec<f64> = alpha[sd]
        .iter()
        .map(|a| (a.transpose() * &term.g * a)[(0, 0)])
        .collect();
    total += tree.expect(sd, &quads) + (ea.transpose() * &term.g_bar * &ea)[(0, 0)];
    Ok(total)
}

/// The same functional written as a completed square in the convexity
/// blocks; agrees with [`jtilde1`] whenever the convexity range conditions
/// hold.
pub fn jtilde1_completed_square(
    conv: &ConvexityBundle,
    tree: &ScenarioTree,
    alpha: &[Vec<Vecf>],
    du: &[Vec<Vecf>],
    tol: &Tolerances,
) -> f64 {
    let t = conv.t;
    let nn = conv.n_stages;
    let mut total = 0.0;
    for k in t..nn {
        let s = k - t;
        let i = k - t;
        let o_pinv = numkit::pinv(&conv.o_blk[i], tol);
        let om_pinv = numkit::pinv(&conv.om_blk[i], tol);
        let ea = tree.expect(s, &alpha[s]);
        let ed = tree.expect(s, &du[s]);
        let quads: Vec<f64> = (0..alpha[s].len())
            .map(|m| {
                let a = &alpha[s][m] - &ea;
                let u = &du[s][m] - &ed;
                let ma = &conv.m_blk[i] * &a;
                (ma.transpose() * &o_pinv * &ma)[(0, 0)]
                    + 2.0 * u.dot(&ma)
                    + (u.transpose() * &conv.o_blk[i] * &u)[(0, 0)]
            })
            .collect();
        total += tree.expect(s, &quads);
        let mea = &conv.mm_blk[i] * &ea;
        total += (mea.transpose() * &om_pinv * &mea)[(0, 0)]
            + 2.0 * ed.dot(&mea)
            + (ed.transpose() * &conv.om_blk[i] * &ed)[(0, 0)];
    }
    total
}

/// Results of the random-direction equilibrium verification.
#[derive(Debug, Clone)]
pub struct InequalityReport {
    /// Largest first-order term (should vanish) and smallest second-order
    /// term (should be nonnegative) seen for player 1, both relative to the
    /// cost scale.
    pub max_first_order_1: f64,
    pub min_second_order_1: f64,
    /// Worst mismatch between the direct second-order functional and its
    /// completed-square form.
    pub max_square_mismatch_1: f64,
    /// Same quantities for player 2, node-wise across all stages.
    pub max_first_order_2: f64,
    pub min_second_order_2: f64,
    /// Worst mismatch between player 2's second-order functional and the
    /// single-stage quadratic in its control weight block.
    pub max_quad_mismatch_2: f64,
}

impl InequalityReport {
    pub fn passes(&self, slack: f64) -> bool {
        self.max_first_order_1 <= slack
            && self.min_second_order_1 >= -slack
            && self.max_square_mismatch_1 <= slack
            && self.max_first_order_2 <= slack
            && self.min_second_order_2 >= -slack
            && self.max_quad_mismatch_2 <= slack
    }
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vecf {
    Vecf::from_fn(dim, |_, _| rng.random_range(-1.0..1.0))
}

/// Verify both equilibrium inequalities with `n_trials` random adapted
/// perturbation directions per player, using the exact quadratic expansion
/// of the cost difference (unit step size): the expansion
/// `J(perturbed) - J(equilibrium) = 2 * first_order + second_order` is
/// solved for the first-order term, which must vanish at an equilibrium,
/// while the second-order term must be nonnegative.
pub fn verify_equilibrium_inequalities(
    problem: &GLQProblem,
    law: &EquilibriumLaw,
    tree: &ScenarioTree,
    conv: &ConvexityBundle,
    n_trials: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<InequalityReport> {
    let d = &problem.dynamics;
    let t = law.t;
    let nn = law.n_stages;
    let path = forward_under_law(problem, law, tree);
    let base_cost1 = game_cost(
        problem,
        &problem.cost1,
        tree,
        &path.x,
        &path.u,
        &path.v,
        t,
        0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut report = InequalityReport {
        max_first_order_1: 0.0,
        min_second_order_1: f64::INFINITY,
        max_square_mismatch_1: 0.0,
        max_first_order_2: 0.0,
        min_second_order_2: f64::INFINITY,
        max_quad_mismatch_2: 0.0,
    };
    let scale1 = 1.0 + base_cost1.abs();

    for _ in 0..n_trials {
        // Player 1: adapted whole-horizon direction, fixed opponent process.
        let du: Vec<Vec<Vecf>> = (0..tree.depth)
            .map(|s| {
                (0..tree.nodes_at(s))
                    .map(|_| random_direction(&mut rng, d.m1))
                    .collect()
            })
            .collect();
        let u_pert: Vec<Vec<Vecf>> = (0..tree.depth)
            .map(|s| {
                (0..path.u[s].len())
                    .map(|m| &path.u[s][m] + &du[s][m])
                    .collect()
            })
            .collect();
        let x_pert = forward_with_controls(problem, tree, &path.x, &u_pert, &path.v, 0);
        let alpha: Vec<Vec<Vecf>> = (0..=tree.depth)
            .map(|s| {
                (0..path.x[s].len())
                    .map(|m| &x_pert[s][m] - &path.x[s][m])
                    .collect()
            })
            .collect();
        let pert_cost =
            game_cost(problem, &problem.cost1, tree, &x_pert, &u_pert, &path.v, t, 0)?;
        let jt1 = jtilde1(problem, tree, &alpha, &du)?;
        let fo = (pert_cost - base_cost1 - jt1) / 2.0;
        let cs = jtilde1_completed_square(conv, tree, &alpha, &du, tol);
        report.max_first_order_1 = report.max_first_order_1.max(fo.abs() / scale1);
        report.min_second_order_1 = report.min_second_order_1.min(jt1 / scale1);
        report.max_square_mismatch_1 = report
            .max_square_mismatch_1
            .max((jt1 - cs).abs() / scale1);

        // Player 2: one single-stage direction per stage, checked node-wise
        // (the inequality is conditional on the stage-k information).
        for k in t..nn {
            let sk = k - t;
            let dv: Vec<Vecf> = (0..tree.nodes_at(sk))
                .map(|_| random_direction(&mut rng, d.m2))
                .collect();
            let mut v_pert = path.v.clone();
            for m in 0..v_pert[sk].len() {
                v_pert[sk][m] = &v_pert[sk][m] + &dv[m];
            }
            let x_pert = forward_with_controls(problem, tree, &path.x, &path.u, &v_pert, sk);
            // State perturbation driven by the single-stage direction.
            let beta: Vec<Vec<Vecf>> = (0..=tree.depth)
                .map(|s| {
                    (0..path.x[s].len())
                        .map(|m| &x_pert[s][m] - &path.x[s][m])
                        .collect()
                })
                .collect();
            let w2 = problem.cost2.stage(k, k)?;
            let jt2_all = jtilde2_all_roots(problem, tree, k, &dv, &beta)?;
            for m in 0..tree.nodes_at(sk) {
                let base =
                    game_cost(problem, &problem.cost2, tree, &path.x, &path.u, &path.v, k, m)?;
                let pert =
                    game_cost(problem, &problem.cost2, tree, &x_pert, &path.u, &v_pert, k, m)?;
                let scale2 = 1.0 + base.abs();
                let jt2 = jt2_all[m];
                let fo2 = (pert - base - jt2) / 2.0;
                let quad = (dv[m].transpose()
                    * &conv.obb_blk[sk]
                    * &dv[m])[(0, 0)];
                report.max_first_order_2 = report.max_first_order_2.max(fo2.abs() / scale2);
                report.min_second_order_2 = report.min_second_order_2.min(jt2 / scale2);
                report.max_quad_mismatch_2 =
                    report.max_quad_mismatch_2.max((jt2 - quad).abs() / scale2);
            }
            let _ = w2;
        }
    }
    Ok(report)
}

/// Player 2's second-order functional for a single-stage direction `dv`
/// (indexed by nodes at stage `k`) and the induced state perturbation
/// `beta`, evaluated for every stage-`k` node at once.
fn jtilde2_all_roots(
    problem: &GLQProblem,
    tree: &ScenarioTree,
    k: usize,
    dv: &[Vecf],
    beta: &[Vec<Vecf>],
) -> Result<Vec<f64>> {
    let t = tree.t;
    let nn = t + tree.depth;
    let sk = k - t;
    let w_diag = problem.cost2.stage(k, k)?;
    let mut totals: Vec<f64> = dv
        .iter()
        .map(|v| {
            (v.transpose() * (&w_diag.r22 + &w_diag.r22_bar) * v)[(0, 0)]
        })
        .collect();
    for l in (k + 1)..nn {
        let sl = l - t;
        let w = problem.cost2.stage(k, l)?;
        let quads: Vec<f64> = beta[sl]
            .iter()
            .map(|b| (b.transpose() * &w.q * b)[(0, 0)])
            .collect();
        let cond_quads = tree.cond_to(sl, &quads, sk);
        let cond_beta = tree.cond_to(sl, &beta[sl], sk);
        for m in 0..dv.len() {
            totals[m] += cond_quads[m]
                + (cond_beta[m].transpose() * &w.q_bar * &cond_beta[m])[(0, 0)];
        }
    }
    let term = problem.cost2.terminal(k)?;
    let sd = tree.depth;
    let quads: Vec<f64> = beta[sd]
        .iter()
        .map(|b| (b.transpose() * &term.g * b)[(0, 0)])
        .collect();
    let cond_quads = tree.cond_to(sd, &quads, sk);
    let cond_beta = tree.cond_to(sd, &beta[sd], sk);
    for m in 0..dv.len() {
        totals[m] += cond_quads[m]
            + (cond_beta[m].transpose() * &term.g_bar * &cond_beta[m])[(0, 0)];
    }
    Ok(totals)
}
