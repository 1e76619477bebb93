//! Benchmark problems and random-instance generators shared by unit tests,
//! the acceptance suite, and the CLI's bundled configurations.

use crate::model::{
    CostTable, GLQDynamics, GLQProblem, LQCostTable, LQProblem, LQStageWeights,
    LQTerminalWeights, NoiseSpec, PlayerCost, SamplerKind, StageWeights, TerminalWeights,
};
use crate::numkit::{mat, vecf, Mat};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// One-stage scalar game: `A = B1 = B2 = 1`, no noise, unit running weight on
/// each player's own control, unit terminal state weight for both players.
/// Hand computation gives the equilibrium `u = v = -y/3`.
pub fn one_step_scalar_game() -> GLQProblem {
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

fn rand_in(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Random stationary scalar game (`n = m1 = m2 = p = 1`) with nonzero noise
/// and strictly positive control weights, so most draws are uniquely
/// solvable.
pub fn random_scalar_game(n_stages: usize, seed: u64) -> GLQProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = |v: f64| mat(&[&[v]]);
    let dynamics = GLQDynamics {
        n_stages,
        n_state: 1,
        m1: 1,
        m2: 1,
        a: (0..n_stages).map(|_| sc(rand_in(&mut rng, 0.5, 1.5))).collect(),
        b1: (0..n_stages).map(|_| sc(rand_in(&mut rng, -1.0, 1.0))).collect(),
        b2: (0..n_stages).map(|_| sc(rand_in(&mut rng, -1.0, 1.0))).collect(),
        c: (0..n_stages)
            .map(|_| vec![sc(rand_in(&mut rng, -0.4, 0.4))])
            .collect(),
        d1: (0..n_stages)
            .map(|_| vec![sc(rand_in(&mut rng, -0.5, 0.5))])
            .collect(),
        d2: (0..n_stages)
            .map(|_| vec![sc(rand_in(&mut rng, -0.5, 0.5))])
            .collect(),
    };
    let noise = NoiseSpec {
        p: 1,
        deltas: (0..n_stages).map(|_| sc(rand_in(&mut rng, 0.3, 1.2))).collect(),
        sampler_kind: SamplerKind::TwoPointProduct,
    };
    let mut cost1 = PlayerCost::zeros_stationary(n_stages, 1, 1, 1);
    let mut cost2 = PlayerCost::zeros_stationary(n_stages, 1, 1, 1);
    for k in 0..n_stages {
        {
            let w = cost1.stage_mut(0, k).unwrap();
            w.q[(0, 0)] = rand_in(&mut rng, 0.0, 1.0);
            w.q_bar[(0, 0)] = rand_in(&mut rng, 0.0, 0.5);
            w.r11[(0, 0)] = rand_in(&mut rng, 0.8, 2.0);
            w.r11_bar[(0, 0)] = rand_in(&mut rng, 0.0, 0.5);
            w.r12[(0, 0)] = rand_in(&mut rng, -0.3, 0.3);
            w.s1[(0, 0)] = rand_in(&mut rng, -0.3, 0.3);
            w.q_lin[0] = rand_in(&mut rng, -0.3, 0.3);
            w.rho1[0] = rand_in(&mut rng, -0.3, 0.3);
        }
        {
            let w = cost2.stage_mut(0, k).unwrap();
            w.q[(0, 0)] = rand_in(&mut rng, 0.0, 1.0);
            w.q_bar[(0, 0)] = rand_in(&mut rng, 0.0, 0.5);
            w.r22[(0, 0)] = rand_in(&mut rng, 0.8, 2.0);
            w.r22_bar[(0, 0)] = rand_in(&mut rng, 0.0, 0.5);
            w.r12[(0, 0)] = rand_in(&mut rng, -0.3, 0.3);
            w.s2[(0, 0)] = rand_in(&mut rng, -0.3, 0.3);
            w.q_lin[0] = rand_in(&mut rng, -0.3, 0.3);
            w.rho2[0] = rand_in(&mut rng, -0.3, 0.3);
        }
    }
    {
        let term = cost1.terminal_mut(0).unwrap();
        term.g[(0, 0)] = rand_in(&mut rng, 0.3, 1.5);
        term.g_bar[(0, 0)] = rand_in(&mut rng, 0.0, 0.5);
        term.g_lin[0] = rand_in(&mut rng, -0.3, 0.3);
    }
    {
        let term = cost2.terminal_mut(0).unwrap();
        term.g[(0, 0)] = rand_in(&mut rng, 0.3, 1.5);
        term.g_bar[(0, 0)] = rand_in(&mut rng, 0.0, 0.5);
        term.g_lin[0] = rand_in(&mut rng, -0.3, 0.3);
    }
    GLQProblem {
        dynamics,
        noise,
        cost1,
        cost2,
    }
}

/// Random two-state game with genuinely double-indexed weights for both
/// players (`n = 2`, `m1 = m2 = 1`, `p = 1`). The control weights are kept
/// dominant so that random draws are typically uniquely solvable.
pub fn random_two_state_game(n_stages: usize, seed: u64) -> GLQProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
    let rand_mat = |rng: &mut ChaCha8Rng, nr: usize, nc: usize, s: f64| {
        Mat::from_fn(nr, nc, |_, _| rng.random_range(-s..s))
    };
    let rand_psd = |rng: &mut ChaCha8Rng, n: usize, s: f64| {
        let a = Mat::from_fn(n, n, |_, _| rng.random_range(-s..s));
        &a * a.transpose()
    };
    let dynamics = GLQDynamics {
        n_stages,
        n_state: 2,
        m1: 1,
        m2: 1,
        a: (0..n_stages)
            .map(|_| rand_mat(&mut rng, 2, 2, 0.8) + Mat::identity(2, 2) * 0.5)
            .collect(),
        b1: (0..n_stages).map(|_| rand_mat(&mut rng, 2, 1, 1.0)).collect(),
        b2: (0..n_stages).map(|_| rand_mat(&mut rng, 2, 1, 1.0)).collect(),
        c: (0..n_stages).map(|_| vec![rand_mat(&mut rng, 2, 2, 0.3)]).collect(),
        d1: (0..n_stages).map(|_| vec![rand_mat(&mut rng, 2, 1, 0.4)]).collect(),
        d2: (0..n_stages).map(|_| vec![rand_mat(&mut rng, 2, 1, 0.4)]).collect(),
    };
    let noise = NoiseSpec {
        p: 1,
        deltas: (0..n_stages)
            .map(|_| mat(&[&[rng.random_range(0.3..1.0)]]))
            .collect(),
        sampler_kind: SamplerKind::TwoPointProduct,
    };
    let mut cost1 = PlayerCost::zeros_double(n_stages, 2, 1, 1);
    let mut cost2 = PlayerCost::zeros_double(n_stages, 2, 1, 1);
    for t in 0..n_stages {
        for k in t..n_stages {
            {
                let w = cost1.stage_mut(t, k).unwrap();
                w.q = rand_psd(&mut rng, 2, 0.5);
                w.q_bar = rand_psd(&mut rng, 2, 0.4);
                w.r11[(0, 0)] = rng.random_range(1.0..2.5);
                w.r11_bar[(0, 0)] = rng.random_range(0.0..0.4);
                w.r12[(0, 0)] = rng.random_range(-0.3..0.3);
                w.s1 = rand_mat(&mut rng, 1, 2, 0.3);
                w.s1_bar = rand_mat(&mut rng, 1, 2, 0.2);
                w.q_lin = rand_mat(&mut rng, 2, 1, 0.3).column(0).into();
                w.rho1[0] = rng.random_range(-0.3..0.3);
            }
            {
                let w = cost2.stage_mut(t, k).unwrap();
                w.q = rand_psd(&mut rng, 2, 0.5);
                w.q_bar = rand_psd(&mut rng, 2, 0.4);
                w.r22[(0, 0)] = rng.random_range(1.0..2.5);
                w.r22_bar[(0, 0)] = rng.random_range(0.0..0.4);
                w.r12[(0, 0)] = rng.random_range(-0.3..0.3);
                w.s2 = rand_mat(&mut rng, 1, 2, 0.3);
                w.s2_bar = rand_mat(&mut rng, 1, 2, 0.2);
                w.q_lin = rand_mat(&mut rng, 2, 1, 0.3).column(0).into();
                w.rho2[0] = rng.random_range(-0.3..0.3);
            }
        }
        {
            let term = cost1.terminal_mut(t).unwrap();
            term.g = rand_psd(&mut rng, 2, 0.6);
            term.g_bar = rand_psd(&mut rng, 2, 0.4);
            term.g_lin = rand_mat(&mut rng, 2, 1, 0.3).column(0).into();
        }
        {
            let term = cost2.terminal_mut(t).unwrap();
            term.g = rand_psd(&mut rng, 2, 0.6);
            term.g_bar = rand_psd(&mut rng, 2, 0.4);
            term.g_lin = rand_mat(&mut rng, 2, 1, 0.3).column(0).into();
        }
    }
    GLQProblem {
        dynamics,
        noise,
        cost1,
        cost2,
    }
}

/// The four-period, two-state benchmark: scalar control entering the
/// diffusion, stage-varying weights, scalar unit-variance noise, evaluated
/// from the initial state `(0.5, 0.5)`.
pub fn four_period_lq() -> LQProblem {
    let a0 = vec![
        mat(&[&[1.0, 0.4], &[0.3, 2.0]]),
        mat(&[&[1.102, -0.24], &[0.53, 1.89]]),
        mat(&[&[1.89, 0.49], &[0.0, 1.75]]),
        mat(&[&[0.8, -0.4], &[0.2, 0.7]]),
    ];
    let b0 = vec![
        mat(&[&[1.2], &[-0.5]]),
        mat(&[&[1.0], &[1.0]]),
        mat(&[&[1.2], &[0.2]]),
        mat(&[&[1.0], &[0.3]]),
    ];
    let d0 = vec![
        vec![mat(&[&[1.0], &[0.3]])],
        vec![mat(&[&[1.0], &[0.4]])],
        vec![mat(&[&[0.45], &[0.25]])],
        vec![mat(&[&[0.52], &[0.0]])],
    ];
    let c0 = vec![
        vec![Mat::zeros(2, 2)],
        vec![Mat::zeros(2, 2)],
        vec![Mat::zeros(2, 2)],
        vec![Mat::zeros(2, 2)],
    ];
    let q = [
        mat(&[&[0.55, 0.25], &[0.25, 0.6]]),
        mat(&[&[1.0, -0.325], &[-0.325, 0.5]]),
        mat(&[&[1.25, 0.25], &[0.25, 1.4]]),
        mat(&[&[0.5, 0.0], &[0.0, 0.375]]),
    ];
    let q_bar = [
        mat(&[&[1.0, 0.325], &[0.325, 1.15]]),
        mat(&[&[1.265, 0.175], &[0.175, 0.95]]),
        mat(&[&[1.25, 0.325], &[0.325, 0.9]]),
        mat(&[&[1.0, 0.0], &[0.0, 1.5]]),
    ];
    let r = [1.5, 1.4, 1.6, 2.0];
    let stages = (0..4)
        .map(|k| LQStageWeights {
            q: q[k].clone(),
            q_bar: q_bar[k].clone(),
            r: mat(&[&[r[k]]]),
            r_bar: Mat::zeros(1, 1),
        })
        .collect();
    LQProblem {
        n_stages: 4,
        n_state: 2,
        m: 1,
        a0,
        b0,
        c0,
        d0,
        weights: LQCostTable::Stationary {
            stages,
            terminal: LQTerminalWeights {
                g: mat(&[&[1.0, -0.1], &[-0.1, 1.0]]),
                g_bar: mat(&[&[0.5, 0.0], &[0.0, 0.5]]),
            },
        },
        noise: NoiseSpec {
            p: 1,
            deltas: vec![mat(&[&[1.0]]); 4],
            sampler_kind: SamplerKind::TwoPointProduct,
        },
    }
}

/// Initial state for [`four_period_lq`].
pub fn four_period_initial_state() -> crate::numkit::Vecf {
    vecf(&[0.5, 0.5])
}

/// The four-period, three-asset mean-variance market: riskless return 1.04
/// per period, constant risky-return moments, trade-off weight 1, initial
/// wealth 10.
pub fn three_asset_market() -> crate::meanvar::MarketData {
    crate::meanvar::MarketData {
        n_stages: 4,
        p0: 3,
        s: vec![1.04; 4],
        mean_e: vec![vecf(&[1.162, 1.246, 1.228]); 4],
        cov_e: vec![
            mat(&[
                &[0.0146, 0.0187, 0.0145],
                &[0.0187, 0.0854, 0.0104],
                &[0.0145, 0.0104, 0.0289],
            ]);
            4
        ],
        lambda: 1.0,
        initial_wealth: 10.0,
    }
}

/// Convert the stationary weight tables of a problem into an equivalent
/// double-indexed encoding (used to test that both storages solve alike).
pub fn to_double_indexed(problem: &GLQProblem) -> GLQProblem {
    let mut out = problem.clone();
    for cost in [&mut out.cost1, &mut out.cost2] {
        if let CostTable::Stationary { stages, terminal } = &cost.table {
            let n_stages = cost.n_stages;
            let rows: Vec<Vec<StageWeights>> = (0..n_stages)
                .map(|t| (t..n_stages).map(|k| stages[k].clone()).collect())
                .collect();
            let terminals: Vec<TerminalWeights> = vec![terminal.clone(); n_stages];
            cost.table = CostTable::DoubleIndexed { rows, terminals };
        }
    }
    out
}
