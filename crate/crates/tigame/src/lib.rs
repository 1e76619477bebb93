//! Solver suite for time-inconsistent discrete-time stochastic
//! linear-quadratic (LQ) control.
//!
//! A time-inconsistent LQ problem (objective weights that depend on the
//! initial time, plus conditional-mean terms) is handled by embedding it into
//! a two-player coordination game on a doubled state space: a *precommitted*
//! player `u` that optimizes the whole-horizon objective once and for all,
//! and a *recursive* player `v` that only requires single-stage optimality at
//! every intermediate time. The two players are coupled through a punishment
//! term `mu_k (u_k - v_k)' Psi_k (u_k - v_k)` that penalizes disagreement.
//! The `v`-component of a Nash equilibrium of this game is the
//! *self-coordination* control of the original problem; the punishment
//! weights `mu_k` interpolate between the purely recursive (`mu = 0`) and the
//! fully precommitted (`mu -> infinity`) solutions.
//!
//! Module map (bottom-up):
//! - [`numkit`]: dense matrix helpers — pseudoinverse, semidefiniteness and
//!   range tests, exact second-moment propagation.
//! - [`model`]: problem containers for the two-player game, including
//!   weights that carry two time indices (evaluation time, stage).
//! - [`riccati`]: backward recursions producing the per-stage coefficient
//!   blocks, gains, and the solvability report.
//! - [`equilibrium`]: equilibrium law synthesis and scenario-tree
//!   verification of the stationarity system and the player inequalities.
//! - [`fictitious`]: embedding of a plain time-inconsistent LQ problem into
//!   the doubled-state game, and extraction of the self-coordination control.
//! - [`meanvar`]: multi-period mean-variance portfolio specialization with
//!   closed-form block recursions and structural checks.
//! - [`evaluate`]: exact moment-propagation cost evaluation, Monte Carlo
//!   estimation, punishment-weight sweeps, and a brute-force tree oracle.

pub mod equilibrium;
pub mod evaluate;
pub mod fictitious;
pub mod fixtures;
pub mod meanvar;
pub mod model;
pub mod numkit;
pub mod riccati;

pub use numkit::{Mat, Tolerances, Vecf};

/// Errors surfaced by the solver layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A problem container failed structural validation.
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    /// A backward pass or evaluation was asked for data outside the horizon.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    /// A solvability condition failed at a stage.
    #[error("solvability failure at stage {stage}: {what}")]
    Solvability { stage: usize, what: String },
    /// A recursion produced a non-finite value.
    #[error("numerical breakdown at stage {stage}: {what}")]
    Numerical { stage: usize, what: String },
}

pub type Result<T> = std::result::Result<T, Error>;
