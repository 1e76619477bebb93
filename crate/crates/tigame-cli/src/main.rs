//! Command-line driver for the solver suite: solve a single instance, sweep
//! the coupling intensity, verify equilibrium conditions on an exact
//! scenario tree, cross-check against a brute-force oracle, and cross-check
//! the exact evaluator against Monte Carlo.
//!
//! Exit codes: 0 success, 1 input error, 2 solvability/verification failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tigame::equilibrium::{
    adjoint_closed_form_residual, solve_on_tree, stationarity_residual,
    verify_equilibrium_inequalities,
};
use tigame::evaluate::{
    expected_tail_cost, monte_carlo_tail_cost, summary_csv, sweep, sweep_csv, ScenarioTree,
    SweepOptions, SweepProblem, TailDynamics,
};
use tigame::fictitious::{self, Punishment, SelfCoordinationSolution};
use tigame::meanvar;
use tigame::model::LQProblem;
use tigame::numkit::{Tolerances, Vecf};
use tigame::riccati::{LeftBracket, Verdict};

use tigame_cli::config::{self, BuiltProblem, Config};
use tigame_cli::{emit_plotdata, gains_csv, write_file};

#[derive(Parser)]
#[command(
    name = "tigame",
    version,
    about = "Solvers for time-inconsistent stochastic linear-quadratic control via a coupled two-player game"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one instance and print the solvability verdict and control-law gains.
    Solve(CommonArgs),
    /// Evaluate the objective over a coupling-intensity grid; write CSVs and plot data.
    Sweep(CommonArgs),
    /// Check stationarity, closed-form adjoints, and equilibrium inequalities on an exact scenario tree.
    Verify(CommonArgs),
    /// Compare the synthesized law against a brute-force scenario-tree solve.
    Oracle(CommonArgs),
    /// Cross-check the exact objective evaluator against Monte Carlo simulation.
    Mc(CommonArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AdjointsArg {
    /// Transposed adjoint accumulation: consistent with the stationarity
    /// system and the brute-force tree oracle.
    Transposed,
    /// Untransposed accumulation: the variant the frozen benchmark
    /// reference values were generated under.
    Plain,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON configuration: a file path or a bundled name
    /// (`benchmark-lq`, `benchmark-mv`).
    #[arg(long)]
    config: String,
    /// Evaluation time the objective is judged from.
    #[arg(long)]
    t: Option<usize>,
    /// Single coupling intensity (overrides the config).
    #[arg(long)]
    mu: Option<f64>,
    /// Intensity grid for `sweep`: `standard[:CAP]`, `list:[...]`,
    /// `linspace:a,b,n`, or `logspace:a,b,n`.
    #[arg(long)]
    mu_grid: Option<String>,
    /// Comma-separated evaluation stages, e.g. `0,1,2,3`.
    #[arg(long)]
    k: Option<String>,
    /// Output directory for CSV and plot files.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Worker threads for the sweep (default: machine parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Random seed for Monte Carlo and perturbation trials.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Override the relative rank tolerance for pseudoinverses.
    #[arg(long)]
    tol_rank: Option<f64>,
    /// Use the all-plus coupling blocks instead of the difference coupling.
    #[arg(long)]
    literal_upsilon: bool,
    /// Adjoint orientation of the backward recursion. Defaults: `plain` for
    /// sweep/mc (benchmark reproduction), `transposed` for solve/verify/oracle.
    #[arg(long, value_enum)]
    adjoints: Option<AdjointsArg>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (args, run): (&CommonArgs, fn(&CommonArgs, &Ctx) -> Result<u8>) = match &cli.cmd {
        Cmd::Solve(a) => (a, cmd_solve),
        Cmd::Sweep(a) => (a, cmd_sweep),
        Cmd::Verify(a) => (a, cmd_verify),
        Cmd::Oracle(a) => (a, cmd_oracle),
        Cmd::Mc(a) => (a, cmd_mc),
    };
    match prepare(args).and_then(|ctx| run(args, &ctx)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Everything derived from the configuration before a subcommand runs.
struct Ctx {
    cfg: Config,
    built: BuiltProblem,
    tol: Tolerances,
    t: usize,
    mus: Vec<f64>,
    literal: bool,
}

fn prepare(args: &CommonArgs) -> Result<Ctx> {
    if let Some(n) = args.threads {
        // A second invocation in-process would fail; that cannot happen here.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("cannot configure thread pool: {e}"))?;
    }
    let cfg = config::load(&args.config)?;
    let built = cfg.build()?;
    let tol = cfg.tolerances(args.tol_rank);
    let t = args
        .t
        .or_else(|| cfg.initial.as_ref().map(|i| i.t))
        .unwrap_or(0);
    if t >= built.n_stages() {
        bail!("evaluation time t={t} out of range for horizon {}", built.n_stages());
    }
    let mus = cfg.mus(args.mu, built.n_stages())?;
    let literal = args.literal_upsilon || cfg.literal_coupling();
    Ok(Ctx {
        cfg,
        built,
        tol,
        t,
        mus,
        literal,
    })
}

fn punishment(ctx: &Ctx) -> Result<Punishment> {
    let m = ctx.built.control_dim();
    Ok(Punishment {
        mus: ctx.mus.clone(),
        psis: ctx.cfg.psis(m, ctx.built.n_stages())?,
        literal_coupling: ctx.literal,
    })
}

/// Initial state of player 1's fictitious copy paired with the true state.
fn initial_state(ctx: &Ctx) -> Result<Vecf> {
    match &ctx.built {
        BuiltProblem::Lq(lq) => {
            let x = ctx
                .cfg
                .initial
                .as_ref()
                .and_then(|i| i.x.as_ref())
                .ok_or_else(|| anyhow!("config needs initial.x for an lq problem"))?;
            if x.len() != lq.n_state {
                bail!("initial.x has length {}, expected {}", x.len(), lq.n_state);
            }
            Ok(Vecf::from_column_slice(x))
        }
        BuiltProblem::Mv(md) => {
            let z = ctx
                .cfg
                .initial
                .as_ref()
                .and_then(|i| i.z)
                .unwrap_or(md.initial_wealth);
            Ok(Vecf::from_element(1, z))
        }
        BuiltProblem::Glq(g) => {
            let x = ctx
                .cfg
                .initial
                .as_ref()
                .and_then(|i| i.x.as_ref())
                .ok_or_else(|| anyhow!("config needs initial.x for a glq problem"))?;
            if x.len() != g.dynamics.n_state {
                bail!(
                    "initial.x has length {}, expected {}",
                    x.len(),
                    g.dynamics.n_state
                );
            }
            Ok(Vecf::from_column_slice(x))
        }
    }
}

fn bracket_for(args: &CommonArgs, default: LeftBracket) -> LeftBracket {
    match args.adjoints {
        Some(AdjointsArg::Transposed) => LeftBracket::TransposedAdjoints,
        Some(AdjointsArg::Plain) => LeftBracket::PlainAdjoints,
        None => default,
    }
}

/// Solve the coupled game for the configured problem. The returned solution
/// lives on the doubled state for `lq`/`mv` and on the plain state for `glq`.
fn solve_instance(ctx: &Ctx, bracket: LeftBracket) -> tigame::Result<SelfCoordinationSolution> {
    let pun = punishment(ctx).map_err(|e| tigame::Error::InvalidProblem(e.to_string()))?;
    let x0 = initial_state(ctx).map_err(|e| tigame::Error::InvalidProblem(e.to_string()))?;
    match &ctx.built {
        BuiltProblem::Lq(lq) => {
            fictitious::self_coordination_oriented(lq, &pun, ctx.t, &x0, &ctx.tol, bracket)
        }
        BuiltProblem::Mv(md) => {
            let game = meanvar::build_mv(md, &pun)?;
            let z0 = Vecf::from_element(2, x0[0]);
            fictitious::solve_game_oriented(game, ctx.t, &z0, &ctx.tol, bracket)
        }
        BuiltProblem::Glq(g) => {
            fictitious::solve_game_oriented(g.clone(), ctx.t, &x0, &ctx.tol, bracket)
        }
    }
}

/// Map a solver error to the documented exit codes: structural problems are
/// input errors (1), solvability and numerical failures exit 2.
fn solver_exit(e: tigame::Error) -> Result<u8> {
    match e {
        tigame::Error::Solvability { .. } | tigame::Error::Numerical { .. } => {
            eprintln!("solve failed: {e}");
            Ok(2)
        }
        other => Err(other.into()),
    }
}

fn ks_for(args: &CommonArgs, ctx: &Ctx) -> Result<Vec<usize>> {
    let ks = match &args.k {
        Some(spec) => config::parse_k_list(spec)?,
        None => match ctx.cfg.evaluation.as_ref().and_then(|e| e.k.clone()) {
            Some(ks) => ks,
            None => (ctx.t..ctx.built.n_stages()).collect(),
        },
    };
    for &k in &ks {
        if k >= ctx.built.n_stages() {
            bail!("evaluation stage k={k} out of range for horizon {}", ctx.built.n_stages());
        }
    }
    Ok(ks)
}

fn cmd_solve(args: &CommonArgs, ctx: &Ctx) -> Result<u8> {
    let bracket = bracket_for(args, LeftBracket::TransposedAdjoints);
    let scs = match solve_instance(ctx, bracket) {
        Ok(s) => s,
        Err(e) => return solver_exit(e),
    };
    println!("verdict: {:?}", scs.report.verdict);
    let csv = gains_csv(&scs.law);
    if let Some(dir) = &args.output {
        let path = write_file(dir, "gains.csv", &csv)?;
        println!("gains written to {}", path.display());
    } else {
        print!("{csv}");
    }
    if scs.report.verdict == Verdict::Undetermined {
        eprintln!("sufficient conditions could not be established");
        return Ok(2);
    }
    Ok(0)
}

fn cmd_sweep(args: &CommonArgs, ctx: &Ctx) -> Result<u8> {
    let problem = match &ctx.built {
        BuiltProblem::Lq(lq) => {
            let x0 = initial_state(ctx)?;
            // The sweep evaluator owns the borrowed state; keep it alive.
            return run_sweep(args, ctx, SweepProblem::Lq { lq, x0: &x0 });
        }
        BuiltProblem::Mv(md) => SweepProblem::Mv { market: md },
        BuiltProblem::Glq(_) => {
            bail!("sweep requires an `lq` or `mv` problem (the intensity enters through the built-in coupling)")
        }
    };
    run_sweep(args, ctx, problem)
}

fn run_sweep(args: &CommonArgs, ctx: &Ctx, problem: SweepProblem) -> Result<u8> {
    let grid = match (&args.mu_grid, args.mu) {
        (Some(spec), _) => config::parse_grid(spec)?,
        (None, Some(mu)) => vec![mu],
        (None, None) => match ctx.cfg.evaluation.as_ref().and_then(|e| e.grid.clone()) {
            Some(spec) => config::parse_grid(&spec)?,
            None => config::parse_grid("standard")?,
        },
    };
    let ks = ks_for(args, ctx)?;
    let psi = ctx
        .cfg
        .punishment
        .as_ref()
        .and_then(|p| p.psi.as_ref())
        .map(|_| ctx.cfg.psis(ctx.built.control_dim(), ctx.built.n_stages()))
        .transpose()?
        .map(|psis| psis[0].clone());
    let opts = SweepOptions {
        ks,
        grid,
        psi,
        literal_coupling: ctx.literal,
        bracket: bracket_for(args, LeftBracket::PlainAdjoints),
        tol: ctx.tol,
    };
    let r = match sweep(&problem, &opts) {
        Ok(r) => r,
        Err(e) => return solver_exit(e),
    };
    let dir = args.output.clone().unwrap_or_else(|| PathBuf::from("."));
    write_file(&dir, "sweep.csv", &sweep_csv(&r))?;
    write_file(&dir, "summary.csv", &summary_csv(&r))?;
    emit_plotdata(&r, &dir.join("plot"))?;
    print!("{}", summary_csv(&r));
    let failed = r.rows.iter().filter(|row| row.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} of {} grid points failed to solve", r.rows.len());
    }
    if failed == r.rows.len() {
        return Ok(2);
    }
    Ok(0)
}

/// Guard for subcommands that enumerate a full scenario tree.
fn tree_for(scs: &SelfCoordinationSolution, t: usize) -> Result<ScenarioTree> {
    let depth = scs.game.dynamics.n_stages - t;
    let p = scs.game.noise.p;
    if p * depth > 14 {
        bail!("exact scenario tree too large (p={p}, depth={depth}); use a shorter horizon");
    }
    Ok(ScenarioTree::two_point(&scs.game.noise, t, scs.game.dynamics.n_stages))
}

fn cmd_verify(args: &CommonArgs, ctx: &Ctx) -> Result<u8> {
    let bracket = bracket_for(args, LeftBracket::TransposedAdjoints);
    let scs = match solve_instance(ctx, bracket) {
        Ok(s) => s,
        Err(e) => return solver_exit(e),
    };
    let tree = tree_for(&scs, ctx.t)?;
    let ts = solve_on_tree(&scs.game, &scs.law, &tree)?;
    let stat = stationarity_residual(&scs.game, &ts, &tree)?
        .into_iter()
        .fold(0.0f64, f64::max);
    let closed = adjoint_closed_form_residual(&scs.bundle, &ts, &tree);
    let seed = args.seed.unwrap_or(1);
    let rep = verify_equilibrium_inequalities(
        &scs.game, &scs.law, &tree, &scs.convexity, 20, seed, &ctx.tol,
    )?;
    println!("verdict: {:?}", scs.report.verdict);
    println!("stationarity residual (max over nodes): {stat:.3e}");
    println!("adjoint closed-form residual (max over nodes): {closed:.3e}");
    println!(
        "perturbation inequalities: first-order max {:.3e} / {:.3e}, second-order min {:.3e} / {:.3e}",
        rep.max_first_order_1, rep.max_first_order_2, rep.min_second_order_1, rep.min_second_order_2
    );
    let pass = stat <= 1e-8 && closed <= 1e-9 && rep.passes(1e-9);
    println!("verify: {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 2 })
}

fn cmd_oracle(args: &CommonArgs, ctx: &Ctx) -> Result<u8> {
    let bracket = bracket_for(args, LeftBracket::TransposedAdjoints);
    let scs = match solve_instance(ctx, bracket) {
        Ok(s) => s,
        Err(e) => return solver_exit(e),
    };
    let tree = tree_for(&scs, ctx.t)?;
    let ts = solve_on_tree(&scs.game, &scs.law, &tree)?;
    let y0 = ts.x[0][0].clone();
    let oracle =
        match tigame::evaluate::tree_oracle_equilibrium(&scs.game, &tree, &y0, &ctx.tol) {
            Ok(o) => o,
            Err(e) => return solver_exit(e),
        };
    let mut gap = 0.0f64;
    for s in 0..tree.depth {
        for m in 0..tree.nodes_at(s) {
            gap = gap.max((&oracle.u[s][m] - &ts.u[s][m]).norm());
            gap = gap.max((&oracle.v[s][m] - &ts.v[s][m]).norm());
        }
    }
    println!("oracle stationarity residual: {:.3e}", oracle.residual);
    println!("max control gap law vs oracle: {gap:.3e}");
    let pass = oracle.consistent && gap <= 1e-8;
    println!("oracle: {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 2 })
}

fn cmd_mc(args: &CommonArgs, ctx: &Ctx) -> Result<u8> {
    let bracket = bracket_for(args, LeftBracket::PlainAdjoints);
    let scs = match solve_instance(ctx, bracket) {
        Ok(s) => s,
        Err(e) => return solver_exit(e),
    };
    // The exact and simulated evaluators consume the single-control problem
    // underlying the coupled game.
    let (lq, term_lin): (LQProblem, Option<Vecf>) = match &ctx.built {
        BuiltProblem::Lq(lq) => (lq.clone(), None),
        BuiltProblem::Mv(md) => (
            meanvar::mv_lq(md)?,
            Some(Vecf::from_element(1, -md.lambda / 2.0)),
        ),
        BuiltProblem::Glq(_) => {
            bail!("mc requires an `lq` or `mv` problem")
        }
    };
    let eval = ctx.cfg.evaluation.as_ref();
    let paths = args.paths.or(eval.and_then(|e| e.paths)).unwrap_or(100_000);
    let seed = args.seed.or(eval.and_then(|e| e.seed)).unwrap_or(1);
    let ks = ks_for(args, ctx)?;
    println!("k,exact,estimate,stderr,z");
    let mut pass = true;
    for &k in &ks {
        let exact = expected_tail_cost(&lq, &scs, k, TailDynamics::Stagewise, term_lin.as_ref())?;
        let (est, se) = monte_carlo_tail_cost(
            &lq,
            &scs,
            k,
            TailDynamics::Stagewise,
            paths,
            seed.wrapping_add(k as u64),
            term_lin.as_ref(),
        )?;
        let z = if se > 0.0 { (est - exact).abs() / se } else { 0.0 };
        pass &= z <= 4.0;
        println!(
            "{k},{},{},{},{z:.3}",
            tigame::evaluate::fmt17(exact),
            tigame::evaluate::fmt17(est),
            tigame::evaluate::fmt17(se)
        );
    }
    println!("mc: {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 2 })
}
