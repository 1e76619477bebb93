//! End-to-end tests of the command-line driver: configuration round-trips,
//! located dimension errors, exit codes, and byte-identical deterministic
//! outputs.

use std::process::Command;

use tigame::model::{LQCostTable, SamplerKind};
use tigame_cli::config::{self, benchmark_lq_config, benchmark_mv_config, BuiltProblem, Config};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tigame"))
}

#[test]
fn bundled_lq_fixture_round_trips_to_the_solver_fixture() {
    let cfg = Config::from_json(config::bundled("benchmark-lq").unwrap()).unwrap();
    let BuiltProblem::Lq(lq) = cfg.build().unwrap() else {
        panic!("benchmark-lq must build an lq problem");
    };
    let want = tigame::fixtures::four_period_lq();
    assert_eq!((lq.n_stages, lq.n_state, lq.m), (4, 2, 1));
    assert_eq!(lq.a0, want.a0);
    assert_eq!(lq.b0, want.b0);
    assert_eq!(lq.c0, want.c0);
    assert_eq!(lq.d0, want.d0);
    assert_eq!(lq.noise.deltas, want.noise.deltas);
    assert_eq!(lq.noise.sampler_kind, SamplerKind::TwoPointProduct);
    let (LQCostTable::Stationary { stages, terminal },
         LQCostTable::Stationary { stages: ws, terminal: wt }) = (&lq.weights, &want.weights)
    else {
        panic!("both fixtures use stationary weights");
    };
    for (a, b) in stages.iter().zip(ws) {
        assert_eq!(a.q, b.q);
        assert_eq!(a.q_bar, b.q_bar);
        assert_eq!(a.r, b.r);
        assert_eq!(a.r_bar, b.r_bar);
    }
    assert_eq!(terminal.g, wt.g);
    assert_eq!(terminal.g_bar, wt.g_bar);
}

#[test]
fn bundled_mv_fixture_round_trips_to_the_solver_fixture() {
    let cfg = Config::from_json(config::bundled("benchmark-mv").unwrap()).unwrap();
    let BuiltProblem::Mv(md) = cfg.build().unwrap() else {
        panic!("benchmark-mv must build a market");
    };
    let want = tigame::fixtures::three_asset_market();
    assert_eq!((md.n_stages, md.p0), (4, 3));
    assert_eq!(md.s, want.s);
    assert_eq!(md.mean_e, want.mean_e);
    assert_eq!(md.cov_e, want.cov_e);
    assert_eq!(md.lambda, want.lambda);
    assert_eq!(md.initial_wealth, want.initial_wealth);
}

#[test]
fn bundled_fixture_bytes_match_the_generator() {
    for (name, cfg) in [
        ("benchmark-lq", benchmark_lq_config()),
        ("benchmark-mv", benchmark_mv_config()),
    ] {
        let generated = serde_json::to_string_pretty(&cfg).unwrap() + "\n";
        assert_eq!(
            config::bundled(name).unwrap(),
            generated,
            "{name}: bundled file drifted from the generator; re-run the gen_fixtures example"
        );
    }
}

#[test]
fn dimension_errors_are_located() {
    let mut cfg = benchmark_lq_config();
    let config::ProblemConfig::Lq(lq) = &mut cfg.problem else {
        unreachable!()
    };
    lq.a0[2] = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let err = cfg.build().unwrap_err().to_string();
    assert!(
        err.contains("problem.a0[2]") && err.contains("2x2") && err.contains("2x3"),
        "error must name the path and both shapes: {err}"
    );
}

#[test]
fn unknown_keys_are_rejected() {
    let text = config::bundled("benchmark-mv").unwrap().replace("\"lambda\"", "\"lambdaa\"");
    let err = Config::from_json(&text).unwrap_err().to_string();
    assert!(err.contains("lambdaa"), "unexpected error: {err}");
}

#[test]
fn grid_grammar_parses() {
    assert_eq!(config::parse_grid("list:[0.5, 0.25]").unwrap(), vec![0.5, 0.25]);
    assert_eq!(
        config::parse_grid("linspace:0,1,5").unwrap(),
        vec![0.0, 0.25, 0.5, 0.75, 1.0]
    );
    let log = config::parse_grid("logspace:0.01,1,3").unwrap();
    assert!((log[1] - 0.1).abs() < 1e-12, "geometric midpoint: {log:?}");
    let capped = config::parse_grid("standard:0.002").unwrap();
    assert_eq!(capped.first(), Some(&0.0));
    assert!(capped.iter().all(|&m| m <= 0.002));
    assert!(capped.len() > 200, "1e-5 lattice present below the cap");
    assert!(config::parse_grid("bogus").is_err());
}

#[test]
fn solve_reports_verdict_and_exits_zero() {
    let out = bin()
        .args(["solve", "--config", "benchmark-lq", "--mu", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("verdict: SufficientUnique"));
    assert!(stdout.contains("k,block,row,col,value"));
}

#[test]
fn bad_config_path_exits_one() {
    let out = bin()
        .args(["solve", "--config", "/nonexistent/nope.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dimension_error_exits_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = config::bundled("benchmark-mv")
        .unwrap()
        .replace("\"p0\": 3", "\"p0\": 2");
    let path = dir.path().join("bad.json");
    std::fs::write(&path, text).unwrap();
    let out = bin()
        .args(["solve", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("problem.mean_e") || stderr.contains("problem.cov_e"),
        "stderr must locate the mismatch: {stderr}"
    );
}

#[test]
fn sweep_outputs_are_deterministic_and_complete() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = bin()
            .args([
                "sweep",
                "--config",
                "benchmark-mv",
                "--mu-grid",
                "list:[0.0,0.06424,0.1]",
                "--k",
                "0,1",
                "--output",
                dir.path().to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let sweep = std::fs::read(dir.path().join("sweep.csv")).unwrap();
        let summary = std::fs::read(dir.path().join("summary.csv")).unwrap();
        for name in [
            "selfcoord_k0.dat",
            "selfcoord_k1.dat",
            "precommit_k0.dat",
            "timeconsistent_k1.dat",
        ] {
            assert!(dir.path().join("plot").join(name).exists(), "missing plot file {name}");
        }
        (sweep, summary)
    };
    let (s1, m1) = run();
    let (s2, m2) = run();
    assert_eq!(s1, s2, "sweep.csv must be byte-identical across runs");
    assert_eq!(m1, m2, "summary.csv must be byte-identical across runs");
    let text = String::from_utf8(s1).unwrap();
    assert!(text.starts_with("mu,k,policy,value\n"));
    assert!(text.contains("selfcoord") && text.contains("precommit") && text.contains("timeconsistent"));
}

#[test]
fn empty_stage_list_warns_and_writes_no_plot_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "sweep",
            "--config",
            "benchmark-mv",
            "--mu-grid",
            "list:[0.0]",
            "--k",
            "",
            "--output",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"), "expected a warning on stderr: {stderr}");
    assert!(!dir.path().join("plot").exists(), "no plot directory for an empty stage list");
}

#[test]
fn mc_is_deterministic_for_a_fixed_seed() {
    let run = |seed: &str| {
        let out = bin()
            .args([
                "mc",
                "--config",
                "benchmark-lq",
                "--mu",
                "0",
                "--k",
                "0",
                "--paths",
                "5000",
                "--seed",
                seed,
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    assert_eq!(run("7"), run("7"));
    assert_ne!(run("7"), run("8"), "different seeds must draw different paths");
}
