//! Support library for the `tigame` command-line driver: configuration
//! parsing and the file-emission helpers shared with the integration tests.

pub mod config;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tigame::equilibrium::EquilibriumLaw;
use tigame::evaluate::{fmt17, SweepResult};

/// Per-stage feedback gains of a synthesized control law as long-form CSV:
/// one line per matrix entry, blocks `dev` (deviation gain), `mean` (mean
/// gain), and `offset` (affine offset, column 0).
pub fn gains_csv(law: &EquilibriumLaw) -> String {
    let mut out = String::from("k,block,row,col,value\n");
    for (i, k) in (law.t..law.n_stages).enumerate() {
        for (name, m) in [("dev", &law.k_dev[i]), ("mean", &law.k_mean[i])] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    out.push_str(&format!("{k},{name},{r},{c},{}\n", fmt17(m[(r, c)])));
                }
            }
        }
        for r in 0..law.c_off[i].len() {
            out.push_str(&format!("{k},offset,{r},0,{}\n", fmt17(law.c_off[i][r])));
        }
    }
    out
}

/// Write `text` to `dir/name`, creating the directory if needed.
pub fn write_file(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let path = dir.join(name);
    let mut f = std::fs::File::create(&path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    f.write_all(text.as_bytes())
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(path)
}

/// Emit per-stage two-column `(mu, value)` plot files plus constant baseline
/// files, suitable for any external plotting tool. An empty stage list emits
/// nothing and warns on stderr. Returns the written paths.
pub fn emit_plotdata(r: &SweepResult, dir: &Path) -> Result<Vec<PathBuf>> {
    if r.ks.is_empty() {
        eprintln!("warning: empty evaluation-stage list; no plot data written");
        return Ok(Vec::new());
    }
    let mut written = Vec::new();
    for (ki, &k) in r.ks.iter().enumerate() {
        let mut curve = String::new();
        for row in &r.rows {
            if let Some(v) = row.values[ki] {
                curve.push_str(&format!("{} {}\n", fmt17(row.mu), fmt17(v)));
            }
        }
        written.push(write_file(dir, &format!("selfcoord_k{k}.dat"), &curve)?);
        for (name, value) in [
            ("precommit", r.precommit[ki]),
            ("timeconsistent", r.timeconsistent[ki]),
        ] {
            let mut flat = String::new();
            for row in &r.rows {
                flat.push_str(&format!("{} {}\n", fmt17(row.mu), fmt17(value)));
            }
            written.push(write_file(dir, &format!("{name}_k{k}.dat"), &flat)?);
        }
    }
    Ok(written)
}
