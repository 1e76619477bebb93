//! Regenerates the bundled benchmark configuration files from the solver's
//! fixtures, guaranteeing that the JSON documents and the in-code fixtures
//! stay identical.

use tigame_cli::config::{benchmark_lq_config, benchmark_mv_config};

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    std::fs::create_dir_all(&dir).unwrap();
    for (name, cfg) in [
        ("benchmark_lq.json", benchmark_lq_config()),
        ("benchmark_mv.json", benchmark_mv_config()),
    ] {
        let text = serde_json::to_string_pretty(&cfg).unwrap() + "\n";
        std::fs::write(dir.join(name), text).unwrap();
        println!("wrote {}", dir.join(name).display());
    }
}
