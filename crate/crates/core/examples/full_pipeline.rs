//! Runs every stage on a configuration file and prints the manifest summary.
//!
//!     cargo run --release --example full_pipeline -- [config.toml] [out_dir]

use std::path::PathBuf;

use xlct::pipeline::{load_config, run_pipeline};

fn main() -> xlct::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/demo.toml"));
    let mut cfg = load_config(&config)?;
    cfg.output_dir = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("xlct-demo"));
    let manifest = run_pipeline(&cfg)?;
    println!("config {}", manifest.config_hash);
    for t in &manifest.timings {
        println!("{:>10}  {:7.3} s", t.stage, t.seconds);
    }
    for a in &manifest.artifacts {
        println!("{:>10}  {} files", a.name, a.files.len());
    }
    print!("{}", std::fs::read_to_string(cfg.output_dir.join("metrics.txt")).unwrap_or_default());
    Ok(())
}
