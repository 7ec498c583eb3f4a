//! Load an experiment from a JSON config, run it, and write checkpoints,
//! the per-epoch record and the report.
//!
//! cargo run --release --example config_file -- configs/synthetic_center.json

use std::path::PathBuf;

use tailforge::experiment::{run_experiment, ExperimentConfig};

fn main() -> tailforge::Result<()> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/synthetic_center.json")
        });
    let cfg = ExperimentConfig::load(&path)?;
    println!("{}", cfg.to_json()?);

    let run = run_experiment(&cfg, cfg.method, cfg.seed)?;
    let out = std::env::temp_dir().join("tailforge_config_example");
    run.write(&out)?;
    let s = run.summary();
    println!("\n{s:?}");
    println!("outputs in {}", out.display());
    Ok(())
}
