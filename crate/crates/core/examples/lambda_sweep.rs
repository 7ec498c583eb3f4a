//! Sweep the metric-loss coefficient over a grid and several seeds.
//! `TAILFORGE_THREADS` sets the worker count; results do not depend on it.
//!
//! cargo run --release --example lambda_sweep

use tailforge::experiment::{sweep, sweep_csv, threads_from_env, ExperimentConfig};
use tailforge::trainer::{Method, Stage1Method, Stage2Kind};

fn main() -> tailforge::Result<()> {
    let method = Method::two_stage(Stage1Method::CeSc, Stage2Kind::Crw);
    let cfg = ExperimentConfig::synthetic(method, 5, 16, 50.0, 600, 3.0);
    let grid = [0.0, 0.01, 0.1, 1.0];
    let rows = sweep(&cfg, "lambda", &grid, &[0, 1], None, threads_from_env()?)?;
    print!("{}", sweep_csv("lambda", &rows));
    Ok(())
}
