//! Switch cross-entropy, the contrastive term and classifier re-weighting
//! on and off; each row reports the median over three seeds.
//!
//! cargo run --release --example ablation

use tailforge::experiment::{ablate, ablation_csv, threads_from_env, ExperimentConfig};
use tailforge::trainer::{Method, Stage1Method};

fn main() -> tailforge::Result<()> {
    let mut cfg =
        ExperimentConfig::synthetic(Method::one_stage(Stage1Method::Ce), 5, 16, 100.0, 1000, 3.0);
    cfg.stage1.loss.lambda = Some(0.1);
    let rows = ablate(&cfg, &[0, 1, 2], None, threads_from_env()?)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
