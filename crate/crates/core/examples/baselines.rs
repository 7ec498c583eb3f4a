//! Every built-in method on the same long-tailed problem, one seed each.
//!
//! cargo run --release --example baselines

use tailforge::experiment::{run_experiment, ExperimentConfig};
use tailforge::trainer::{Method, Stage1Method, Stage2Kind};

fn main() -> tailforge::Result<()> {
    let cfg =
        ExperimentConfig::synthetic(Method::one_stage(Stage1Method::Ce), 5, 16, 100.0, 1000, 3.0);
    let mut methods: Vec<Method> = Stage1Method::ALL
        .iter()
        .map(|&m| Method::one_stage(m))
        .collect();
    methods.push(Method::two_stage(Stage1Method::Ce, Stage2Kind::Crw));
    methods.push(Method::two_stage(Stage1Method::Ce, Stage2Kind::Crs));
    methods.push(Method::two_stage(Stage1Method::CeSc, Stage2Kind::Crw));

    println!(
        "{:<12} {:>7} {:>7} {:>7}",
        "method", "all", "major", "minor"
    );
    for method in methods {
        let e = run_experiment(&cfg, method, 0)?.report.eval;
        println!(
            "{:<12} {:7.2} {:7.2} {:7.2}",
            method.to_string(),
            e.mcr_all,
            e.mcr_major,
            e.mcr_minor
        );
    }
    Ok(())
}
