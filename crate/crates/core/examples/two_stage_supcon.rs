//! Stage 1 trains the extractor with cross-entropy plus a supervised
//! contrastive term; stage 2 freezes it and re-trains the classifier with
//! class re-weighting.
//!
//! cargo run --release --example two_stage_supcon

use tailforge::experiment::{run_experiment, ExperimentConfig};
use tailforge::metrics::GroupSpec;
use tailforge::model::Part;
use tailforge::trainer::{evaluate, Method, Stage1Method, Stage2Kind};

fn main() -> tailforge::Result<()> {
    let method = Method::two_stage(Stage1Method::CeSc, Stage2Kind::Crw);
    let mut cfg = ExperimentConfig::synthetic(method, 5, 16, 100.0, 2000, 3.0);
    cfg.stage1.loss.lambda = Some(0.1);
    cfg.stage1.loss.supcon.temperature = 0.05;

    let run = run_experiment(&cfg, method, 0)?;
    for e in run.outcome.epochs() {
        println!(
            "stage {} epoch {:>3}  lr {:.2e}  loss {:.4}",
            e.stage, e.epoch, e.lr, e.train_loss
        );
    }

    let splits = cfg.dataset.load(0)?;
    let counts = splits.train.class_counts()?;
    let before = evaluate(
        &run.outcome.stage1.params,
        &splits.test,
        &counts,
        GroupSpec::for_classes(5),
        0,
    )?;
    let after = &run.report.eval;
    println!("\n            all    major  minor");
    println!(
        "stage 1  {:6.2} {:6.2} {:6.2}",
        before.mcr_all, before.mcr_major, before.mcr_minor
    );
    println!(
        "stage 2  {:6.2} {:6.2} {:6.2}",
        after.mcr_all, after.mcr_major, after.mcr_minor
    );

    let s2 = run.outcome.stage2.as_ref().expect("two-stage method");
    assert_eq!(
        run.outcome.stage1.params.group(Part::Extractor).tensors,
        s2.params.group(Part::Extractor).tensors,
        "stage 2 must not touch the extractor"
    );
    println!("extractor unchanged by stage 2");
    Ok(())
}
