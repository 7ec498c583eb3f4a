//! End-to-end training behaviour on synthetic long-tailed data.

use std::path::PathBuf;

use tailforge::experiment::{run_experiment, ExperimentConfig};
use tailforge::metrics::{confusion, mean_class_recall, GroupSpec};
use tailforge::rebalance::{class_balanced_sampler, ClassCounts};
use tailforge::trainer::{evaluate, predict_dataset, Method, Stage1Method, Stage2Kind};

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

#[test]
fn separable_data_is_fit() {
    let cfg =
        ExperimentConfig::synthetic(Method::one_stage(Stage1Method::Ce), 5, 8, 10.0, 300, 10.0);
    let run = run_experiment(&cfg, cfg.method, 0).unwrap();
    let splits = cfg.dataset.load(0).unwrap();
    let preds = predict_dataset(run.outcome.final_params(), &splits.train).unwrap();
    let cm = confusion(&preds, splits.train.labels(), 5).unwrap();
    let mcr = mean_class_recall(&cm, None).unwrap();
    assert!(mcr > 95.0, "train MCR {mcr:.2}");
}

#[test]
fn reweighted_stage2_helps_the_minority() {
    let method = Method::two_stage(Stage1Method::Ce, Stage2Kind::Crw);
    let cfg = ExperimentConfig::synthetic(method, 5, 16, 100.0, 1000, 3.0);
    let mut before = [0.0; 3];
    let mut after = [0.0; 3];
    for seed in 0..3u64 {
        let run = run_experiment(&cfg, method, seed).unwrap();
        let splits = cfg.dataset.load(seed).unwrap();
        let counts = splits.train.class_counts().unwrap();
        let s1 = evaluate(
            &run.outcome.stage1.params,
            &splits.test,
            &counts,
            GroupSpec::for_classes(5),
            seed,
        )
        .unwrap();
        before[seed as usize] = s1.mcr_minor;
        after[seed as usize] = run.report.eval.mcr_minor;
    }
    let (b, a) = (median3(before), median3(after));
    assert!(a >= b, "minority recall fell from {b:.2} to {a:.2}");
}

#[test]
fn resampling_sampler_is_uniform_over_classes() {
    // χ² critical values at p = 0.001 for 3 and 9 degrees of freedom.
    for (counts, critical) in [
        (vec![1000, 100, 30, 10], 16.266),
        (
            vec![5000, 3000, 1500, 800, 400, 200, 90, 40, 20, 10],
            27.877,
        ),
    ] {
        let k = counts.len();
        let counts = ClassCounts::new(counts).unwrap();
        let mut passed = 0;
        for seed in 0..100 {
            let mut s = class_balanced_sampler(&counts, seed);
            let mut seen = vec![0usize; k];
            for _ in 0..10_000 {
                seen[s.draw().0] += 1;
            }
            let expected = 10_000.0 / k as f64;
            let chi2: f64 = seen
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            if chi2 < critical {
                passed += 1;
            }
        }
        assert!(passed >= 99, "{passed}/100 seeds passed for K = {k}");
    }
}

#[test]
fn runs_are_bit_reproducible() {
    let method = Method::two_stage(Stage1Method::CeSc, Stage2Kind::Crw);
    let mut cfg = ExperimentConfig::synthetic(method, 4, 6, 20.0, 200, 3.0);
    cfg.stage1.schedule.total_epochs = 4;
    cfg.stage2.schedule.total_epochs = 2;
    let a = run_experiment(&cfg, method, 7).unwrap();
    let b = run_experiment(&cfg, method, 7).unwrap();
    assert_eq!(a.outcome, b.outcome);
    assert_eq!(a.report, b.report);
    assert_eq!(a.record_jsonl().unwrap(), b.record_jsonl().unwrap());
}

#[test]
fn shipped_configs_train_with_finite_losses() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    assert!(!paths.is_empty());
    for path in paths {
        let cfg = ExperimentConfig::load(&path).unwrap();
        let run = run_experiment(&cfg, cfg.method, cfg.seed).unwrap();
        for e in run.outcome.epochs() {
            assert!(
                e.train_loss.is_finite(),
                "{}: epoch {} loss {}",
                path.display(),
                e.epoch,
                e.train_loss
            );
        }
        assert!(
            run.report.eval.mcr_all > 20.0,
            "{}: no better than chance",
            path.display()
        );
    }
}
