//! The `tailforge` binary: commands, outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tailforge::data::{read_dataset, write_dataset, LabeledDataset};
use tailforge::model::{load_checkpoint, InputShape, Part};
use tailforge::trainer::lr_at;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tailforge"));
    c.env_remove("TAILFORGE_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Small, fast two-stage config.
fn tiny_config(dir: &Path, method: &str, extra_stage1: &str) -> String {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "seed": 3,
  "method": "{method}",
  "dataset": {{ "source": "synthetic", "num_classes": 4, "dims": 6, "rho": 20, "n_max": 200,
               "separation": 3.0, "test_per_class": 50 }},
  "stage1": {{ "schedule": {{ "warmup_epochs": 1, "peak_lr": 0.01, "min_lr": 1e-5, "total_epochs": 4 }}{extra_stage1} }},
  "stage2": {{ "schedule": {{ "warmup_epochs": 0, "peak_lr": 0.001, "min_lr": 1e-6, "total_epochs": 2 }} }}
}}"#
    );
    let path = dir.join(format!("cfg_{}.json", fs::read_dir(dir).unwrap().count()));
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let o = run(&["make-lt", "--rho", "10", "--output", "x.bin"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--input"), "{}", stderr(&o));
}

#[test]
fn make_lt_hits_the_requested_endpoints() {
    let tmp = TempDir::new().unwrap();
    let k = 3;
    let per_class = 9366;
    let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
    let features: Vec<f64> = (0..labels.len()).map(|i| (i % 7) as f64).collect();
    let ds = LabeledDataset::new(InputShape::Vector { dim: 1 }, k, features, labels).unwrap();
    let input = tmp.path().join("full.bin");
    write_dataset(&ds, &input).unwrap();

    let output = tmp.path().join("lt.bin");
    let o = run(&[
        "make-lt",
        "--input",
        input.to_str().unwrap(),
        "--rho",
        "99.6",
        "--seed",
        "1",
        "--output",
        output.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("n_max: 9366"), "{text}");
    assert!(text.contains("n_min: 94"), "{text}");
    let lt = read_dataset(&output).unwrap();
    // 9366 / √99.6 = 938.48
    assert_eq!(lt.counts(), &[9366, 938, 94]);

    // ρ = 1 keeps every class at n_max.
    let flat = tmp.path().join("flat.csv");
    let o = run(&[
        "make-lt",
        "--input",
        input.to_str().unwrap(),
        "--rho",
        "1",
        "--n-max",
        "50",
        "--output",
        flat.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_dataset(&flat).unwrap().counts(), &[50, 50, 50]);

    // Asking for more samples than exist is a usage error.
    let o = run(&[
        "make-lt",
        "--input",
        input.to_str().unwrap(),
        "--rho",
        "10",
        "--n-max",
        "99999",
        "--output",
        flat.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_checkpoints_and_report() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "CE+SC→cRW", "");
    let out = tmp.path().join("run");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mcr_minor"));

    let s1 = load_checkpoint(out.join("stage1.ckpt")).unwrap();
    let s2 = load_checkpoint(out.join("stage2.ckpt")).unwrap();
    assert_eq!(
        s1.group(Part::Extractor).tensors,
        s2.group(Part::Extractor).tensors
    );
    assert_ne!(s1.group(Part::Head).tensors, s2.group(Part::Head).tensors);

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    for key in [
        "method",
        "seed",
        "mcr_all",
        "mcr_major",
        "mcr_minor",
        "per_class_recall",
        "groups",
    ] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["seed"], 3);

    let record = fs::read_to_string(out.join("record.jsonl")).unwrap();
    let lines: Vec<&str> = record.lines().collect();
    assert_eq!(lines.len(), 4 + 2 + 1);
    assert!(lines.last().unwrap().starts_with("{\"summary\""));

    // Rerunning into the same directory reproduces every file.
    let first = fs::read(out.join("stage2.ckpt")).unwrap();
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(first, fs::read(out.join("stage2.ckpt")).unwrap());
    assert_eq!(
        record,
        fs::read_to_string(out.join("record.jsonl")).unwrap()
    );
}

#[test]
fn train_config_errors_name_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "CE+SC", r#", "loss": { "lambda": -1 }"#);
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage1.loss.lambda"), "{}", stderr(&o));

    let cfg = tiny_config(tmp.path(), "CE", r#", "colour": 1"#);
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage1"), "{}", stderr(&o));

    let cfg = tiny_config(tmp.path(), "CE->XYZ", "");
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(
        stderr(&o).contains("LDAM-DRW"),
        "valid tags should be listed: {}",
        stderr(&o)
    );

    let o = run(&["train", "--config", "/nonexistent/cfg.json", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergent_training_exits_with_numeric_failure() {
    let tmp = TempDir::new().unwrap();
    // The schedule is validated, so blow up through the data instead.
    let path = tmp.path().join("huge.json");
    fs::write(
        &path,
        r#"{
  "schema_version": 1,
  "method": "CE",
  "dataset": { "source": "synthetic", "num_classes": 3, "dims": 4, "rho": 2, "n_max": 60,
               "separation": 1e200, "test_per_class": 10 },
  "stage1": { "schedule": { "warmup_epochs": 0, "peak_lr": 1e6, "min_lr": 1e-6, "total_epochs": 3 } }
}"#,
    )
    .unwrap();
    let o = run(&[
        "train",
        "--config",
        path.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn sweep_is_sorted_and_thread_independent() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "CE+SC→cRW", "");
    let args = [
        "sweep",
        "--config",
        &cfg,
        "--grid",
        "0.004,0.00005,0.004",
        "--seeds",
        "1,2",
    ];
    let serial = run(&args);
    assert_eq!(code(&serial), 0, "{}", stderr(&serial));
    let text = stdout(&serial);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "lambda,seed,mcr_all,mcr_major,mcr_minor");
    assert_eq!(lines.len(), 1 + 2 * 2);
    let keys: Vec<(&str, &str)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0], f[1])
        })
        .collect();
    assert_eq!(
        keys,
        [
            ("0.00005", "1"),
            ("0.00005", "2"),
            ("0.004", "1"),
            ("0.004", "2")
        ]
    );

    let parallel = bin()
        .args(args)
        .env("TAILFORGE_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&parallel), 0);
    assert_eq!(stdout(&parallel), text);

    let bad = bin()
        .args(args)
        .env("TAILFORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
    assert!(stderr(&bad).contains("TAILFORGE_THREADS"));
}

#[test]
fn sweep_rejects_bad_grids() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "CE+SC", "");
    assert_eq!(code(&run(&["sweep", "--config", &cfg, "--grid", ""])), 2);
    assert_eq!(
        code(&run(&[
            "sweep", "--config", &cfg, "--grid", "0.1", "--param", "colour"
        ])),
        2
    );
    assert_eq!(code(&run(&["sweep", "--config", &cfg, "--grid", "-1"])), 2);
}

#[test]
fn single_value_sweep_writes_one_row_and_cells() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "CE+SC", "");
    let out = tmp.path().join("sweep");
    let o = run(&[
        "sweep",
        "--config",
        &cfg,
        "--grid",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2);
    assert_eq!(
        fs::read_to_string(out.join("sweep.csv")).unwrap(),
        stdout(&o)
    );
    assert!(out.join("cells/lambda=0.1_seed=3/report.json").exists());
}

#[test]
fn report_collects_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = tiny_config(tmp.path(), "CE", "");
    for seed in ["1", "2"] {
        let dir = tmp.path().join("runs").join(seed);
        let o = run(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--out",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let o = run(&["report", tmp.path().join("runs").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("method,seed,mcr_all"), "{text}");
    assert_eq!(lines.len(), 3);
    assert!(
        lines[1].starts_with("CE,1,") && lines[2].starts_with("CE,2,"),
        "{text}"
    );
    assert!(stderr(&o).contains("CE: n=2"), "{}", stderr(&o));

    let csv = tmp.path().join("all.csv");
    let o = run(&[
        "report",
        tmp.path().join("runs").to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(csv).unwrap(), text);

    assert_eq!(
        code(&run(&[
            "report",
            tmp.path().join("empty").to_str().unwrap()
        ])),
        2
    );
}

#[test]
fn gradcheck_exit_codes() {
    let o = run(&["gradcheck", "--loss", "supcon", "--trials", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("supcon"));
    assert!(stdout(&o).contains("ok"));

    let o = run(&["gradcheck", "--loss", "hinge"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("triplet_batch_hard"));

    assert_eq!(code(&run(&["gradcheck", "--trials", "0"])), 2);
}

#[test]
fn warmup_meets_cosine_at_peak() {
    // Sanity check on the public schedule helper used by the configs above.
    let s = tailforge::trainer::LrSchedule {
        warmup_epochs: 1,
        peak_lr: 0.01,
        min_lr: 1e-5,
        total_epochs: 4,
    };
    assert_eq!(lr_at(&s, 0).unwrap(), 0.01);
    assert_eq!(lr_at(&s, 3).unwrap(), 1e-5);
}
