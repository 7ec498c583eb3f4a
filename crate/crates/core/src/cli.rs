//! The `tailforge` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure (a non-finite loss or gradient, or a failed gradient check).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::{
    compute_imbalance_ratio, make_long_tail, read_dataset, write_dataset, LongTailSpec,
};
use crate::error::{Error, Result};
use crate::experiment::{
    ablate, ablation_csv, reports_csv, run_experiment, sweep, sweep_csv, threads_from_env,
    write_text, ExperimentConfig, RunReport, REPORT_FILE,
};
use crate::losses::check::{check_loss, LOSS_NAMES, TOLERANCE};
use crate::metrics::aggregate_runs;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "tailforge",
    version,
    about = "Two-stage training for class-imbalanced classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Subsample a dataset file to an exponential long-tail profile.
    MakeLt {
        #[arg(long)]
        input: PathBuf,
        /// Target imbalance ratio N_max / N_min (≥ 1).
        #[arg(long)]
        rho: f64,
        /// Size of the largest class; defaults to the input's smallest class.
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; `.csv` writes CSV, anything else the binary format.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train one method and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train at every grid value × seed and print a CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "lambda")]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
        /// Defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Also keep per-cell outputs and write `sweep.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the CE / SC / cRW ablation grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        /// `all` or one loss name.
        #[arg(long, default_value = "all")]
        loss: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Collect report files into one CSV row per (method, seed).
    Report {
        /// Report files, or directories searched recursively for them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_USAGE
    }
}

/// Parse `args` (program name first) and run the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8> {
    match command {
        Command::MakeLt {
            input,
            rho,
            n_max,
            seed,
            output,
        } => make_lt(&input, rho, n_max, seed, &output, out),
        Command::Train {
            config,
            seed,
            out: dir,
        } => train(&config, seed, &dir, out),
        Command::Sweep {
            config,
            param,
            grid,
            seeds,
            out: dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let rows = sweep(
                &cfg,
                &param,
                &grid,
                &seeds,
                dir.as_deref(),
                threads_from_env()?,
            )?;
            let csv = sweep_csv(&param, &rows);
            if let Some(dir) = dir {
                write_text(dir.join("sweep.csv"), &csv)?;
            }
            write_out(out, &csv)?;
            Ok(EXIT_OK)
        }
        Command::Ablate {
            config,
            out: dir,
            seeds,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let rows = ablate(&cfg, &seeds, Some(&dir), threads_from_env()?)?;
            let csv = ablation_csv(&rows);
            write_text(dir.join("ablation.csv"), &csv)?;
            let runs: Vec<RunReport> = rows.iter().flat_map(|r| r.runs.iter().cloned()).collect();
            write_text(dir.join("ablation_runs.csv"), &reports_csv(&runs))?;
            write_out(out, &csv)?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck { loss, trials, seed } => gradcheck(&loss, trials, seed, out),
        Command::Report { inputs, out: file } => report(&inputs, file.as_deref(), out, err),
    }
}

fn write_out(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn make_lt(
    input: &Path,
    rho: f64,
    n_max: Option<usize>,
    seed: u64,
    output: &Path,
    out: &mut dyn Write,
) -> Result<u8> {
    let ds = read_dataset(input)?;
    let n_max = match n_max {
        Some(n) => n,
        None => ds.counts().iter().copied().min().unwrap_or(0),
    };
    let lt = make_long_tail(&ds, &LongTailSpec::new(rho, n_max, seed))?;
    write_dataset(&lt, output)?;
    let counts = lt.class_counts()?;
    let listed: Vec<String> = counts.as_slice().iter().map(ToString::to_string).collect();
    write_out(
        out,
        &format!(
            "counts: {}\nn_max: {}\nn_min: {}\nrho: {:.3}\n",
            listed.join(" "),
            counts.max(),
            counts.min(),
            compute_imbalance_ratio(&counts)
        ),
    )?;
    Ok(EXIT_OK)
}

fn train(config: &Path, seed: Option<u64>, dir: &Path, out: &mut dyn Write) -> Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.seed);
    let run = run_experiment(&cfg, cfg.method, seed)?;
    run.write(dir)?;
    let e = &run.report.eval;
    write_out(
        out,
        &format!(
            "{} seed {}: mcr_all {:.2}  mcr_major {:.2}  mcr_minor {:.2}\n",
            run.report.method, seed, e.mcr_all, e.mcr_major, e.mcr_minor
        ),
    )?;
    Ok(EXIT_OK)
}

fn gradcheck(loss: &str, trials: usize, seed: u64, out: &mut dyn Write) -> Result<u8> {
    if trials == 0 {
        return Err(Error::invalid("--trials must be at least 1"));
    }
    let names: Vec<&str> = if loss == "all" {
        LOSS_NAMES.to_vec()
    } else if LOSS_NAMES.contains(&loss) {
        vec![loss]
    } else {
        return Err(Error::invalid(format!(
            "unknown loss `{loss}`; valid names: all, {}",
            LOSS_NAMES.join(", ")
        )));
    };
    let mut table = format!("{:<20} {:>14}  status\n", "loss", "max_rel_error");
    let mut all_ok = true;
    for name in names {
        let worst = check_loss(name, trials, seed)?;
        let ok = worst < TOLERANCE;
        all_ok &= ok;
        table.push_str(&format!(
            "{name:<20} {worst:>14.3e}  {}\n",
            if ok { "ok" } else { "FAIL" }
        ));
    }
    write_out(out, &table)?;
    Ok(if all_ok { EXIT_OK } else { EXIT_NUMERIC })
}

fn collect_reports(path: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                collect_reports(&p, found)?;
            } else if p.file_name().is_some_and(|n| n == REPORT_FILE) {
                found.push(p);
            }
        }
    } else {
        found.push(path.to_path_buf());
    }
    Ok(())
}

fn report(
    inputs: &[PathBuf],
    file: Option<&Path>,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Result<u8> {
    let mut paths = Vec::new();
    for p in inputs {
        collect_reports(p, &mut paths)?;
    }
    if paths.is_empty() {
        return Err(Error::invalid("no report files found"));
    }
    let reports = paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<RunReport>(&text).map_err(|e| Error::Format {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = reports_csv(&reports);
    match file {
        Some(f) => write_text(f, &csv)?,
        None => write_out(out, &csv)?,
    }
    // Per-method mean ± std as a human-readable trailer.
    let mut methods: Vec<String> = reports.iter().map(|r| r.method.to_string()).collect();
    methods.sort();
    methods.dedup();
    let summary: &mut dyn Write = if file.is_some() { out } else { err };
    for m in methods {
        let evals: Vec<_> = reports
            .iter()
            .filter(|r| r.method.to_string() == m)
            .map(|r| r.eval.clone())
            .collect();
        let agg = aggregate_runs(&evals)?;
        let _ = writeln!(
            summary,
            "{m}: n={} all {:.2}±{:.2} major {:.2}±{:.2} minor {:.2}±{:.2}",
            agg.runs,
            agg.mcr_all.mean,
            agg.mcr_all.std,
            agg.mcr_major.mean,
            agg.mcr_major.std,
            agg.mcr_minor.mean,
            agg.mcr_minor.std
        );
    }
    Ok(EXIT_OK)
}
