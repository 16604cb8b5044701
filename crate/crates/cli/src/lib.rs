//! Subcommands behind the `neurotrain` binary. Each returns the process exit
//! code; errors bubbling out as `Err` map to [`EXIT_ERROR`].

pub mod config;

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context};
use neurotrain::campaign::{parse_jsonl, run_campaign_with, write_jsonl, CampaignHooks, Cell};
use neurotrain::model::save_checkpoint;
use neurotrain::{report_matrix, resolve_data_dir, run_custom, Error, ExperimentRecord, MatrixReport, Status};

pub use config::{ConfigError, ConfigFile, Experiment};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CELLS_FAILED: i32 = 2;
pub const EXIT_INTERRUPTED: i32 = 130;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const LOG_FILE: &str = "training_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Flags shared by `run` and `campaign`.
#[derive(Debug, Clone, Default)]
pub struct RunArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub parallelism: Option<usize>,
}

struct Resolved {
    config: ConfigFile,
    out: PathBuf,
    data_dir: PathBuf,
}

fn resolve(args: &RunArgs) -> anyhow::Result<Resolved> {
    let config = ConfigFile::load(&args.config)?;
    let out = match (&args.out, &config.out) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => config::relative_to(&args.config, p),
        (None, None) => config::relative_to(&args.config, Path::new("results")),
    };
    let from_config = config.data_dir.as_ref().map(|p| config::relative_to(&args.config, p));
    let data_dir = resolve_data_dir(args.data_dir.as_deref().or(from_config.as_deref()));
    fs::create_dir_all(&out).with_context(|| format!("creating output directory {}", out.display()))?;
    Ok(Resolved { config, out, data_dir })
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes to a sibling temp file and renames it into place.
fn replace_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, contents)?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {} into place", tmp.display()))
}

fn count(records: &[ExperimentRecord], status: Status) -> usize {
    records.iter().filter(|r| r.status == status).count()
}

fn summary(records: &[ExperimentRecord], matrix: &MatrixReport, interrupted: bool) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{} records: {} ok, {} not supported, {} failed{}\n\n",
        records.len(),
        count(records, Status::Ok),
        count(records, Status::NotSupported),
        count(records, Status::Failed),
        if interrupted {
            " (interrupted, partial results)"
        } else {
            ""
        }
    ));
    s.push_str(&matrix.to_text());
    let failed: Vec<&ExperimentRecord> = records.iter().filter(|r| r.status == Status::Failed).collect();
    if !failed.is_empty() {
        s.push_str("\nfailures:\n");
        for r in failed {
            s.push_str(&format!(
                "  {} / {} / {} trial {}: {}\n",
                r.trainer,
                r.model,
                r.dataset,
                r.trial,
                r.message.as_deref().unwrap_or("")
            ));
        }
    }
    s
}

fn write_outputs(out: &Path, records: &[ExperimentRecord], interrupted: bool) -> anyhow::Result<String> {
    replace_file(&out.join(RESULTS_FILE), &write_jsonl(records))?;
    let matrix = report_matrix(records, "test_acc")?;
    replace_file(&out.join(MATRIX_FILE), &matrix.to_csv())?;
    let text = summary(records, &matrix, interrupted);
    replace_file(&out.join(SUMMARY_FILE), &text)?;
    Ok(text)
}

/// Campaign mode: every trainer × model × dataset cell.
pub fn cmd_campaign(args: &RunArgs, cancel: &AtomicBool) -> anyhow::Result<i32> {
    let r = resolve(args)?;
    let Experiment::Campaign(mut spec) = r.config.experiment else {
        bail!(
            "{}: `mode` is \"custom\"; use the `run` subcommand",
            args.config.display()
        );
    };
    if let Some(p) = args.parallelism {
        if p == 0 {
            bail!("--parallelism must be at least 1");
        }
        spec.parallelism = p;
    }
    // Completed records stream here so a hard kill still leaves them on disk;
    // the final write replaces the file in cell order.
    let results = r.out.join(RESULTS_FILE);
    let stream = Mutex::new(File::create(&results).with_context(|| format!("creating {}", results.display()))?);
    let on_record = |rec: &ExperimentRecord| {
        let mut f = stream.lock().expect("record writer");
        let _ = writeln!(f, "{}", rec.to_json_line());
        let _ = f.flush();
    };
    let hooks = CampaignHooks {
        cancel: Some(cancel),
        on_record: Some(&on_record),
    };
    let records = match run_campaign_with(&spec, &r.data_dir, hooks) {
        Ok(records) => records,
        Err(e) => {
            let _ = fs::remove_file(&results);
            return Err(e.into());
        }
    };
    let interrupted = cancel.load(Ordering::Relaxed);
    let text = write_outputs(&r.out, &records, interrupted)?;
    print!("{text}");
    println!("wrote {}", r.out.display());
    Ok(if interrupted {
        EXIT_INTERRUPTED
    } else if count(&records, Status::Failed) > 0 {
        EXIT_CELLS_FAILED
    } else {
        EXIT_OK
    })
}

/// Custom mode: one experiment, plus its epoch log and final checkpoint.
pub fn cmd_run(args: &RunArgs, cancel: &AtomicBool) -> anyhow::Result<i32> {
    let r = resolve(args)?;
    let Experiment::Custom(spec) = r.config.experiment else {
        bail!(
            "{}: `mode` is \"campaign\"; use the `campaign` subcommand",
            args.config.display()
        );
    };
    let trained = match run_custom(&spec, &r.data_dir, Some(cancel)) {
        Ok(t) => t,
        Err(Error::Interrupted) => {
            eprintln!("interrupted before the experiment finished; nothing written");
            return Ok(EXIT_INTERRUPTED);
        }
        Err(e @ (Error::Incompatible(_) | Error::Config(_) | Error::Io { .. } | Error::Format(_))) => {
            return Err(e.into());
        }
        Err(e) => {
            let cell = Cell {
                trainer: spec.trainer.clone(),
                model: spec.model.display_name(),
                dataset: spec.dataset.name(),
                unsupported: None,
            };
            let mut rec = ExperimentRecord::blank(&cell, 0, spec.seed, Status::Failed);
            rec.hyperparams = spec.hyperparams.clone();
            rec.message = Some(e.to_string());
            let text = write_outputs(&r.out, &[rec], false)?;
            print!("{text}");
            return Ok(EXIT_CELLS_FAILED);
        }
    };
    write_file(&r.out.join(LOG_FILE), &trained.log.to_jsonl())?;
    save_checkpoint(&trained.model, &r.out.join(CHECKPOINT_FILE))?;
    let text = write_outputs(&r.out, std::slice::from_ref(&trained.record), false)?;
    for e in &trained.log.epochs {
        println!("epoch {:>3}  train {:.4}  test {:.4}", e.epoch, e.train_acc, e.test_acc);
    }
    print!("{text}");
    println!("wrote {}", r.out.display());
    Ok(EXIT_OK)
}

/// CSV path for a report: `matrix.csv` for test accuracy, suffixed otherwise.
pub fn report_csv_path(results: &Path, metric: &str) -> PathBuf {
    let name = if metric == "test_acc" {
        MATRIX_FILE.to_string()
    } else {
        format!("matrix_{metric}.csv")
    };
    results.with_file_name(name)
}

/// Renders a results file as a model/dataset × trainer matrix.
pub fn cmd_report(results: &Path, metric: &str) -> anyhow::Result<i32> {
    let text = fs::read_to_string(results).with_context(|| format!("reading {}", results.display()))?;
    let records = parse_jsonl(&text).with_context(|| format!("parsing {}", results.display()))?;
    let matrix = report_matrix(&records, metric)?;
    let csv = report_csv_path(results, metric);
    write_file(&csv, &matrix.to_csv())?;
    print!("{}", matrix.to_text());
    println!("wrote {}", csv.display());
    Ok(EXIT_OK)
}
