//! On-disk layout of one run directory and the readers used by `compare`.

use std::fs;
use std::path::{Path, PathBuf};

use driftbench_core::buffer::BufferStrategy;
use driftbench_core::metrics::AccuracyMatrix;
use driftbench_core::trainer::{MethodKind, RunOutcome};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const METADATA: &str = "metadata.toml";
pub const ACCURACY: &str = "accuracy.csv";
pub const DRIFT: &str = "drift.csv";
pub const TASK1_ACCURACY: &str = "task1_accuracy.csv";
pub const CALIBRATION: &str = "calibration.csv";
pub const LOGIT_NORMS: &str = "logit_norms.csv";
pub const SUMMARY: &str = "summary.csv";
pub const CHECKPOINT: &str = "model.dbck";
pub const EMA_CHECKPOINT: &str = "ema.dbck";
pub const BUFFER_SNAPSHOT: &str = "buffer.dbrb";

/// Files whose bytes depend only on the configuration and seed.
pub const METRIC_FILES: [&str; 6] = [ACCURACY, DRIFT, TASK1_ACCURACY, CALIBRATION, LOGIT_NORMS, SUMMARY];

#[derive(Serialize)]
struct Metadata<'a> {
    format_version: u32,
    version: &'static str,
    seed: u64,
    method: MethodKind,
    wall_time_secs: f64,
    config: &'a ExperimentConfig,
}

/// Fields of `metadata.toml` needed to group runs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunInfo {
    pub dir: PathBuf,
    pub method: MethodKind,
    pub seed: u64,
    pub buffer_size: usize,
    pub buffer_strategy: BufferStrategy,
}

#[derive(Deserialize)]
struct MetadataHead {
    seed: u64,
    method: MethodKind,
    config: ConfigHead,
}

#[derive(Deserialize)]
struct ConfigHead {
    train: TrainHead,
}

#[derive(Deserialize)]
struct TrainHead {
    buffer_size: usize,
    buffer_strategy: BufferStrategy,
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn csv_file(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let to_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Artifact {
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    };
    let mut w = csv::Writer::from_path(path).map_err(to_err)?;
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_files(dir: &Path, cfg: &ExperimentConfig, seed: u64, out: &RunOutcome, wall: f64) -> CliResult<()> {
    let r = &out.report;
    let echo = cfg.for_seed(seed);
    let meta = Metadata {
        format_version: 1,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        method: cfg.method,
        wall_time_secs: wall,
        config: &echo,
    };
    let text = toml::to_string(&meta).map_err(|e| CliError::Config(e.to_string()))?;
    write_bytes(&dir.join(METADATA), text.as_bytes())?;

    let t = r.accuracy.tasks();
    let mut head = vec!["task".to_string()];
    head.extend((1..=t).map(|j| format!("after_task_{j}")));
    let rows: Vec<Vec<String>> = r
        .accuracy
        .rows()
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let mut v = vec![(k + 1).to_string()];
            v.extend(row.iter().map(|a| a.map(num).unwrap_or_default()));
            v
        })
        .collect();
    csv_file(&dir.join(ACCURACY), &head, &rows)?;

    let rows: Vec<Vec<String>> = r
        .drift
        .records()
        .iter()
        .map(|d| vec![d.iteration.to_string(), d.task_id.to_string(), num(d.drift), d.boundary.to_string()])
        .collect();
    csv_file(&dir.join(DRIFT), &header(&["iteration", "task_id", "drift", "boundary"]), &rows)?;

    let rows: Vec<Vec<String>> = r
        .task1_accuracy
        .iter()
        .map(|(i, a)| vec![i.to_string(), num(*a)])
        .collect();
    csv_file(&dir.join(TASK1_ACCURACY), &header(&["iteration", "accuracy"]), &rows)?;

    let rows: Vec<Vec<String>> = r
        .calibration
        .bins
        .iter()
        .enumerate()
        .map(|(i, b)| {
            vec![
                i.to_string(),
                num(b.lower),
                num(b.upper),
                num(b.mean_confidence),
                num(b.accuracy),
                b.count.to_string(),
            ]
        })
        .collect();
    csv_file(
        &dir.join(CALIBRATION),
        &header(&["bin", "lower", "upper", "mean_confidence", "accuracy", "count"]),
        &rows,
    )?;

    let rows: Vec<Vec<String>> = r
        .logit_norms
        .iter()
        .enumerate()
        .map(|(k, s)| vec![(k + 1).to_string(), num(s.mean), num(s.std), s.count.to_string()])
        .collect();
    csv_file(&dir.join(LOGIT_NORMS), &header(&["task", "mean", "std", "count"]), &rows)?;

    csv_file(
        &dir.join(SUMMARY),
        &header(&["last_accuracy", "backward_transfer", "ece", "iterations"]),
        &[vec![
            num(r.last_accuracy),
            r.backward_transfer.map(num).unwrap_or_default(),
            num(r.calibration.ece),
            r.iterations.to_string(),
        ]],
    )?;

    write_bytes(&dir.join(CHECKPOINT), &out.model.to_bytes())?;
    if let Some(ema) = &out.ema {
        write_bytes(&dir.join(EMA_CHECKPOINT), &ema.shadow().to_bytes())?;
    }
    if let Some(buffer) = &out.buffer {
        write_bytes(&dir.join(BUFFER_SNAPSHOT), &buffer.snapshot())?;
    }
    Ok(())
}

/// Writes `<root>/<method>/seed<seed>/`. Files land in a hidden sibling
/// first and the directory is renamed into place once complete; on failure
/// nothing is left behind.
pub fn write_run(
    root: &Path,
    cfg: &ExperimentConfig,
    seed: u64,
    out: &RunOutcome,
    wall: f64,
) -> CliResult<PathBuf> {
    let parent = root.join(cfg.method.name());
    let created_parent = !parent.exists();
    fs::create_dir_all(&parent).map_err(|e| CliError::io(&parent, e))?;
    let target = parent.join(format!("seed{seed}"));
    let tmp = parent.join(format!(".seed{seed}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    }
    let result = fs::create_dir(&tmp)
        .map_err(|e| CliError::io(&tmp, e))
        .and_then(|_| write_files(&tmp, cfg, seed, out, wall))
        .and_then(|_| {
            if target.exists() {
                fs::remove_dir_all(&target).map_err(|e| CliError::io(&target, e))?;
            }
            fs::rename(&tmp, &target).map_err(|e| CliError::io(&target, e))
        });
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        if created_parent {
            let _ = fs::remove_dir(&parent);
        }
        return Err(e);
    }
    Ok(target)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_info(dir: &Path) -> CliResult<RunInfo> {
    let path = dir.join(METADATA);
    let head: MetadataHead = toml::from_str(&read_text(&path)?).map_err(|e| CliError::Artifact {
        path: path.clone(),
        reason: e.message().to_string(),
    })?;
    Ok(RunInfo {
        dir: dir.to_path_buf(),
        method: head.method,
        seed: head.seed,
        buffer_size: head.config.train.buffer_size,
        buffer_strategy: head.config.train.buffer_strategy,
    })
}

/// Parses `accuracy.csv` back into a matrix.
pub fn read_accuracy(dir: &Path) -> CliResult<AccuracyMatrix> {
    let path = dir.join(ACCURACY);
    let bad = |reason: String| CliError::Artifact {
        path: path.clone(),
        reason,
    };
    let text = read_text(&path)?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|f| f.parse::<f64>().map_err(|e| bad(format!("row {}: {e}", i + 1))))
            .collect::<CliResult<Vec<f64>>>()?;
        rows.push(row);
    }
    AccuracyMatrix::from_rows(&rows).map_err(|e| bad(e.to_string()))
}
