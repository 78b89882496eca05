use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use driftbench_core::buffer::{BufferStrategy, ReplayBuffer};
use driftbench_core::gradcheck::{run_suite, CheckResult, SuiteSettings};
use driftbench_core::metrics::{backward_transfer, last_accuracy};
use driftbench_core::trainer::{run_experiment, MethodKind, NoObserver};
use driftbench_core::Error;
use rayon::prelude::*;
use walkdir::WalkDir;

use crate::artifacts::{self, RunInfo};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Tolerance applied to every gradient check.
pub const GRADCHECK_TOL: f64 = 1e-4;

fn io_out(e: std::io::Error) -> CliError {
    CliError::io("<stdout>", e)
}

/// Trains one run per seed (concurrently) and writes each run directory.
pub fn run(cfg: &ExperimentConfig, out: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let root = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("out: an output directory is required".into()))?;
    let (tasks, classes) = cfg.tasks()?;
    let results: Vec<CliResult<(PathBuf, f64, Option<f64>)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut train = cfg.train.clone();
            train.seed = seed;
            let start = Instant::now();
            let outcome = run_experiment(cfg.method, &tasks, classes, &train, &mut NoObserver)?;
            let wall = start.elapsed().as_secs_f64();
            let dir = artifacts::write_run(&root, cfg, seed, &outcome, wall)?;
            Ok((dir, outcome.report.last_accuracy, outcome.report.backward_transfer))
        })
        .collect();
    let mut dirs = Vec::with_capacity(results.len());
    for r in results {
        let (dir, acc, bwt) = r?;
        let bwt = bwt.map(|b| format!("{b:.4}")).unwrap_or_else(|| "n/a".into());
        writeln!(out, "{}  A_last={acc:.4}  BWT={bwt}", dir.display()).map_err(io_out)?;
        dirs.push(dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareMetric {
    LastAccuracy,
    Bwt,
}

impl std::str::FromStr for CompareMetric {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "last_accuracy" => Ok(Self::LastAccuracy),
            "bwt" => Ok(Self::Bwt),
            other => Err(CliError::Config(format!(
                "metric `{other}` (expected last_accuracy or bwt)"
            ))),
        }
    }
}

/// Median and population standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        Some(Self {
            median,
            std: var.sqrt(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: MethodKind,
    /// `None` for methods without a buffer.
    pub buffer_strategy: Option<BufferStrategy>,
    pub buffer_size: usize,
    pub seeds: usize,
    pub last_accuracy: Spread,
    /// Absent for single-task runs.
    pub bwt: Option<Spread>,
}

fn strategy_name(s: Option<BufferStrategy>) -> &'static str {
    match s {
        Some(BufferStrategy::Reservoir) => "reservoir",
        Some(BufferStrategy::Irs) => "irs",
        None => "none",
    }
}

/// Run directories (those holding a metadata file) under each path.
pub fn find_runs(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for p in paths {
        if !p.is_dir() {
            return Err(CliError::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
            ));
        }
        let before = runs.len();
        for entry in WalkDir::new(p).sort_by_file_name() {
            let entry = entry.map_err(|e| CliError::io(p, e.into()))?;
            let hidden = entry.file_name().to_string_lossy().starts_with('.');
            if entry.file_type().is_dir() && !hidden && entry.path().join(artifacts::METADATA).is_file() {
                runs.push(entry.path().to_path_buf());
            }
        }
        if runs.len() == before {
            return Err(CliError::Artifact {
                path: p.clone(),
                reason: format!("no run directories (missing {})", artifacts::METADATA),
            });
        }
    }
    runs.sort();
    runs.dedup();
    Ok(runs)
}

/// Groups runs by method and buffer setup, recomputing A_last and BWT from
/// each accuracy matrix.
pub fn summarize(paths: &[PathBuf], metric: CompareMetric) -> CliResult<Vec<SummaryRow>> {
    type Key = (MethodKind, usize, &'static str);
    let mut groups: BTreeMap<Key, (Option<BufferStrategy>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for dir in find_runs(paths)? {
        let RunInfo {
            method,
            buffer_size,
            buffer_strategy,
            ..
        } = artifacts::read_info(&dir)?;
        let m = artifacts::read_accuracy(&dir)?;
        let (buffer_strategy, buffer_size) = match method.uses_buffer() {
            true => (Some(buffer_strategy), buffer_size),
            false => (None, 0),
        };
        let g = groups
            .entry((method, buffer_size, strategy_name(buffer_strategy)))
            .or_insert_with(|| (buffer_strategy, Vec::new(), Vec::new()));
        g.1.push(last_accuracy(&m)?);
        if m.tasks() >= 2 {
            g.2.push(backward_transfer(&m)?);
        }
    }
    let mut rows: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((method, buffer_size, _), (strategy, acc, bwt))| SummaryRow {
            method,
            buffer_strategy: strategy,
            buffer_size,
            seeds: acc.len(),
            last_accuracy: Spread::of(&acc).expect("group has at least one run"),
            bwt: Spread::of(&bwt),
        })
        .collect();
    let key = |r: &SummaryRow| match metric {
        CompareMetric::LastAccuracy => r.last_accuracy.median,
        CompareMetric::Bwt => r.bwt.map_or(f64::NEG_INFINITY, |s| s.median),
    };
    rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
    Ok(rows)
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "method",
    "buffer_strategy",
    "buffer_size",
    "seeds",
    "last_accuracy_median",
    "last_accuracy_std",
    "bwt_median",
    "bwt_std",
];

struct Table<'a>(&'a [SummaryRow]);

impl fmt::Display for Table<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:<10} {:>6} {:>5} {:>17} {:>17}",
            "method", "strategy", "buffer", "seeds", "A_last (%)", "BWT (%)"
        )?;
        for r in self.0 {
            let bwt = r
                .bwt
                .map(|s| format!("{:.2} ± {:.2}", 100.0 * s.median, 100.0 * s.std))
                .unwrap_or_else(|| "n/a".into());
            writeln!(
                f,
                "{:<8} {:<10} {:>6} {:>5} {:>17} {:>17}",
                r.method.name(),
                strategy_name(r.buffer_strategy),
                r.buffer_size,
                r.seeds,
                format!("{:.2} ± {:.2}", 100.0 * r.last_accuracy.median, 100.0 * r.last_accuracy.std),
                bwt
            )?;
        }
        Ok(())
    }
}

pub fn compare(
    paths: &[PathBuf],
    metric: CompareMetric,
    summary: &Path,
    out: &mut dyn Write,
) -> CliResult<Vec<SummaryRow>> {
    let rows = summarize(paths, metric)?;
    let io = |e: csv::Error| CliError::Artifact {
        path: summary.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(summary).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => CliError::io(summary, e),
        k => CliError::Artifact {
            path: summary.to_path_buf(),
            reason: format!("{k:?}"),
        },
    })?;
    w.write_record(SUMMARY_HEADER).map_err(io)?;
    for r in &rows {
        let (bm, bs) = r
            .bwt
            .map(|s| (s.median.to_string(), s.std.to_string()))
            .unwrap_or_default();
        w.write_record([
            r.method.name().to_string(),
            strategy_name(r.buffer_strategy).to_string(),
            r.buffer_size.to_string(),
            r.seeds.to_string(),
            r.last_accuracy.median.to_string(),
            r.last_accuracy.std.to_string(),
            bm,
            bs,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(summary, e))?;
    write!(out, "{}", Table(&rows)).map_err(io_out)?;
    Ok(rows)
}

/// Counts recovered from a buffer snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferCounts {
    pub capacity: usize,
    pub seen: u64,
    pub epochs: Vec<usize>,
    pub tasks: Vec<usize>,
}

impl BufferCounts {
    /// Epoch holding the most entries; ties go to the earliest.
    pub fn modal_epoch(&self) -> Option<usize> {
        let max = *self.epochs.iter().max()?;
        (max > 0).then(|| self.epochs.iter().position(|&c| c == max).unwrap())
    }
}

pub fn default_counts_path(snapshot: &Path) -> PathBuf {
    let mut name = snapshot.file_name().unwrap_or_default().to_os_string();
    name.push(".counts.csv");
    snapshot.with_file_name(name)
}

pub fn inspect_buffer(snapshot: &Path, counts: &Path, out: &mut dyn Write) -> CliResult<BufferCounts> {
    let bytes = std::fs::read(snapshot).map_err(|e| CliError::io(snapshot, e))?;
    let buffer = ReplayBuffer::restore(&bytes)?;
    let c = BufferCounts {
        capacity: buffer.capacity(),
        seen: buffer.seen(),
        epochs: buffer.epoch_histogram(),
        tasks: buffer.task_histogram(),
    };
    writeln!(
        out,
        "capacity {}  stored {}  seen {}",
        c.capacity,
        buffer.len(),
        c.seen
    )
    .map_err(io_out)?;
    if buffer.is_empty() {
        writeln!(out, "buffer is empty").map_err(io_out)?;
    } else {
        writeln!(out, "epoch of origin:").map_err(io_out)?;
        for (e, n) in c.epochs.iter().enumerate() {
            writeln!(out, "  {e:>4} | {:<40} {n}", "#".repeat((*n).min(40))).map_err(io_out)?;
        }
        writeln!(out, "per task:").map_err(io_out)?;
        for (t, n) in c.tasks.iter().enumerate() {
            writeln!(out, "  task {:>3}: {n}", t + 1).map_err(io_out)?;
        }
    }

    let mut text = String::from("kind,index,count\n");
    for (e, n) in c.epochs.iter().enumerate() {
        text.push_str(&format!("epoch,{e},{n}\n"));
    }
    for (t, n) in c.tasks.iter().enumerate() {
        text.push_str(&format!("task,{},{n}\n", t + 1));
    }
    std::fs::write(counts, text).map_err(|e| CliError::io(counts, e))?;
    Ok(c)
}

/// Runs the finite-difference suite; any error at or above the tolerance is
/// a numeric failure.
pub fn gradcheck(settings: &SuiteSettings, out: &mut dyn Write) -> CliResult<Vec<CheckResult>> {
    let results = run_suite(settings)?;
    for r in &results {
        let verdict = if r.max_rel_err < GRADCHECK_TOL { "ok" } else { "FAIL" };
        writeln!(out, "{:<24} {:.3e}  {verdict}", r.loss, r.max_rel_err).map_err(io_out)?;
    }
    if let Some(bad) = results.iter().find(|r| !(r.max_rel_err < GRADCHECK_TOL)) {
        return Err(Error::Numeric(format!(
            "{} gradient error {:e} exceeds {GRADCHECK_TOL:e}",
            bad.loss, bad.max_rel_err
        ))
        .into());
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spread_of_single_value_has_zero_std() {
        let s = Spread::of(&[0.7]).unwrap();
        assert_eq!(s.median, 0.7);
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn spread_even_count_averages_middle() {
        let s = Spread::of(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metric_names_parse() {
        assert_eq!("bwt".parse::<CompareMetric>().unwrap(), CompareMetric::Bwt);
        assert!("forgetting".parse::<CompareMetric>().is_err());
    }

    #[test]
    fn counts_path_sits_next_to_snapshot() {
        assert_eq!(
            default_counts_path(Path::new("/a/b/buffer.dbrb")),
            PathBuf::from("/a/b/buffer.dbrb.counts.csv")
        );
    }

    #[test]
    fn modal_epoch_of_empty_histogram_is_none() {
        let c = BufferCounts {
            capacity: 5,
            seen: 0,
            epochs: vec![],
            tasks: vec![],
        };
        assert_eq!(c.modal_epoch(), None);
    }
}
