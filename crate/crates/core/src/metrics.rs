//! Accuracy-matrix summaries, representation drift, calibration and logit
//! norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DualHeadModel;

/// `a[k][j]`: accuracy on task `k`'s test set after training through task
/// `j`. Indices are 0-based in this API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    cells: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        Self {
            tasks,
            cells: vec![None; tasks * tasks],
        }
    }

    /// Builds a fully populated matrix from rows `a[k][·]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let mut m = Self::new(t);
        for (k, row) in rows.iter().enumerate() {
            if row.len() != t {
                return Err(Error::Dimension {
                    op: "accuracy matrix",
                    left: vec![t, t],
                    right: vec![k, row.len()],
                });
            }
            for (j, v) in row.iter().enumerate() {
                m.set(k, j, *v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, task: usize, after: usize, acc: f64) -> Result<()> {
        if task >= self.tasks || after >= self.tasks {
            return Err(Error::Dimension {
                op: "accuracy matrix index",
                left: vec![self.tasks, self.tasks],
                right: vec![task, after],
            });
        }
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Value(format!("accuracy {acc} outside [0, 1]")));
        }
        self.cells[task * self.tasks + after] = Some(acc);
        Ok(())
    }

    pub fn get(&self, task: usize, after: usize) -> Option<f64> {
        if task >= self.tasks || after >= self.tasks {
            return None;
        }
        self.cells[task * self.tasks + after]
    }

    fn required(&self, task: usize, after: usize) -> Result<f64> {
        self.get(task, after).ok_or_else(|| {
            Error::State(format!(
                "accuracy of task {} after task {} is missing",
                task + 1,
                after + 1
            ))
        })
    }

    /// Rows of the matrix with missing cells as `None`.
    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.cells.chunks(self.tasks.max(1)).map(|r| r.to_vec()).take(self.tasks).collect()
    }
}

/// Mean of the final column.
pub fn last_accuracy(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t == 0 {
        return Err(Error::State("empty accuracy matrix".into()));
    }
    let mut total = 0.0;
    for k in 0..t {
        total += m.required(k, t - 1)?;
    }
    Ok(total / t as f64)
}

/// `(1/(T−1))·Σ_{j<T} (a[j][T] − a[j][j])`; negative values mean forgetting.
pub fn backward_transfer(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.tasks();
    if t < 2 {
        return Err(Error::UndefinedMetric(format!(
            "backward transfer needs at least 2 tasks, got {t}"
        )));
    }
    let mut total = 0.0;
    for j in 0..t - 1 {
        total += m.required(j, t - 1)? - m.required(j, j)?;
    }
    Ok(total / (t - 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub iteration: u64,
    /// 1-based task being trained when the probe fired.
    pub task_id: usize,
    pub drift: f64,
    /// First probe after a task switch.
    pub boundary: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DriftSeries {
    records: Vec<DriftRecord>,
}

impl DriftSeries {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[DriftRecord] {
        &self.records
    }

    pub fn push(&mut self, r: DriftRecord) -> Result<()> {
        if !(r.drift >= 0.0) {
            return Err(Error::Value(format!("drift must be non-negative, got {}", r.drift)));
        }
        if let Some(last) = self.records.last() {
            if r.iteration <= last.iteration {
                return Err(Error::State(format!(
                    "drift iteration {} does not follow {}",
                    r.iteration, last.iteration
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    /// Largest drift among the first `probes` records of each task.
    pub fn early_max_per_task(&self, probes: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((t, max, n)) if *t == r.task_id => {
                    if *n < probes {
                        *max = max.max(r.drift);
                        *n += 1;
                    }
                }
                _ if probes > 0 => out.push((r.task_id, r.drift, 1)),
                _ => {}
            }
        }
        out.into_iter().map(|(t, m, _)| (t, m)).collect()
    }
}

/// Mean ℓ2 distance between the representations of `probes` under two
/// encoders.
pub fn representation_drift(
    previous: &DualHeadModel,
    current: &DualHeadModel,
    probes: &[f64],
) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::State("drift needs at least one probe input".into()));
    }
    if previous.config() != current.config() {
        return Err(Error::State("drift snapshots have different shapes".into()));
    }
    let a = previous.encode(probes)?;
    let b = current.encode(probes)?;
    mean_row_distance(&a, &b, previous.config().repr_dim)
}

/// Mean row-wise ℓ2 distance between two equally shaped row-major matrices.
pub fn mean_row_distance(a: &[f64], b: &[f64], cols: usize) -> Result<f64> {
    if a.len() != b.len() || cols == 0 || a.len() % cols != 0 || a.is_empty() {
        return Err(Error::Dimension {
            op: "mean_row_distance",
            left: vec![a.len()],
            right: vec![b.len(), cols],
        });
    }
    let rows = a.len() / cols;
    let total: f64 = a
        .chunks(cols)
        .zip(b.chunks(cols))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / rows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    /// Zero for empty bins.
    pub mean_confidence: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
}

/// Expected calibration error over equal-width, right-closed bins; a
/// confidence of exactly 0 falls into the first bin.
pub fn ece(confidences: &[f64], correct: &[bool], bins: usize) -> Result<CalibrationReport> {
    if confidences.is_empty() || bins == 0 {
        return Err(Error::Value("ece needs samples and at least one bin".into()));
    }
    if confidences.len() != correct.len() {
        return Err(Error::Dimension {
            op: "ece",
            left: vec![confidences.len()],
            right: vec![correct.len()],
        });
    }
    let mut conf_sum = vec![0.0; bins];
    let mut hits = vec![0usize; bins];
    let mut counts = vec![0usize; bins];
    for (&c, &ok) in confidences.iter().zip(correct) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Value(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * bins as f64).ceil() as usize).saturating_sub(1).min(bins - 1);
        conf_sum[b] += c;
        hits[b] += usize::from(ok);
        counts[b] += 1;
    }
    let n = confidences.len() as f64;
    let mut total = 0.0;
    let out = (0..bins)
        .map(|b| {
            let (mean_confidence, accuracy) = if counts[b] == 0 {
                (0.0, 0.0)
            } else {
                let k = counts[b] as f64;
                (conf_sum[b] / k, hits[b] as f64 / k)
            };
            total += counts[b] as f64 / n * (mean_confidence - accuracy).abs();
            CalibrationBin {
                lower: b as f64 / bins as f64,
                upper: (b + 1) as f64 / bins as f64,
                mean_confidence,
                accuracy,
                count: counts[b],
            }
        })
        .collect();
    Ok(CalibrationReport {
        bins: out,
        ece: total,
    })
}

/// Maximum softmax probability of each row.
pub fn max_softmax(logits: &[f64], cols: usize) -> Vec<f64> {
    logits
        .chunks(cols)
        .map(|row| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            1.0 / z
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitNormStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub count: usize,
}

/// Mean and standard deviation of row-wise ℓ2 norms.
pub fn logit_norm_stats(logits: &[f64], cols: usize) -> Result<LogitNormStats> {
    if logits.is_empty() || cols == 0 || logits.len() % cols != 0 {
        return Err(Error::Dimension {
            op: "logit_norm_stats",
            left: vec![logits.len()],
            right: vec![cols],
        });
    }
    let norms: Vec<f64> = logits
        .chunks(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    let var = norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(LogitNormStats {
        mean,
        std: var.sqrt(),
        count: norms.len(),
    })
}
