//! Differentiable objectives for dual-head training.
//!
//! All losses take tape variables and return scalar variables. Batches flow
//! through a bound model ([`ModelVars`]) when a loss needs fresh outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelVars;
use crate::tensor::{Tape, Var};

/// Guard for normalizing all-zero logit rows.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Gaussian similarity over pairwise logit distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimilarityParams {
    /// Peak value of the similarity curve (reached at `d = mu`).
    pub c1: f64,
    pub mu: f64,
    pub sigma_sq: f64,
    /// Similarities are clamped to `[clamp_eps, 1 − clamp_eps]`.
    pub clamp_eps: f64,
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self {
            c1: 1.0,
            mu: 0.0,
            sigma_sq: 0.5,
            clamp_eps: 1e-7,
        }
    }
}

impl SimilarityParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.sigma_sq > 0.0) {
            return Err(Error::Config("similarity c1 and sigma_sq must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.clamp_eps) {
            return Err(Error::Config("clamp_eps must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Logit-consistency weight on replayed samples.
    pub alpha: f64,
    /// Classification weight on replayed samples.
    pub beta: f64,
    /// Supervised-contrastive weight.
    pub sw: f64,
    /// Supervised-contrastive temperature.
    pub st: f64,
    pub w_div: f64,
    pub w_adapt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.2,
            sw: 0.05,
            st: 0.8,
            w_div: 0.1,
            w_adapt: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.sw, self.st, self.w_div, self.w_adapt];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if !(self.st > 0.0) {
            return Err(Error::Config(format!(
                "contrastive temperature must be positive, got {}",
                self.st
            )));
        }
        if [self.alpha, self.beta, self.sw].iter().any(|v| *v < 0.0) {
            return Err(Error::Config("alpha, beta and sw must be non-negative".into()));
        }
        Ok(())
    }
}

/// Switches that drop individual loss terms for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossAblation {
    /// Drop the current-batch classification objective.
    pub drop_first_task: bool,
    /// Drop the discrepancy-maximization term.
    pub drop_discrepancy: bool,
    /// Drop the replay consistency objective.
    pub drop_consistency: bool,
    /// Drop the discrepancy-minimization term.
    pub drop_adaptation: bool,
}

/// Whether discrepancy uses `f1` as the fixed reference or averages both
/// role orders.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscrepancyMode {
    Directed,
    #[default]
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Divergence,
    Adaptation,
    Refinement,
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension {
            op: "labels",
            left: vec![rows],
            right: vec![labels.len()],
        });
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::Label {
                row,
                label,
                classes,
            });
        }
    }
    Ok(())
}

fn dims(x: &Var<'_>, op: &'static str) -> Result<(usize, usize)> {
    match x.shape().as_slice() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Dimension {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

/// Mean negative log-likelihood of `labels` under row-wise softmax.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let (n, c) = dims(&logits, "cross_entropy")?;
    check_labels(labels, n, c)?;
    if n == 0 {
        return Err(Error::BatchTooSmall {
            op: "cross_entropy",
            need: 1,
            got: 0,
        });
    }
    let mut w = vec![0.0; n * c];
    for (i, &y) in labels.iter().enumerate() {
        w[i * c + y] = -1.0 / n as f64;
    }
    logits.log_softmax()?.weighted_sum(&w)
}

/// Supervised contrastive loss over ℓ2-normalized rows at temperature `st`.
/// Anchors without positives are skipped; with none at all the loss is 0.
pub fn sup_contrastive<'t>(outputs: Var<'t>, labels: &[usize], st: f64) -> Result<Var<'t>> {
    let (n, _) = dims(&outputs, "sup_contrastive")?;
    if n < 2 {
        return Err(Error::BatchTooSmall {
            op: "sup_contrastive",
            need: 2,
            got: n,
        });
    }
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "sup_contrastive",
            left: vec![n],
            right: vec![labels.len()],
        });
    }
    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&p| p != i && labels[p] == labels[i]).count())
        .collect();
    let anchors = positives.iter().filter(|p| **p > 0).count();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        for p in (0..n).filter(|&p| p != i && labels[p] == labels[i]) {
            w[i * n + p] = -1.0 / (positives[i] as f64 * anchors as f64);
        }
    }
    let v = outputs.l2_normalize_rows(NORMALIZE_EPS)?;
    let logits = v.matmul(&v.transpose()?)?.scale(1.0 / st);
    logits.log_softmax_off_diagonal()?.weighted_sum(&w)
}

/// Clamped Gaussian similarity `c1·exp(−(d−μ)²/(2σ²))`.
pub fn similarity<'t>(distances: Var<'t>, sp: &SimilarityParams) -> Var<'t> {
    distances
        .gaussian(sp.mu, sp.sigma_sq, sp.c1)
        .clamp(sp.clamp_eps, 1.0 - sp.clamp_eps)
}

/// Mean over pairs of `p·log q + (1−p)·log(1−q)`, where `p` is the
/// similarity structure of `reference` (held constant) and `q` that of
/// `other`. Minimizing it pushes the two structures apart.
pub fn discrepancy<'t>(
    reference: Var<'t>,
    other: Var<'t>,
    sp: &SimilarityParams,
) -> Result<Var<'t>> {
    let (n1, c1) = dims(&reference, "discrepancy")?;
    let (n2, c2) = dims(&other, "discrepancy")?;
    if (n1, c1) != (n2, c2) {
        return Err(Error::Dimension {
            op: "discrepancy",
            left: vec![n1, c1],
            right: vec![n2, c2],
        });
    }
    if n1 < 2 {
        return Err(Error::BatchTooSmall {
            op: "discrepancy",
            need: 2,
            got: n1,
        });
    }
    let pairs = (n1 * (n1 - 1) / 2) as f64;
    let p = similarity(
        reference.l2_normalize_rows(NORMALIZE_EPS)?.pairwise_distances()?,
        sp,
    )
    .detach()
    .value();
    let q = similarity(other.l2_normalize_rows(NORMALIZE_EPS)?.pairwise_distances()?, sp);
    let w_pos: Vec<f64> = p.iter().map(|p| p / pairs).collect();
    let w_neg: Vec<f64> = p.iter().map(|p| (1.0 - p) / pairs).collect();
    let pos = q.ln().weighted_sum(&w_pos)?;
    let neg = q.affine(-1.0, 1.0).ln().weighted_sum(&w_neg)?;
    pos.add(&neg)
}

/// Negated [`discrepancy`]; minimizing it pulls the structures together.
pub fn adaptation_discrepancy<'t>(
    reference: Var<'t>,
    other: Var<'t>,
    sp: &SimilarityParams,
) -> Result<Var<'t>> {
    Ok(discrepancy(reference, other, sp)?.scale(-1.0))
}

/// Discrepancy between the two heads under `mode`.
pub fn head_discrepancy<'t>(
    logits1: Var<'t>,
    logits2: Var<'t>,
    sp: &SimilarityParams,
    mode: DiscrepancyMode,
) -> Result<Var<'t>> {
    match mode {
        DiscrepancyMode::Directed => discrepancy(logits1, logits2, sp),
        DiscrepancyMode::Symmetric => {
            let a = discrepancy(logits1, logits2, sp)?;
            let b = discrepancy(logits2, logits1, sp)?;
            Ok(a.add(&b)?.scale(0.5))
        }
    }
}

/// Mean squared difference between two equally shaped tensors.
pub fn mse<'t>(prediction: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    Ok(prediction.sub(&target)?.square().mean())
}

/// A batch of current-task samples.
#[derive(Debug, Clone, Copy)]
pub struct LabeledBatch<'a> {
    pub inputs: &'a [f64],
    pub labels: &'a [usize],
    pub dim: usize,
}

impl<'a> LabeledBatch<'a> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_var<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        tape.constant(vec![self.len(), self.dim], self.inputs.to_vec())
    }
}

/// Replayed samples with the logits stored for both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBatch {
    pub dim: usize,
    pub num_classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub zeta1: Vec<f64>,
    pub zeta2: Vec<f64>,
}

impl ReplayBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_labeled(&self) -> LabeledBatch<'_> {
        LabeledBatch {
            inputs: &self.inputs,
            labels: &self.labels,
            dim: self.dim,
        }
    }
}

/// Contrastive term, which needs at least two rows to be defined.
fn contrastive_term<'t>(
    outputs: Var<'t>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Option<Var<'t>>> {
    if labels.len() < 2 {
        return Ok(None);
    }
    Ok(Some(sup_contrastive(outputs, labels, w.st)?.scale(w.sw)))
}

/// `CE(f1) + sw·SupCon(f2)` from already computed head outputs.
pub fn first_task_from_logits<'t>(
    logits1: Var<'t>,
    logits2: Var<'t>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Var<'t>> {
    let ce = cross_entropy(logits1, labels)?;
    match contrastive_term(logits2, labels, w)? {
        Some(sc) => ce.add(&sc),
        None => Ok(ce),
    }
}

/// Classification objective on current samples: cross-entropy on the first
/// head plus weighted supervised contrast on the second.
pub fn first_task_loss<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    batch: LabeledBatch<'_>,
    w: &LossWeights,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::BatchTooSmall {
            op: "first_task_loss",
            need: 1,
            got: 0,
        });
    }
    let f = vars.forward(batch.to_var(tape)?)?;
    first_task_from_logits(f.logits1, f.logits2, batch.labels, w)
}

/// Replay objective from already computed head outputs on the replay batch:
/// `α·[MSE(ζ1, f1) + MSE(ζ2, f2)] + β·[CE(f1) + sw·SupCon(f2)]`.
pub fn consistency_from_logits<'t>(
    tape: &'t Tape,
    logits1: Var<'t>,
    logits2: Var<'t>,
    batch: &ReplayBatch,
    w: &LossWeights,
) -> Result<Var<'t>> {
    let n = batch.len();
    let c = batch.num_classes;
    for logits in [&logits1, &logits2] {
        let shape = logits.shape();
        if shape != [n, c] {
            return Err(Error::Schema {
                record: 0,
                reason: format!("replay logits have shape {shape:?}, expected [{n}, {c}]"),
            });
        }
    }
    let z1 = tape.constant(vec![n, c], batch.zeta1.clone())?;
    let z2 = tape.constant(vec![n, c], batch.zeta2.clone())?;
    let distill = mse(logits1, z1)?.add(&mse(logits2, z2)?)?.scale(w.alpha);
    let classify = first_task_from_logits(logits1, logits2, &batch.labels, w)?.scale(w.beta);
    distill.add(&classify)
}

/// Replay consistency: forwards the replay batch and applies
/// [`consistency_from_logits`].
pub fn buffer_consistency<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    batch: &ReplayBatch,
    w: &LossWeights,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::ReplayUnavailable);
    }
    let expected = batch.len() * batch.num_classes;
    if batch.zeta1.len() != expected || batch.zeta2.len() != expected {
        return Err(Error::Schema {
            record: 0,
            reason: "stored logits do not match the class count".into(),
        });
    }
    let f = vars.forward(batch.as_labeled().to_var(tape)?)?;
    consistency_from_logits(tape, f.logits1, f.logits2, batch, w)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageOptions {
    pub mode: DiscrepancyMode,
    pub ablation: LossAblation,
}

/// Stage objective:
/// Divergence `w_div·L_disc + L_replay`, Adaptation `w_adapt·(−L_disc) +
/// L_replay`, Refinement `L_first + L_replay`.
pub fn stage_loss<'t>(
    stage: Stage,
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    current: LabeledBatch<'_>,
    replay: &ReplayBatch,
    w: &LossWeights,
    sp: &SimilarityParams,
    opts: StageOptions,
) -> Result<Var<'t>> {
    if replay.is_empty() {
        return Err(Error::ReplayUnavailable);
    }
    let f = vars.forward(current.to_var(tape)?)?;
    let ab = opts.ablation;
    let current_term = match stage {
        Stage::Divergence if !ab.drop_discrepancy => Some(
            head_discrepancy(f.logits1, f.logits2, sp, opts.mode)?.scale(w.w_div),
        ),
        Stage::Adaptation if !ab.drop_adaptation => Some(
            head_discrepancy(f.logits1, f.logits2, sp, opts.mode)?.scale(-w.w_adapt),
        ),
        Stage::Refinement if !ab.drop_first_task => Some(first_task_from_logits(
            f.logits1,
            f.logits2,
            current.labels,
            w,
        )?),
        _ => None,
    };
    let replay_term = if ab.drop_consistency {
        None
    } else {
        Some(buffer_consistency(tape, vars, replay, w)?)
    };
    match (current_term, replay_term) {
        (Some(a), Some(b)) => a.add(&b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Ok(tape.scalar(0.0)),
    }
}
