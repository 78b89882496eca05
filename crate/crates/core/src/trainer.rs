//! Sequential training over a domain stream: the three-stage DARE loop (with
//! an optional EMA shadow for DARE++) and the ER, DER++, SGD and joint
//! baselines.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, BufferStrategy, IrsConfig, ReplayBuffer};
use crate::data::{joint_view, Dataset, DomainTask};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, first_task_loss, mse, stage_loss, DiscrepancyMode, LabeledBatch, LossAblation,
    LossWeights, ReplayBatch, SimilarityParams, Stage, StageOptions,
};
use crate::metrics::{
    backward_transfer, ece, last_accuracy, logit_norm_stats, max_softmax, representation_drift,
    AccuracyMatrix, CalibrationReport, DriftRecord, DriftSeries, LogitNormStats,
};
use crate::model::{argmax_rows, DualHeadModel, EmaModel, EncoderConfig, ModelVars, Part};
use crate::rng;
use crate::tensor::{SgdOptimizer, Tape, Var};

const SHUFFLE: u64 = 0x5F;
const BUFFER: u64 = 0xB0;
const SAMPLE: u64 = 0x5A;
const EMA: u64 = 0xE3;

/// Fallback probe-set size when no buffer exists.
pub const FALLBACK_PROBES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MethodKind {
    #[serde(rename = "dare")]
    Dare,
    #[serde(rename = "dare++", alias = "dare_plus")]
    DarePlus,
    #[serde(rename = "er")]
    Er,
    #[serde(rename = "derpp", alias = "der++")]
    Derpp,
    #[serde(rename = "sgd", alias = "sgd_seq")]
    SgdSeq,
    #[serde(rename = "joint")]
    Joint,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Joint,
        MethodKind::DarePlus,
        MethodKind::Dare,
        MethodKind::Derpp,
        MethodKind::Er,
        MethodKind::SgdSeq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Dare => "dare",
            MethodKind::DarePlus => "dare++",
            MethodKind::Er => "er",
            MethodKind::Derpp => "derpp",
            MethodKind::SgdSeq => "sgd",
            MethodKind::Joint => "joint",
        }
    }

    pub fn uses_buffer(self) -> bool {
        matches!(
            self,
            MethodKind::Dare | MethodKind::DarePlus | MethodKind::Er | MethodKind::Derpp
        )
    }

    pub fn uses_ema(self) -> bool {
        self == MethodKind::DarePlus
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dare" => Ok(Self::Dare),
            "dare++" | "dare_plus" => Ok(Self::DarePlus),
            "er" => Ok(Self::Er),
            "derpp" | "der++" => Ok(Self::Derpp),
            "sgd" | "sgd_seq" => Ok(Self::SgdSeq),
            "joint" => Ok(Self::Joint),
            other => Err(Error::Config(format!(
                "unknown method {other:?}, expected one of dare, dare++, er, derpp, sgd, joint"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    Divergence,
    Adaptation,
    Refinement,
    FirstTaskPlain,
}

impl StageKind {
    fn loss_stage(self) -> Option<Stage> {
        match self {
            StageKind::Divergence => Some(Stage::Divergence),
            StageKind::Adaptation => Some(Stage::Adaptation),
            StageKind::Refinement => Some(Stage::Refinement),
            StageKind::FirstTaskPlain => None,
        }
    }
}

/// Stage of 0-based `epoch` within 1-based task `task`.
pub fn stage_for_epoch(task: usize, epoch: usize) -> StageKind {
    if task <= 1 {
        return StageKind::FirstTaskPlain;
    }
    match epoch % 3 {
        0 => StageKind::Divergence,
        1 => StageKind::Adaptation,
        _ => StageKind::Refinement,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub hidden_dims: Vec<usize>,
    pub weights: LossWeights,
    pub similarity: SimilarityParams,
    pub discrepancy: DiscrepancyMode,
    pub ablation: LossAblation,
    pub buffer_size: usize,
    pub buffer_strategy: BufferStrategy,
    /// Gate width; `None` means `E/6`.
    pub irs_sigma: Option<f64>,
    pub ema_update_prob: f64,
    pub ema_decay: f64,
    /// Iterations between task-1 accuracy and drift probes.
    pub eval_every: u64,
    pub ece_bins: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_method(MethodKind::Dare)
    }
}

impl TrainConfig {
    /// Defaults for `method`.
    pub fn for_method(method: MethodKind) -> Self {
        let (learning_rate, weights, strategy) = match method {
            MethodKind::Dare | MethodKind::DarePlus => {
                (0.04, LossWeights::default(), BufferStrategy::Irs)
            }
            MethodKind::Derpp => (
                0.01,
                LossWeights {
                    alpha: 0.1,
                    beta: 0.1,
                    ..LossWeights::default()
                },
                BufferStrategy::Reservoir,
            ),
            MethodKind::Er | MethodKind::SgdSeq | MethodKind::Joint => {
                (0.1, LossWeights::default(), BufferStrategy::Reservoir)
            }
        };
        Self {
            epochs_per_task: 50,
            batch_size: 32,
            learning_rate,
            momentum: 0.0,
            hidden_dims: vec![64, 64],
            weights,
            similarity: SimilarityParams::default(),
            discrepancy: DiscrepancyMode::Symmetric,
            ablation: LossAblation::default(),
            buffer_size: if method.uses_buffer() { 50 } else { 0 },
            buffer_strategy: strategy,
            irs_sigma: None,
            ema_update_prob: 0.05,
            ema_decay: 0.999,
            eval_every: 50,
            ece_bins: 10,
            seed: 0,
        }
    }

    pub fn irs(&self) -> Result<IrsConfig> {
        match self.irs_sigma {
            Some(s) => IrsConfig::with_sigma(self.epochs_per_task, s),
            None => Ok(IrsConfig::new(self.epochs_per_task)),
        }
    }

    /// Checks the fields that every learner depends on.
    fn validate_core(&self) -> Result<()> {
        if self.epochs_per_task == 0 {
            return Err(Error::Config("epochs_per_task must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be non-empty and positive".into()));
        }
        self.weights.validate()?;
        self.similarity.validate()?;
        if self.buffer_strategy == BufferStrategy::Irs {
            self.irs()?;
        }
        Ok(())
    }

    /// Full validation for running `method` over `tasks` domains.
    pub fn validate(&self, method: MethodKind, tasks: usize) -> Result<()> {
        self.validate_core()?;
        if method.uses_buffer() && self.buffer_size == 0 {
            return Err(Error::Config(format!(
                "method {method} needs buffer_size > 0"
            )));
        }
        if matches!(method, MethodKind::Dare | MethodKind::DarePlus)
            && tasks > 1
            && self.epochs_per_task < 3
        {
            return Err(Error::Config(format!(
                "method {method} needs epochs_per_task >= 3, got {}",
                self.epochs_per_task
            )));
        }
        if method.uses_ema() {
            EmaModel::new(
                &DualHeadModel::init(&EncoderConfig::new(1, vec![1], 1)?, 0)?,
                self.ema_decay,
                self.ema_update_prob,
            )?;
        }
        Ok(())
    }
}

/// Instrumentation hooks; every method has a no-op default.
pub trait Observer {
    fn epoch_started(&mut self, _task: usize, _epoch: usize, _stage: StageKind, _model: &DualHeadModel) {}
    fn epoch_finished(&mut self, _task: usize, _epoch: usize, _stage: StageKind, _model: &DualHeadModel) {}
    fn sample_offered(&mut self, _task: usize, _epoch: usize, _stored: bool) {}
    fn replay_sampled(&mut self, _size: usize) {}
    fn step_taken(&mut self, _iteration: u64, _model: &DualHeadModel) {}
}

pub struct NoObserver;

impl Observer for NoObserver {}

struct Probe {
    every: u64,
    previous: DualHeadModel,
    task1_test: Dataset,
    fallback: Vec<f64>,
    last_task: usize,
    drift: DriftSeries,
    task1_accuracy: Vec<(u64, f64)>,
}

/// Working state of one training run.
pub struct Learner {
    method: MethodKind,
    cfg: TrainConfig,
    model: DualHeadModel,
    ema: Option<EmaModel>,
    buffer: Option<ReplayBuffer>,
    irs: Option<IrsConfig>,
    opt: SgdOptimizer,
    buffer_rng: ChaCha8Rng,
    sample_rng: ChaCha8Rng,
    ema_rng: ChaCha8Rng,
    iteration: u64,
    current_task: usize,
    probe: Option<Probe>,
}

fn gather(data: &Dataset, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let mut x = Vec::with_capacity(idx.len() * data.dim());
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        x.extend_from_slice(data.row(i));
        y.push(data.labels()[i]);
    }
    (x, y)
}

/// Fraction of `data` classified correctly by `model`'s first head.
pub fn accuracy(model: &DualHeadModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::State("accuracy of an empty dataset is undefined".into()));
    }
    let pred = model.predict_classes(data.inputs())?;
    let hits = pred.iter().zip(data.labels()).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

impl Learner {
    pub fn new(method: MethodKind, cfg: &TrainConfig, dim: usize, num_classes: usize) -> Result<Self> {
        cfg.validate_core()?;
        let enc = EncoderConfig::new(dim, cfg.hidden_dims.clone(), num_classes)?;
        let model = DualHeadModel::init(&enc, cfg.seed)?;
        let ema = if method.uses_ema() {
            Some(EmaModel::new(&model, cfg.ema_decay, cfg.ema_update_prob)?)
        } else {
            None
        };
        let buffer = method
            .uses_buffer()
            .then(|| ReplayBuffer::new(cfg.buffer_size, dim, num_classes));
        let irs = match cfg.buffer_strategy {
            BufferStrategy::Irs => Some(cfg.irs()?),
            BufferStrategy::Reservoir => None,
        };
        Ok(Self {
            method,
            cfg: cfg.clone(),
            model,
            ema,
            buffer,
            irs,
            opt: SgdOptimizer::new(cfg.learning_rate, cfg.momentum)?,
            buffer_rng: rng::stream(cfg.seed, 0, BUFFER),
            sample_rng: rng::stream(cfg.seed, 0, SAMPLE),
            ema_rng: rng::stream(cfg.seed, 0, EMA),
            iteration: 0,
            current_task: 0,
            probe: None,
        })
    }

    pub fn method(&self) -> MethodKind {
        self.method
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DualHeadModel {
        &self.model
    }

    pub fn ema(&self) -> Option<&EmaModel> {
        self.ema.as_ref()
    }

    pub fn buffer(&self) -> Option<&ReplayBuffer> {
        self.buffer.as_ref()
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Model used for evaluation: the EMA shadow for DARE++, otherwise the
    /// working model.
    pub fn eval_model(&self) -> &DualHeadModel {
        match &self.ema {
            Some(e) => e.shadow(),
            None => &self.model,
        }
    }

    /// Records task-1 accuracy and representation drift every `every`
    /// iterations. Drift is measured on the buffer contents, or on the first
    /// training inputs of task 1 while no buffer contents exist.
    pub fn enable_probes(&mut self, every: u64, task1: &DomainTask) -> Result<()> {
        if every == 0 {
            return Err(Error::Config("probe interval must be >= 1".into()));
        }
        let n = task1.train.len().min(FALLBACK_PROBES);
        self.probe = Some(Probe {
            every,
            previous: self.model.clone(),
            task1_test: task1.test.clone(),
            fallback: task1.train.inputs()[..n * task1.train.dim()].to_vec(),
            last_task: 0,
            drift: DriftSeries::new(),
            task1_accuracy: Vec::new(),
        });
        Ok(())
    }

    fn shuffled_batches(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut out: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(<[usize]>::to_vec).collect();
        // A lone trailing sample joins the previous batch so pairwise losses
        // always see at least two rows.
        if out.len() > 1 && out.last().map_or(false, |b| b.len() == 1) {
            let last = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(last);
        }
        out
    }

    fn set_stage_freeze(&mut self, stage: StageKind) {
        self.model.unfreeze_all();
        match stage {
            StageKind::Divergence => self.model.set_frozen(Part::Encoder, true),
            StageKind::Adaptation => {
                self.model.set_frozen(Part::Head1, true);
                self.model.set_frozen(Part::Head2, true);
            }
            StageKind::Refinement | StageKind::FirstTaskPlain => {}
        }
    }

    fn step<F>(&mut self, loss_of: F, obs: &mut dyn Observer) -> Result<()>
    where
        F: for<'t> FnOnce(&'t Tape, &ModelVars<'t>) -> Result<Var<'t>>,
    {
        let tape = Tape::new();
        let vars = self.model.bind(&tape);
        let loss = loss_of(&tape, &vars)?;
        if !loss.item().is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {}",
                self.iteration
            )));
        }
        let grads = tape.backward(loss)?;
        self.model.accumulate_grads(&vars, &grads)?;
        self.model.sgd_step(&mut self.opt)?;
        if let Some(ema) = self.ema.as_mut() {
            ema.maybe_update(&self.model, &mut self.ema_rng)?;
        }
        self.iteration += 1;
        obs.step_taken(self.iteration, &self.model);
        self.maybe_probe()
    }

    fn maybe_probe(&mut self) -> Result<()> {
        let Some(probe) = self.probe.as_mut() else {
            return Ok(());
        };
        if self.iteration % probe.every != 0 {
            return Ok(());
        }
        let buffered;
        let inputs: &[f64] = match &self.buffer {
            Some(b) if !b.is_empty() => {
                buffered = b.inputs();
                &buffered
            }
            _ => &probe.fallback,
        };
        let drift = representation_drift(&probe.previous, &self.model, inputs)?;
        probe.drift.push(DriftRecord {
            iteration: self.iteration,
            task_id: self.current_task,
            drift,
            boundary: probe.last_task != self.current_task,
        })?;
        probe.last_task = self.current_task;
        probe.previous = self.model.clone();
        let eval = match &self.ema {
            Some(e) => e.shadow(),
            None => &self.model,
        };
        let acc = accuracy(eval, &probe.task1_test)?;
        probe.task1_accuracy.push((self.iteration, acc));
        Ok(())
    }

    fn sample_replay(&mut self, obs: &mut dyn Observer) -> Result<Option<ReplayBatch>> {
        match &self.buffer {
            Some(b) if !b.is_empty() => {
                let batch = b.sample_batch(self.cfg.batch_size, &mut self.sample_rng)?;
                obs.replay_sampled(batch.len());
                Ok(Some(batch))
            }
            _ => Ok(None),
        }
    }

    /// Offers every sample of a batch, with the logits computed before the
    /// update, to the buffer.
    fn offer_batch(
        &mut self,
        task: usize,
        epoch: usize,
        x: &[f64],
        y: &[usize],
        logits: Option<(&[f64], &[f64])>,
        obs: &mut dyn Observer,
    ) -> Result<()> {
        let Some(buffer) = self.buffer.as_mut() else {
            return Ok(());
        };
        let Some((l1, l2)) = logits else {
            return Err(Error::State("buffer offers need stored logits".into()));
        };
        let d = buffer.dim();
        let c = buffer.num_classes();
        for (i, &label) in y.iter().enumerate() {
            let entry = BufferEntry {
                input: x[i * d..(i + 1) * d].to_vec(),
                label,
                zeta1: l1[i * c..(i + 1) * c].to_vec(),
                zeta2: l2[i * c..(i + 1) * c].to_vec(),
                task_id: task,
                epoch,
            };
            let stored = buffer.offer(
                entry,
                self.cfg.buffer_strategy,
                self.irs.as_ref(),
                &mut self.buffer_rng,
            )?;
            obs.sample_offered(task, epoch, stored);
        }
        Ok(())
    }

    fn begin_task(&mut self, task: usize) {
        self.current_task = task;
    }

    /// One task of the three-stage loop. Task 1 trains on the
    /// classification objective only; later tasks cycle Divergence,
    /// Adaptation and Refinement epochs.
    pub fn train_task_dare(&mut self, task: &DomainTask, obs: &mut dyn Observer) -> Result<()> {
        let t = task.task_id;
        let e_total = self.cfg.epochs_per_task;
        if t > 1 && e_total < 3 {
            return Err(Error::Config(format!(
                "three-stage training needs epochs_per_task >= 3, got {e_total}"
            )));
        }
        if self.buffer.is_none() {
            return Err(Error::Config("three-stage training needs a replay buffer".into()));
        }
        if t > 1 && self.buffer.as_ref().is_some_and(ReplayBuffer::is_empty) {
            return Err(Error::ReplayUnavailable);
        }
        self.begin_task(t);
        let mut shuffle = rng::stream(self.cfg.seed, t as u64, SHUFFLE);
        let w = self.cfg.weights;
        let sp = self.cfg.similarity;
        let opts = StageOptions {
            mode: self.cfg.discrepancy,
            ablation: self.cfg.ablation,
        };
        let dim = task.train.dim();
        for epoch in 0..e_total {
            let stage = stage_for_epoch(t, epoch);
            self.set_stage_freeze(stage);
            obs.epoch_started(t, epoch, stage, &self.model);
            for idx in self.shuffled_batches(task.train.len(), &mut shuffle) {
                let (x, y) = gather(&task.train, &idx);
                let pre = self.model.infer(&x)?;
                let current = LabeledBatch {
                    inputs: &x,
                    labels: &y,
                    dim,
                };
                match stage.loss_stage() {
                    None => self.step(|tape, vars| first_task_loss(tape, vars, current, &w), obs)?,
                    Some(s) => {
                        let replay = self.sample_replay(obs)?.ok_or(Error::ReplayUnavailable)?;
                        self.step(
                            |tape, vars| stage_loss(s, tape, vars, current, &replay, &w, &sp, opts),
                            obs,
                        )?;
                    }
                }
                self.offer_batch(t, epoch, &x, &y, Some((&pre.logits1, &pre.logits2)), obs)?;
            }
            obs.epoch_finished(t, epoch, stage, &self.model);
        }
        self.model.unfreeze_all();
        Ok(())
    }

    /// Experience replay: cross-entropy on the current batch plus
    /// cross-entropy on a buffer batch once the buffer holds samples.
    pub fn train_task_er(&mut self, task: &DomainTask, obs: &mut dyn Observer) -> Result<()> {
        self.replay_task(task, obs, |tape, vars, replay, _w| {
            let f = vars.forward(replay.as_labeled().to_var(tape)?)?;
            cross_entropy(f.logits1, &replay.labels)
        })
    }

    /// Dark experience replay with labels: cross-entropy on the current
    /// batch plus `α·MSE(f1, ζ1) + β·CE(f1)` on a buffer batch.
    pub fn train_task_derpp(&mut self, task: &DomainTask, obs: &mut dyn Observer) -> Result<()> {
        self.replay_task(task, obs, |tape, vars, replay, w| {
            let f = vars.forward(replay.as_labeled().to_var(tape)?)?;
            let n = replay.len();
            let zeta = tape.constant(vec![n, replay.num_classes], replay.zeta1.clone())?;
            let distill = mse(f.logits1, zeta)?.scale(w.alpha);
            let classify = cross_entropy(f.logits1, &replay.labels)?.scale(w.beta);
            distill.add(&classify)
        })
    }

    fn replay_task<R>(&mut self, task: &DomainTask, obs: &mut dyn Observer, replay_loss: R) -> Result<()>
    where
        R: for<'t> Fn(&'t Tape, &ModelVars<'t>, &ReplayBatch, &LossWeights) -> Result<Var<'t>>,
    {
        let t = task.task_id;
        self.begin_task(t);
        self.model.unfreeze_all();
        let mut shuffle = rng::stream(self.cfg.seed, t as u64, SHUFFLE);
        let w = self.cfg.weights;
        for epoch in 0..self.cfg.epochs_per_task {
            obs.epoch_started(t, epoch, StageKind::Refinement, &self.model);
            for idx in self.shuffled_batches(task.train.len(), &mut shuffle) {
                let (x, y) = gather(&task.train, &idx);
                let pre = match &self.buffer {
                    Some(_) => Some(self.model.infer(&x)?),
                    None => None,
                };
                let replay = self.sample_replay(obs)?;
                let dim = task.train.dim();
                self.step(
                    |tape, vars| {
                        let f = vars.forward(tape.constant(vec![y.len(), dim], x.clone())?)?;
                        let ce = cross_entropy(f.logits1, &y)?;
                        match &replay {
                            Some(r) => ce.add(&replay_loss(tape, vars, r, &w)?),
                            None => Ok(ce),
                        }
                    },
                    obs,
                )?;
                let logits = pre.as_ref().map(|p| (p.logits1.as_slice(), p.logits2.as_slice()));
                if self.buffer.is_some() {
                    self.offer_batch(t, epoch, &x, &y, logits, obs)?;
                }
            }
            obs.epoch_finished(t, epoch, StageKind::Refinement, &self.model);
        }
        Ok(())
    }

    fn train_plain(&mut self, data: &Dataset, task: usize, obs: &mut dyn Observer) -> Result<()> {
        self.begin_task(task);
        self.model.unfreeze_all();
        let mut shuffle = rng::stream(self.cfg.seed, task as u64, SHUFFLE);
        let dim = data.dim();
        for epoch in 0..self.cfg.epochs_per_task {
            obs.epoch_started(task, epoch, StageKind::Refinement, &self.model);
            for idx in self.shuffled_batches(data.len(), &mut shuffle) {
                let (x, y) = gather(data, &idx);
                self.step(
                    |tape, vars| {
                        let f = vars.forward(tape.constant(vec![y.len(), dim], x.clone())?)?;
                        cross_entropy(f.logits1, &y)
                    },
                    obs,
                )?;
            }
            obs.epoch_finished(task, epoch, StageKind::Refinement, &self.model);
        }
        Ok(())
    }

    /// Plain cross-entropy fine-tuning on one task.
    pub fn train_sgd_seq(&mut self, task: &DomainTask, obs: &mut dyn Observer) -> Result<()> {
        self.train_plain(&task.train, task.task_id, obs)
    }

    /// Cross-entropy training on the union of all tasks for
    /// `epochs_per_task` epochs.
    pub fn train_joint(&mut self, tasks: &[DomainTask], obs: &mut dyn Observer) -> Result<()> {
        let joint = joint_view(tasks, self.cfg.seed)?;
        self.train_plain(&joint.train, 1, obs)
    }

    /// Trains one task with this learner's method. Not valid for the joint
    /// baseline, which sees all tasks at once.
    pub fn train_task(&mut self, task: &DomainTask, obs: &mut dyn Observer) -> Result<()> {
        match self.method {
            MethodKind::Dare | MethodKind::DarePlus => self.train_task_dare(task, obs),
            MethodKind::Er => self.train_task_er(task, obs),
            MethodKind::Derpp => self.train_task_derpp(task, obs),
            MethodKind::SgdSeq => self.train_sgd_seq(task, obs),
            MethodKind::Joint => Err(Error::State(
                "joint training runs over the whole stream".into(),
            )),
        }
    }

    fn into_probe_series(self) -> (DriftSeries, Vec<(u64, f64)>) {
        match self.probe {
            Some(p) => (p.drift, p.task1_accuracy),
            None => (DriftSeries::new(), Vec::new()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: MethodKind,
    pub accuracy: AccuracyMatrix,
    pub last_accuracy: f64,
    /// Absent for single-task streams.
    pub backward_transfer: Option<f64>,
    /// `(iteration, accuracy)` on task 1's test set.
    pub task1_accuracy: Vec<(u64, f64)>,
    pub drift: DriftSeries,
    pub calibration: CalibrationReport,
    /// Per task, norms of raw first-head logits on its test set.
    pub logit_norms: Vec<LogitNormStats>,
    pub iterations: u64,
}

/// Final state of a run alongside its report.
pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: DualHeadModel,
    pub ema: Option<EmaModel>,
    pub buffer: Option<ReplayBuffer>,
}

fn check_stream(tasks: &[DomainTask], num_classes: usize) -> Result<usize> {
    let first = tasks
        .first()
        .ok_or_else(|| Error::Config("stream has no tasks".into()))?;
    let dim = first.train.dim();
    for (i, t) in tasks.iter().enumerate() {
        if t.task_id != i + 1 {
            return Err(Error::Schema {
                record: i,
                reason: format!("task at position {i} has id {}", t.task_id),
            });
        }
        if t.train.dim() != dim || t.test.dim() != dim {
            return Err(Error::Schema {
                record: i,
                reason: "input width differs from task 1".into(),
            });
        }
        if t.train.is_empty() || t.test.is_empty() {
            return Err(Error::Config(format!(
                "task {} needs non-empty train and test splits",
                t.task_id
            )));
        }
        for (row, &label) in t.train.labels().iter().chain(t.test.labels()).enumerate() {
            if label >= num_classes {
                return Err(Error::Label {
                    row,
                    label,
                    classes: num_classes,
                });
            }
        }
    }
    Ok(dim)
}

/// Trains `method` over `tasks`, evaluating every task after each training
/// phase. Deterministic in `cfg.seed`.
pub fn run_experiment(
    method: MethodKind,
    tasks: &[DomainTask],
    num_classes: usize,
    cfg: &TrainConfig,
    obs: &mut dyn Observer,
) -> Result<RunOutcome> {
    let dim = check_stream(tasks, num_classes)?;
    cfg.validate(method, tasks.len())?;
    let t_total = tasks.len();
    let mut learner = Learner::new(method, cfg, dim, num_classes)?;
    learner.enable_probes(cfg.eval_every, &tasks[0])?;
    let mut matrix = AccuracyMatrix::new(t_total);

    if method == MethodKind::Joint {
        learner.train_joint(tasks, obs)?;
        for (k, task) in tasks.iter().enumerate() {
            let acc = accuracy(learner.eval_model(), &task.test)?;
            for j in 0..t_total {
                matrix.set(k, j, acc)?;
            }
        }
    } else {
        for (j, task) in tasks.iter().enumerate() {
            learner.train_task(task, obs)?;
            for (k, eval) in tasks.iter().enumerate() {
                matrix.set(k, j, accuracy(learner.eval_model(), &eval.test)?)?;
            }
        }
    }

    let eval = learner.eval_model();
    let mut confidences = Vec::new();
    let mut correct = Vec::new();
    let mut logit_norms = Vec::with_capacity(t_total);
    for task in tasks {
        let out = eval.infer(task.test.inputs())?;
        let pred = argmax_rows(&out.logits1, num_classes);
        confidences.extend(max_softmax(&out.logits1, num_classes));
        correct.extend(pred.iter().zip(task.test.labels()).map(|(p, y)| p == y));
        logit_norms.push(logit_norm_stats(&out.logits1, num_classes)?);
    }
    let calibration = ece(&confidences, &correct, cfg.ece_bins)?;
    let last = last_accuracy(&matrix)?;
    let bwt = if t_total >= 2 {
        Some(backward_transfer(&matrix)?)
    } else {
        None
    };
    let iterations = learner.iteration();
    let model = learner.model.clone();
    let ema = learner.ema.clone();
    let buffer = learner.buffer.clone();
    let (drift, task1_accuracy) = learner.into_probe_series();
    Ok(RunOutcome {
        report: MetricsReport {
            method,
            accuracy: matrix,
            last_accuracy: last,
            backward_transfer: bwt,
            task1_accuracy,
            drift,
            calibration,
            logit_norms,
            iterations,
        },
        model,
        ema,
        buffer,
    })
}
