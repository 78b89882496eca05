//! Finite-difference verification of every training objective on small
//! random models.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{
    adaptation_discrepancy, buffer_consistency, cross_entropy, discrepancy, first_task_loss,
    stage_loss, sup_contrastive, DiscrepancyMode, LabeledBatch, LossWeights, ReplayBatch,
    SimilarityParams, Stage, StageOptions,
};
use crate::model::{DualHeadModel, EncoderConfig, ModelVars};
use crate::rng;
use crate::tensor::{finite_diff_check_many, Tape, Tensor, Var, DEFAULT_STEP};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteSettings {
    pub input_dim: usize,
    pub hidden: [usize; 2],
    pub num_classes: usize,
    pub batch: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            input_dim: 8,
            hidden: [16, 16],
            num_classes: 4,
            batch: 6,
            step: DEFAULT_STEP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub loss: &'static str,
    pub max_rel_err: f64,
}

struct Fixture {
    cfg: EncoderConfig,
    params: Vec<Tensor>,
    dim: usize,
    x: Vec<f64>,
    y: Vec<usize>,
    replay: ReplayBatch,
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn fixture(s: &SuiteSettings) -> Result<Fixture> {
    let cfg = EncoderConfig::new(s.input_dim, s.hidden.to_vec(), s.num_classes)?;
    let mut model = DualHeadModel::init(&cfg, s.seed)?;
    let mut rng = rng::stream(s.seed, 0, 0x6C);
    // Non-zero biases keep every logit row away from the origin, where
    // row normalization has no derivative.
    for t in model.params_mut() {
        if t.shape().len() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let n = s.batch;
    let c = s.num_classes;
    let y: Vec<usize> = (0..n).map(|i| i % c).collect();
    let replay = ReplayBatch {
        dim: s.input_dim,
        num_classes: c,
        inputs: uniform(n * s.input_dim, &mut rng),
        labels: (0..n).map(|i| (i + 1) % c).collect(),
        zeta1: uniform(n * c, &mut rng),
        zeta2: uniform(n * c, &mut rng),
    };
    Ok(Fixture {
        params: model.params().into_iter().cloned().collect(),
        x: uniform(n * s.input_dim, &mut rng),
        dim: s.input_dim,
        cfg,
        y,
        replay,
    })
}

type Objective = for<'t> fn(&'t Tape, &ModelVars<'t>, &Fixture) -> Result<Var<'t>>;

fn current<'a>(f: &'a Fixture) -> LabeledBatch<'a> {
    LabeledBatch {
        inputs: &f.x,
        labels: &f.y,
        dim: f.dim,
    }
}

fn heads<'t>(tape: &'t Tape, vars: &ModelVars<'t>, f: &Fixture) -> Result<(Var<'t>, Var<'t>)> {
    let out = vars.forward(current(f).to_var(tape)?)?;
    Ok((out.logits1, out.logits2))
}

fn staged<'t>(stage: Stage, tape: &'t Tape, vars: &ModelVars<'t>, f: &Fixture) -> Result<Var<'t>> {
    let opts = StageOptions {
        mode: DiscrepancyMode::Symmetric,
        ..Default::default()
    };
    let w = LossWeights::default();
    stage_loss(stage, tape, vars, current(f), &f.replay, &w, &SimilarityParams::default(), opts)
}

const SUITE: [(&str, Objective); 9] = [
    ("cross_entropy", |tape, vars, f| cross_entropy(heads(tape, vars, f)?.0, &f.y)),
    ("sup_contrastive", |tape, vars, f| {
        sup_contrastive(heads(tape, vars, f)?.1, &f.y, LossWeights::default().st)
    }),
    ("first_task", |tape, vars, f| {
        first_task_loss(tape, vars, current(f), &LossWeights::default())
    }),
    ("discrepancy", |tape, vars, f| {
        let (a, b) = heads(tape, vars, f)?;
        discrepancy(a, b, &SimilarityParams::default())
    }),
    ("consistency", |tape, vars, f| {
        buffer_consistency(tape, vars, &f.replay, &LossWeights::default())
    }),
    ("adaptation_discrepancy", |tape, vars, f| {
        let (a, b) = heads(tape, vars, f)?;
        adaptation_discrepancy(a, b, &SimilarityParams::default())
    }),
    ("divergence_stage", |tape, vars, f| staged(Stage::Divergence, tape, vars, f)),
    ("adaptation_stage", |tape, vars, f| staged(Stage::Adaptation, tape, vars, f)),
    ("refinement_stage", |tape, vars, f| staged(Stage::Refinement, tape, vars, f)),
];

/// Largest relative gradient error of each objective with respect to all
/// model parameters.
pub fn run_suite(settings: &SuiteSettings) -> Result<Vec<CheckResult>> {
    let f = fixture(settings)?;
    SUITE
        .iter()
        .map(|(name, objective)| {
            let err = finite_diff_check_many(
                |tape, vars| {
                    let mv = ModelVars::from_vars(&f.cfg, vars.to_vec())?;
                    objective(tape, &mv, &f)
                },
                &f.params,
                settings.step,
            )?;
            Ok(CheckResult {
                loss: name,
                max_rel_err: err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_two_seeds() {
        for seed in [0, 1] {
            let results = run_suite(&SuiteSettings {
                seed,
                ..Default::default()
            })
            .unwrap();
            assert_eq!(results.len(), 9);
            for r in results {
                assert!(r.max_rel_err < 1e-4, "{}: {}", r.loss, r.max_rel_err);
            }
        }
    }
}
