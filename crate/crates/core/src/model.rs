//! Shared encoder feeding two linear classifier heads, with per-part freezing,
//! an exponential-moving-average shadow copy, and a binary checkpoint format.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, Gradients, SgdOptimizer, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub repr_dim: usize,
    pub num_classes: usize,
}

impl EncoderConfig {
    /// Relu MLP `input_dim → hidden_dims…`, whose last width is the
    /// representation size.
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        let repr_dim = hidden_dims.last().copied().unwrap_or(0);
        let cfg = Self {
            input_dim,
            hidden_dims,
            repr_dim,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("input_dim and num_classes must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config(
                "hidden_dims must be a nonempty list of positive widths".into(),
            ));
        }
        if self.hidden_dims.last() != Some(&self.repr_dim) {
            return Err(Error::Config(format!(
                "repr_dim {} must equal the last hidden width {:?}",
                self.repr_dim,
                self.hidden_dims.last()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Part {
    Encoder,
    Head1,
    Head2,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Encoder, Part::Head1, Part::Head2];

    fn index(self) -> usize {
        match self {
            Part::Encoder => 0,
            Part::Head1 => 1,
            Part::Head2 => 2,
        }
    }
}

/// `y = x·W + b`, with `W` stored `in×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
        Self {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape").with_grad(),
            bias: Tensor::zeros(vec![fan_out]).with_grad(),
        }
    }

    fn apply(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let (k, n) = (self.weight.shape()[0], self.weight.shape()[1]);
        let mut out = kernels::matmul(x, self.weight.data(), rows, k, n);
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(self.bias.data()).for_each(|(o, b)| *o += b);
        }
        out
    }
}

/// Tape handles for one binding of a model's parameters, in checkpoint order.
#[derive(Debug, Clone)]
pub struct ModelVars<'t> {
    params: Vec<Var<'t>>,
    encoder_layers: usize,
}

impl<'t> ModelVars<'t> {
    /// Wraps externally created leaves (for example by a gradient check);
    /// `params` must follow [`DualHeadModel::named_params`] order.
    pub fn from_vars(cfg: &EncoderConfig, params: Vec<Var<'t>>) -> Result<Self> {
        let expected = 2 * cfg.hidden_dims.len() + 4;
        if params.len() != expected {
            return Err(Error::State(format!(
                "expected {expected} parameter handles, got {}",
                params.len()
            )));
        }
        Ok(Self {
            params,
            encoder_layers: cfg.hidden_dims.len(),
        })
    }

    pub fn params(&self) -> &[Var<'t>] {
        &self.params
    }

    fn layer(&self, i: usize) -> (Var<'t>, Var<'t>) {
        (self.params[2 * i], self.params[2 * i + 1])
    }

    fn head(&self, which: usize) -> (Var<'t>, Var<'t>) {
        self.layer(self.encoder_layers + which)
    }

    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for i in 0..self.encoder_layers {
            let (w, b) = self.layer(i);
            h = h.matmul(&w)?.add_row(&b)?.relu();
        }
        Ok(h)
    }

    pub fn forward(&self, x: Var<'t>) -> Result<Forward<'t>> {
        let z = self.encode(x)?;
        let (w1, b1) = self.head(0);
        let (w2, b2) = self.head(1);
        let logits1 = z.matmul(&w1)?.add_row(&b1)?;
        let logits2 = z.matmul(&w2)?.add_row(&b2)?;
        Ok(Forward { z, logits1, logits2 })
    }
}

/// Outputs of one differentiable forward pass; both heads read the same `z`.
#[derive(Debug, Clone, Copy)]
pub struct Forward<'t> {
    pub z: Var<'t>,
    pub logits1: Var<'t>,
    pub logits2: Var<'t>,
}

/// Plain-value forward outputs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    pub rows: usize,
    pub z: Vec<f64>,
    pub logits1: Vec<f64>,
    pub logits2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadModel {
    cfg: EncoderConfig,
    encoder: Vec<Linear>,
    head1: Linear,
    head2: Linear,
    frozen: [bool; 3],
}

impl DualHeadModel {
    /// Fan-in scaled uniform weights (bound `√(6/fan_in)`), zero biases.
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, 0, 0x1417);
        let mut fan_in = cfg.input_dim;
        let mut encoder = Vec::with_capacity(cfg.hidden_dims.len());
        for &width in &cfg.hidden_dims {
            encoder.push(Linear::init(fan_in, width, &mut rng));
            fan_in = width;
        }
        let head1 = Linear::init(cfg.repr_dim, cfg.num_classes, &mut rng);
        let head2 = Linear::init(cfg.repr_dim, cfg.num_classes, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            head1,
            head2,
            frozen: [false; 3],
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.encoder
    }

    pub fn head1(&self) -> &Linear {
        &self.head1
    }

    pub fn head2(&self) -> &Linear {
        &self.head2
    }

    fn layers(&self) -> impl Iterator<Item = (Part, &Linear)> {
        self.encoder
            .iter()
            .map(|l| (Part::Encoder, l))
            .chain([(Part::Head1, &self.head1), (Part::Head2, &self.head2)])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = (Part, &mut Linear)> {
        self.encoder
            .iter_mut()
            .map(|l| (Part::Encoder, l))
            .chain([(Part::Head1, &mut self.head1), (Part::Head2, &mut self.head2)])
    }

    /// Parameters in canonical order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), &l.weight));
            out.push((format!("encoder.{i}.bias"), &l.bias));
        }
        for (name, l) in [("head1", &self.head1), ("head2", &self.head2)] {
            out.push((format!("{name}.weight"), &l.weight));
            out.push((format!("{name}.bias"), &l.bias));
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers()
            .flat_map(|(_, l)| [&l.weight, &l.bias])
            .collect()
    }

    /// Mutable parameters in canonical order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .flat_map(|(_, l)| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Parameter tensors belonging to one part.
    pub fn part_params(&self, part: Part) -> Vec<&Tensor> {
        self.layers()
            .filter(|(p, _)| *p == part)
            .flat_map(|(_, l)| [&l.weight, &l.bias])
            .collect()
    }

    pub fn set_frozen(&mut self, part: Part, frozen: bool) {
        self.frozen[part.index()] = frozen;
    }

    pub fn is_frozen(&self, part: Part) -> bool {
        self.frozen[part.index()]
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen = [false; 3];
    }

    /// Registers every parameter as a trainable leaf. Frozen parts still
    /// carry gradients through the graph; the optimizer skips them.
    pub fn bind<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            params: self.params().into_iter().map(|t| tape.param(t)).collect(),
            encoder_layers: self.encoder.len(),
        }
    }

    /// Registers every parameter as a constant.
    pub fn bind_constant<'t>(&self, tape: &'t Tape) -> ModelVars<'t> {
        ModelVars {
            params: self
                .params()
                .into_iter()
                .map(|t| {
                    tape.constant(t.shape().to_vec(), t.data().to_vec())
                        .expect("tensor shapes are consistent")
                })
                .collect(),
            encoder_layers: self.encoder.len(),
        }
    }

    /// Adds the gradients of a bound pass into the parameter buffers.
    pub fn accumulate_grads(&mut self, vars: &ModelVars<'_>, grads: &Gradients) -> Result<()> {
        let handles = vars.params().to_vec();
        let mut tensors: Vec<&mut Tensor> = self
            .layers_mut()
            .flat_map(|(_, l)| [&mut l.weight, &mut l.bias])
            .collect();
        if handles.len() != tensors.len() {
            return Err(Error::State("bound variables do not match this model".into()));
        }
        for (t, v) in tensors.iter_mut().zip(handles) {
            t.accumulate_grad(&grads.wrt(v))?;
        }
        Ok(())
    }

    /// One optimizer step over unfrozen parts; frozen parts only have their
    /// gradients cleared.
    pub fn sgd_step(&mut self, opt: &mut SgdOptimizer) -> Result<()> {
        let frozen = self.frozen;
        let mut slot = 0;
        for (part, layer) in self.layers_mut() {
            for t in [&mut layer.weight, &mut layer.bias] {
                if frozen[part.index()] {
                    t.zero_grad();
                } else {
                    opt.update(slot, t)?;
                }
                slot += 1;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for (_, l) in self.layers_mut() {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }

    fn check_width(&self, inputs: &[f64]) -> Result<usize> {
        let d = self.cfg.input_dim;
        if inputs.len() % d != 0 {
            return Err(Error::Dimension {
                op: "forward",
                left: vec![inputs.len()],
                right: vec![d],
            });
        }
        Ok(inputs.len() / d)
    }

    /// Differentiable forward of an `n×D` batch on `tape`.
    pub fn forward<'t>(&self, vars: &ModelVars<'t>, x: Var<'t>) -> Result<Forward<'t>> {
        match x.shape().as_slice() {
            [_, d] if *d == self.cfg.input_dim => vars.forward(x),
            other => Err(Error::Dimension {
                op: "forward",
                left: other.to_vec(),
                right: vec![self.cfg.input_dim],
            }),
        }
    }

    /// Gradient-free encoder output for row-major inputs.
    pub fn encode(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let rows = self.check_width(inputs)?;
        let mut h = inputs.to_vec();
        for l in &self.encoder {
            h = l.apply(&h, rows);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        Ok(h)
    }

    /// Gradient-free forward pass; values are identical to the tape path.
    pub fn infer(&self, inputs: &[f64]) -> Result<Outputs> {
        let rows = self.check_width(inputs)?;
        let z = self.encode(inputs)?;
        Ok(Outputs {
            rows,
            logits1: self.head1.apply(&z, rows),
            logits2: self.head2.apply(&z, rows),
            z,
        })
    }

    /// Class indices by argmax of the first head (lowest index wins ties).
    pub fn predict_classes(&self, inputs: &[f64]) -> Result<Vec<usize>> {
        let out = self.infer(inputs)?;
        Ok(argmax_rows(&out.logits1, self.cfg.num_classes))
    }

    fn same_shapes(&self, other: &DualHeadModel) -> bool {
        self.params()
            .iter()
            .zip(other.params())
            .all(|(a, b)| a.shape() == b.shape())
            && self.params().len() == other.params().len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        checkpoint::decode(bytes)
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Stochastically updated exponential moving average of a working model.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaModel {
    shadow: DualHeadModel,
    decay: f64,
    update_prob: f64,
}

impl EmaModel {
    pub fn new(model: &DualHeadModel, decay: f64, update_prob: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        if !(update_prob > 0.0 && update_prob <= 1.0) {
            return Err(Error::Config(format!(
                "EMA update probability must lie in (0, 1], got {update_prob}"
            )));
        }
        let mut shadow = model.clone();
        shadow.unfreeze_all();
        Ok(Self {
            shadow,
            decay,
            update_prob,
        })
    }

    pub fn shadow(&self) -> &DualHeadModel {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update_prob(&self) -> f64 {
        self.update_prob
    }

    /// `θ_ema ← decay·θ_ema + (1 − decay)·θ`, elementwise over every part.
    pub fn update(&mut self, model: &DualHeadModel) -> Result<()> {
        if !self.shadow.same_shapes(model) {
            return Err(Error::State("EMA shadow shapes do not match the model".into()));
        }
        let decay = self.decay;
        let sources: Vec<Vec<f64>> = model.params().iter().map(|t| t.data().to_vec()).collect();
        let targets = self
            .shadow
            .layers_mut()
            .flat_map(|(_, l)| [&mut l.weight, &mut l.bias]);
        for (t, src) in targets.zip(&sources) {
            for (e, w) in t.data_mut().iter_mut().zip(src) {
                *e = decay * *e + (1.0 - decay) * w;
            }
        }
        Ok(())
    }

    /// Applies [`update`](Self::update) with probability `update_prob`.
    pub fn maybe_update(&mut self, model: &DualHeadModel, rng: &mut impl Rng) -> Result<bool> {
        if !self.shadow.same_shapes(model) {
            return Err(Error::State("EMA shadow shapes do not match the model".into()));
        }
        let fire = self.update_prob >= 1.0 || rng.random::<f64>() < self.update_prob;
        if fire {
            self.update(model)?;
        }
        Ok(fire)
    }
}

/// Predictions of the working model, or of the EMA shadow when `use_ema`.
pub fn predict(
    model: &DualHeadModel,
    inputs: &[f64],
    use_ema: bool,
    ema: Option<&EmaModel>,
) -> Result<Vec<usize>> {
    if use_ema {
        let ema = ema.ok_or_else(|| {
            Error::Config("EMA inference requested without an EMA model".into())
        })?;
        ema.shadow().predict_classes(inputs)
    } else {
        model.predict_classes(inputs)
    }
}

mod checkpoint {
    //! Layout (little-endian):
    //! `b"DBCK"`, `u32` version, `u32` input_dim, `u32` hidden count, hidden
    //! widths as `u32`, `u32` repr_dim, `u32` num_classes, `u32` parameter
    //! count, then per parameter: `u16` name length, UTF-8 name, `u32` rank,
    //! `u64` extents, `f64` values row-major.

    use super::*;

    const MAGIC: &[u8; 4] = b"DBCK";
    const VERSION: u32 = 1;

    pub(super) fn encode(m: &DualHeadModel) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &m.cfg;
        out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.hidden_dims.len() as u32).to_le_bytes());
        for h in &c.hidden_dims {
            out.extend_from_slice(&(*h as u32).to_le_bytes());
        }
        out.extend_from_slice(&(c.repr_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.num_classes as u32).to_le_bytes());
        let params = m.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            let end = self
                .pos
                .checked_add(n)
                .filter(|e| *e <= self.bytes.len())
                .ok_or_else(|| Error::Decode("checkpoint truncated".into()))?;
            let s = &self.bytes[self.pos..end];
            self.pos = end;
            Ok(s)
        }
        fn u16(&mut self) -> Result<u16> {
            Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
        }
        fn u32(&mut self) -> Result<usize> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
        }
        fn u64(&mut self) -> Result<usize> {
            usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
                .map_err(|_| Error::Decode("extent overflows usize".into()))
        }
        fn f64(&mut self) -> Result<f64> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    pub(super) fn decode(bytes: &[u8]) -> Result<DualHeadModel> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Decode("not a checkpoint (bad magic)".into()));
        }
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
        }
        let input_dim = c.u32()?;
        let n_hidden = c.u32()?;
        if n_hidden > 1024 {
            return Err(Error::Decode(format!("implausible layer count {n_hidden}")));
        }
        let hidden_dims = (0..n_hidden).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let cfg = EncoderConfig {
            input_dim,
            hidden_dims,
            repr_dim: c.u32()?,
            num_classes: c.u32()?,
        };
        cfg.validate()
            .map_err(|e| Error::Decode(format!("invalid encoder header: {e}")))?;
        let mut model = DualHeadModel::init(&cfg, 0)?;
        let count = c.u32()?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if count != expected.len() {
            return Err(Error::Decode(format!(
                "expected {} parameters, found {count}",
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let len = c.u16()? as usize;
            let got = std::str::from_utf8(c.take(len)?)
                .map_err(|_| Error::Decode("parameter name is not UTF-8".into()))?;
            if got != name {
                return Err(Error::Decode(format!("expected parameter {name}, found {got}")));
            }
            let rank = c.u32()?;
            let dims = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Decode(format!(
                    "parameter {name} has shape {dims:?}, expected {shape:?}"
                )));
            }
            let n: usize = dims.iter().product();
            values.push((0..n).map(|_| c.f64()).collect::<Result<Vec<_>>>()?);
        }
        if c.pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after checkpoint".into()));
        }
        let targets = model
            .layers_mut()
            .flat_map(|(_, l)| [&mut l.weight, &mut l.bias]);
        for (t, v) in targets.zip(values) {
            t.data_mut().copy_from_slice(&v);
        }
        Ok(model)
    }
}
