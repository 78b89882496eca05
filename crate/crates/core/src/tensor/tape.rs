use std::cell::{Ref, RefCell};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Square(usize),
    Exp(usize),
    Ln(usize),
    Clamp(usize, f64, f64),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    WeightedSum(usize, Vec<f64>),
    LogSoftmax(usize),
    LogSoftmaxOffDiag(usize),
    L2Normalize(usize, Vec<f64>),
    PairwiseDistances(usize),
    Gaussian { input: usize, mu: f64, sigma_sq: f64 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// How [`Var::detach`] behaves. Replay substitutes the values captured during
/// a recorded pass, so a perturbed re-evaluation sees the same stop-gradient
/// targets as the base evaluation.
#[derive(Debug, Default)]
enum DetachLog {
    #[default]
    Off,
    Record(Vec<Vec<f64>>),
    Replay(Vec<Vec<f64>>, usize),
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    detach: RefCell<DetachLog>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does
    /// not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Vec<f64> {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[var.id]])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that captures every detached value in recording order.
    pub fn recording_detached() -> Self {
        Self {
            nodes: RefCell::default(),
            detach: RefCell::new(DetachLog::Record(Vec::new())),
        }
    }

    /// A tape whose detach operations return `values` in order instead of
    /// their live inputs.
    pub fn replaying_detached(values: Vec<Vec<f64>>) -> Self {
        Self {
            nodes: RefCell::default(),
            detach: RefCell::new(DetachLog::Replay(values, 0)),
        }
    }

    /// Values captured by a recording tape.
    pub fn detached_values(&self) -> Vec<Vec<f64>> {
        match &*self.detach.borrow() {
            DetachLog::Record(v) => v.clone(),
            DetachLog::Replay(v, _) => v.clone(),
            DetachLog::Off => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var<'_>> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Dimension {
                op: "leaf",
                left: shape,
                right: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    /// Registers a tensor; it participates in gradients iff it requires grad.
    pub fn tensor(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers a tensor as a trainable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var<'_>> {
        self.leaf(shape, value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push(vec![], vec![value], Op::Leaf, false)
    }

    /// Reverse pass from a scalar. Nodes are visited in reverse recording
    /// order exactly once; contributions from multiple paths add.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Rank(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            sizes: nodes.iter().map(|n| n.value.len()).collect(),
        })
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match grads[id].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
        None => grads[id] = Some(g),
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (1, shape.iter().product()),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(&nodes[*a].shape);
            let n = nodes[*b].shape[1];
            if nodes[*a].requires_grad {
                let da = kernels::matmul_bt(g, &nodes[*b].value, m, k, n);
                accumulate(grads, nodes, *a, da);
            }
            if nodes[*b].requires_grad {
                let db = kernels::matmul_at(&nodes[*a].value, g, m, k, n);
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = rows_cols(&nodes[*x].shape);
            accumulate(grads, nodes, *x, kernels::transpose(g, c, r));
        }
        Op::AddRow(x, b) => {
            accumulate(grads, nodes, *x, g.to_vec());
            if nodes[*b].requires_grad {
                let c = nodes[*b].value.len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                accumulate(grads, nodes, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.to_vec());
            accumulate(grads, nodes, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(grads, nodes, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
            accumulate(grads, nodes, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
        }
        Op::Affine(x, scale) => {
            accumulate(grads, nodes, *x, g.iter().map(|v| v * scale).collect());
        }
        Op::Square(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect());
        }
        Op::Exp(x) => {
            let y = &node.value;
            accumulate(grads, nodes, *x, g.iter().zip(y).map(|(g, y)| g * y).collect());
        }
        Op::Ln(x) => {
            let xv = &nodes[*x].value;
            accumulate(grads, nodes, *x, g.iter().zip(xv).map(|(g, x)| g / x).collect());
        }
        Op::Clamp(x, lo, hi) => {
            let xv = &nodes[*x].value;
            let d = g
                .iter()
                .zip(xv)
                .map(|(g, x)| if *x >= *lo && *x <= *hi { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            let d = g
                .iter()
                .zip(xv)
                .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                .collect();
            accumulate(grads, nodes, *x, d);
        }
        Op::Sum(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, nodes, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len();
            accumulate(grads, nodes, *x, vec![g[0] / n as f64; n]);
        }
        Op::WeightedSum(x, w) => {
            accumulate(grads, nodes, *x, w.iter().map(|w| w * g[0]).collect());
        }
        Op::LogSoftmax(x) => {
            let (r, c) = rows_cols(&node.shape);
            let y = &node.value;
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let gs: f64 = g[i * c..(i + 1) * c].iter().sum();
                for j in 0..c {
                    d[i * c + j] = g[i * c + j] - y[i * c + j].exp() * gs;
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::LogSoftmaxOffDiag(x) => {
            let n = node.shape[0];
            let y = &node.value;
            let mut d = vec![0.0; n * n];
            for i in 0..n {
                let gs: f64 = (0..n).filter(|&j| j != i).map(|j| g[i * n + j]).sum();
                for j in (0..n).filter(|&j| j != i) {
                    d[i * n + j] = g[i * n + j] - y[i * n + j].exp() * gs;
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::L2Normalize(x, divisors) => {
            let (r, c) = rows_cols(&node.shape);
            let y = &node.value;
            let xv = &nodes[*x].value;
            let mut d = vec![0.0; r * c];
            for i in 0..r {
                let s = divisors[i];
                let row = i * c..(i + 1) * c;
                let norm = xv[row.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm >= s {
                    let yg: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        d[j] = (g[j] - y[j] * yg) / s;
                    }
                } else {
                    for j in row {
                        d[j] = g[j] / s;
                    }
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::PairwiseDistances(x) => {
            let (r, c) = rows_cols(&nodes[*x].shape);
            let xv = &nodes[*x].value;
            let dist = &node.value;
            let mut d = vec![0.0; r * c];
            let mut k = 0;
            for i in 0..r {
                for j in (i + 1)..r {
                    if dist[k] > 0.0 {
                        let coef = g[k] / dist[k];
                        for col in 0..c {
                            let diff = xv[i * c + col] - xv[j * c + col];
                            d[i * c + col] += coef * diff;
                            d[j * c + col] -= coef * diff;
                        }
                    }
                    k += 1;
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Gaussian { input, mu, sigma_sq } => {
            let xv = &nodes[*input].value;
            let y = &node.value;
            let d = g
                .iter()
                .zip(xv.iter().zip(y))
                .map(|(g, (x, y))| g * y * (-(x - mu) / sigma_sq))
                .collect();
            accumulate(grads, nodes, *input, d);
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.node(self.id).value.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.node(self.id).value.len()
    }

    /// First element; intended for scalars.
    pub fn item(&self) -> f64 {
        self.tape.node(self.id).value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    fn unary(&self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, op, rg)
    }

    fn map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value) = {
            let n = self.tape.node(self.id);
            (n.shape.clone(), n.value.iter().map(|v| f(*v)).collect())
        };
        self.unary(value, shape, op)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape().as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<Vec<usize>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Dimension { op, left: a, right: b });
        }
        Ok(a)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a_shape, b_shape) = (self.shape(), other.shape());
        let (m, k, n) = match (a_shape.as_slice(), b_shape.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::Dimension {
                    op: "matmul",
                    left: a_shape,
                    right: b_shape,
                })
            }
        };
        let value = kernels::matmul(
            &self.tape.node(self.id).value,
            &self.tape.node(other.id).value,
            m,
            k,
            n,
        );
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self
            .tape
            .push(vec![m, n], value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("transpose")?;
        let value = kernels::transpose(&self.tape.node(self.id).value, r, c);
        Ok(self.unary(value, vec![c, r], Op::Transpose(self.id)))
    }

    /// Adds a length-`c` vector to every row of an `n×c` matrix.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("add_row")?;
        let b_shape = bias.shape();
        if bias.numel() != c {
            return Err(Error::Dimension {
                op: "add_row",
                left: vec![r, c],
                right: b_shape,
            });
        }
        let value = {
            let x = self.tape.node(self.id);
            let b = self.tape.node(bias.id);
            x.value
                .chunks(c)
                .flat_map(|row| row.iter().zip(&b.value).map(|(v, b)| v + b))
                .collect()
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self
            .tape
            .push(vec![r, c], value, Op::AddRow(self.id, bias.id), rg))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let shape = self.same_shape(other, name)?;
        let value = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            a.value.iter().zip(&b.value).map(|(x, y)| f(*x, *y)).collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// `scale·x + shift`
    pub fn affine(&self, scale: f64, shift: f64) -> Var<'t> {
        self.map(Op::Affine(self.id, scale), |v| scale * v + shift)
    }

    pub fn scale(&self, scale: f64) -> Var<'t> {
        self.affine(scale, 0.0)
    }

    pub fn square(&self) -> Var<'t> {
        self.map(Op::Square(self.id), |v| v * v)
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.map(Op::Ln(self.id), f64::ln)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.map(Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    /// Elementwise `max(0, x)`; the subgradient at zero is zero.
    pub fn relu(&self) -> Var<'t> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    /// `peak · exp(-(x-mu)² / (2 sigma_sq))`
    pub fn gaussian(&self, mu: f64, sigma_sq: f64, peak: f64) -> Var<'t> {
        self.map(
            Op::Gaussian {
                input: self.id,
                mu,
                sigma_sq,
            },
            |v| peak * (-(v - mu).powi(2) / (2.0 * sigma_sq)).exp(),
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.tape.node(self.id).value.iter().sum();
        self.unary(vec![s], vec![], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let (s, n) = {
            let node = self.tape.node(self.id);
            (node.value.iter().sum::<f64>(), node.value.len())
        };
        self.unary(vec![s / n as f64], vec![], Op::Mean(self.id))
    }

    /// `Σ wᵢ·xᵢ` with constant weights.
    pub fn weighted_sum(&self, weights: &[f64]) -> Result<Var<'t>> {
        let s = {
            let node = self.tape.node(self.id);
            if node.value.len() != weights.len() {
                return Err(Error::Dimension {
                    op: "weighted_sum",
                    left: node.shape.clone(),
                    right: vec![weights.len()],
                });
            }
            node.value.iter().zip(weights).map(|(x, w)| x * w).sum()
        };
        Ok(self.unary(vec![s], vec![], Op::WeightedSum(self.id, weights.to_vec())))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&self) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("log_softmax")?;
        if c == 0 {
            return Err(Error::Dimension {
                op: "log_softmax",
                left: vec![r, c],
                right: vec![],
            });
        }
        let value = kernels::log_softmax_rows(&self.tape.node(self.id).value, r, c);
        Ok(self.unary(value, vec![r, c], Op::LogSoftmax(self.id)))
    }

    /// Row-wise log-softmax of a square matrix excluding the diagonal from
    /// each row's normalizer; diagonal outputs are zero and carry no gradient.
    pub fn log_softmax_off_diagonal(&self) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("log_softmax_off_diagonal")?;
        if r != c || r < 2 {
            return Err(Error::Dimension {
                op: "log_softmax_off_diagonal",
                left: vec![r, c],
                right: vec![],
            });
        }
        let value = kernels::log_softmax_off_diagonal(&self.tape.node(self.id).value, r);
        Ok(self.unary(value, vec![r, c], Op::LogSoftmaxOffDiag(self.id)))
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&self, eps: f64) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("l2_normalize_rows")?;
        let (value, divisors) =
            kernels::l2_normalize_rows(&self.tape.node(self.id).value, r, c, eps);
        Ok(self.unary(value, vec![r, c], Op::L2Normalize(self.id, divisors)))
    }

    /// Condensed Euclidean distances between all row pairs `i < j`.
    pub fn pairwise_distances(&self) -> Result<Var<'t>> {
        let (r, c) = self.matrix_dims("pairwise_distances")?;
        if r < 2 {
            return Err(Error::BatchTooSmall {
                op: "pairwise_distances",
                need: 2,
                got: r,
            });
        }
        let value = kernels::pairwise_distances(&self.tape.node(self.id).value, r, c);
        let k = value.len();
        Ok(self.unary(value, vec![k], Op::PairwiseDistances(self.id)))
    }

    /// A gradient-free copy of this value.
    pub fn detach(&self) -> Var<'t> {
        let shape = self.shape();
        let live = self.value();
        let value = {
            let mut log = self.tape.detach.borrow_mut();
            match &mut *log {
                DetachLog::Off => live,
                DetachLog::Record(values) => {
                    values.push(live.clone());
                    live
                }
                DetachLog::Replay(values, cursor) => {
                    let v = values.get(*cursor).cloned().unwrap_or(live);
                    *cursor += 1;
                    v
                }
            }
        };
        self.tape.push(shape, value, Op::Leaf, false)
    }
}
