//! Dense 64-bit tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tensor`] owns values and an optional gradient buffer; it is the storage
//! type for model parameters. Differentiable computation happens on a
//! [`Tape`]: tensors are registered as leaves, operations record nodes, and
//! [`Tape::backward`] replays the record in reverse.

mod check;
pub(crate) mod kernels;
mod optim;
mod tape;

pub use check::{finite_diff_check, finite_diff_check_many, DEFAULT_STEP};
pub use optim::SgdOptimizer;
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    /// Marks the tensor as trainable, allocating a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, requires: bool) {
        match (requires, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![0.0; self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        let shape = self.shape.clone();
        let buf = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::State("tensor does not require grad".into()))?;
        if buf.len() != g.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                left: shape,
                right: vec![g.len()],
            });
        }
        buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn grad_buffer_mirrors_shape() {
        let t = Tensor::zeros(vec![3, 4]).with_grad();
        assert_eq!(t.grad().unwrap().len(), 12);
        let mut t = t;
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }
}
