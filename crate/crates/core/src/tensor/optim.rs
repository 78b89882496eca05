use super::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with optional heavy-ball momentum.
///
/// Velocity buffers are keyed by slot, so callers that skip a parameter
/// (frozen parts) keep its momentum state intact.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Updates every parameter, using its position as the slot.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        for (slot, p) in params.iter_mut().enumerate() {
            self.update(slot, p)?;
        }
        Ok(())
    }

    /// `v ← μ·v + g; θ ← θ − lr·v`, then zeroes the gradient.
    pub fn update(&mut self, slot: usize, param: &mut Tensor) -> Result<()> {
        let grad = param
            .grad()
            .ok_or_else(|| Error::State(format!("parameter in slot {slot} has no gradient")))?
            .to_vec();
        if self.momentum == 0.0 {
            for (theta, g) in param.data_mut().iter_mut().zip(&grad) {
                *theta -= self.learning_rate * g;
            }
        } else {
            if self.velocity.len() <= slot {
                self.velocity.resize(slot + 1, None);
            }
            let v = self.velocity[slot].get_or_insert_with(|| vec![0.0; grad.len()]);
            for ((theta, g), v) in param.data_mut().iter_mut().zip(&grad).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *theta -= self.learning_rate * *v;
            }
        }
        param.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::new(vec![1], vec![value]).unwrap().with_grad();
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn plain_step() {
        let mut opt = SgdOptimizer::new(0.1, 0.0).unwrap();
        let mut p = param(1.0, 0.5);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut opt = SgdOptimizer::new(0.1, 0.0).unwrap();
        let mut p = param(1.0, 0.0);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn momentum_matches_unrolled_recursion() {
        let (lr, mu, g, theta0) = (0.1, 0.9, 0.5, 1.0);
        let mut opt = SgdOptimizer::new(lr, mu).unwrap();
        let mut p = param(theta0, g);
        opt.step(&mut [&mut p]).unwrap();
        p.accumulate_grad(&[g]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        let v1 = g;
        let v2 = mu * v1 + g;
        let expected = theta0 - lr * v1 - lr * v2;
        assert!((p.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut opt = SgdOptimizer::new(0.1, 0.0).unwrap();
        let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(matches!(opt.step(&mut [&mut p]), Err(Error::State(_))));
    }
}
