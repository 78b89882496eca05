use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`, returning the largest
/// `|Δ| / max(1, |g|)` over coordinates.
///
/// Detached values are held at their base-point values while perturbing, so
/// the numeric side differentiates the same surrogate objective as the tape.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_check`]; the maximum is taken over all
/// coordinates of all inputs.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Value(format!("step must be positive, got {h}")));
    }
    let base = Tape::recording_detached();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| base.param(t)).collect();
    let out = f(&base, &vars)?;
    if !out.item().is_finite() {
        return Err(Error::Numeric("objective is not finite at the base point".into()));
    }
    let grads = base.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let detached = base.detached_values();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::replaying_detached(detached.clone());
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.tensor(t)).collect();
        let v = f(&tape, &vars)?.item();
        if !v.is_finite() {
            return Err(Error::Numeric("objective is not finite near the base point".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst: f64 = 0.0;
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (numeric - grad[i]).abs() / grad[i].abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
