//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{arg_err, AutogradError, Result};
use crate::tape::{DiffTensor, Tape};

/// Central-difference estimate of `∂f/∂x` at `values`, evaluating `f` on a
/// fresh tape for every perturbation.
pub fn numeric_gradient<F>(f: F, shape: &[usize], values: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&DiffTensor) -> Result<DiffTensor>,
{
    if !(h > 0.0) {
        return arg_err("finite_diff_check", format!("step must be positive, got {h}"));
    }
    let eval = |v: Vec<f64>| -> Result<f64> {
        let tape = Tape::new();
        let x = tape.constant(shape, v)?;
        let y = f(&x).map_err(|e| match e {
            AutogradError::NonFinite { .. } => AutogradError::NonFinite { op: "finite_diff_check" },
            other => other,
        })?;
        let out = y.item()?;
        if !out.is_finite() {
            return Err(AutogradError::NonFinite { op: "finite_diff_check" });
        }
        Ok(out)
    };
    let mut grad = Vec::with_capacity(values.len());
    let mut probe = values.to_vec();
    for i in 0..values.len() {
        probe[i] = values[i] + h;
        let plus = eval(probe.clone())?;
        probe[i] = values[i] - h;
        let minus = eval(probe.clone())?;
        probe[i] = values[i];
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Gradient of `f` at `x` computed by one reverse sweep.
pub fn analytic_gradient<F>(f: F, x: &DiffTensor) -> Result<Vec<f64>>
where
    F: Fn(&DiffTensor) -> Result<DiffTensor>,
{
    let tape = Tape::new();
    let leaf = tape.variable(x.shape(), x.values().to_vec())?;
    let y = f(&leaf)?;
    tape.backprop(&y)?;
    Ok(leaf.grad())
}

/// Max over elements of `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &DiffTensor, h: f64) -> Result<f64>
where
    F: Fn(&DiffTensor) -> Result<DiffTensor>,
{
    let numeric = numeric_gradient(&f, x.shape(), x.values(), h)?;
    let analytic = analytic_gradient(&f, x)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max))
}
