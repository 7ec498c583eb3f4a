//! Central-difference verification of analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Evaluate `f` at `x` on a fresh graph without differentiating.
fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarRoot(g.shape(out).to_vec()));
    }
    let y = g.scalar(out);
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f returned {y}")));
    }
    Ok(y)
}

/// Analytic gradient of scalar `f` at `x`, via one backward pass.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let out = f(&mut g, v)?;
    let y = g.value(out).data().first().copied().unwrap_or(f64::NAN);
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("grad_check: f returned {y}")));
    }
    g.backward(out)?;
    Ok(g.grad(v).to_vec())
}

/// Central-difference gradient of scalar `f` at `x`.
pub fn numerical_gradient<F>(f: &F, x: &Tensor, epsilon: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = eval(f, &probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = eval(f, &probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(out)
}

/// Largest relative disagreement between the analytic gradient of `f` and
/// its central-difference estimate, over every coordinate of `x`.
///
/// The per-coordinate error is `|a − n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!(
            "grad_check: epsilon must be positive, got {epsilon}"
        )));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numerical_gradient(&f, x, epsilon)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / f64::max(1e-8, a.abs() + n.abs()))
        .fold(0.0, f64::max))
}
