use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// `(f(x+ε) − f(x−ε)) / 2ε` for a scalar function of one perturbed coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, eps: f64) -> Result<f64> {
    let plus = f(eps)?;
    let minus = f(-eps)?;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares reverse-mode gradients of the scalar function `f` at `x`
/// against central differences and returns the largest
/// [`relative_error`] over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::contract(format!(
            "finite-difference step {eps} outside [1e-7, 1e-4]"
        )));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        g.value(out).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let numeric = central_difference(
            |delta| {
                let mut p = x.clone();
                p.data_mut()[i] += delta;
                eval(p)
            },
            eps,
        )?;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
