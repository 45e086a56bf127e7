use super::{Graph, Tensor, Var};
use crate::error::Result;

/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of a scalar function against central
/// differences with step `h`, returning the worst relative error over all
/// coordinates of `point`. A NaN anywhere yields NaN.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let y = f(&mut g, x)?;
    g.backward(y)?;
    let analytic = match g.grad(x) {
        Some(t) => t.data().to_vec(),
        None => vec![0.0; point.len()],
    };

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(p);
        let y = f(&mut g, x)?;
        g.value(y).item()
    };

    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = relative_error(*a, numeric);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}
