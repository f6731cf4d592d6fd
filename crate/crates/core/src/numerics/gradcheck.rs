use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const GRAD_CHECK_EPS: f32 = 1e-3;

/// Compares the reverse-mode gradient of scalar `f` at `x` with central
/// differences at `ε = 1e-3`. Returns `max_i |g_i − n_i| / max_i |n_i|`
/// (or the absolute error when the numeric gradient vanishes).
pub fn grad_check<F>(f: F, x: &Tensor) -> Result<f32>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true)?;
    let y = f(&mut g, xv)?;
    let grads = g.backward(y)?;
    let analytic: Vec<f32> = grads.get(xv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t, false)?;
        let y = f(&mut g, v)?;
        let out = g.data(y)[0];
        if !out.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        Ok(out as f64)
    };

    let mut numeric = vec![0.0f64; x.len()];
    for (i, n) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.data_mut()[i] += GRAD_CHECK_EPS;
        minus.data_mut()[i] -= GRAD_CHECK_EPS;
        let step = plus.data()[i] as f64 - minus.data()[i] as f64;
        *n = (eval(plus)? - eval(minus)?) / step;
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a as f64 - n).abs())
        .fold(0.0f64, f64::max);
    if !worst.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite gradient".into()));
    }
    Ok(if scale > 1e-6 { worst / scale } else { worst } as f32)
}
