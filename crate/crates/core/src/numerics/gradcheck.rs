use crate::error::{Error, Result};

use super::Tensor;

/// Central differences `(f(p + h·e_k) − f(p − h·e_k)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, p: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract("finite difference step must be positive".into()));
    }
    let mut probe = p.clone();
    probe.zero_grad();
    let mut out = vec![0.0; p.numel()];
    for (k, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::new(p.shape(), out)
}

/// Max over coordinates of `|a − b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
