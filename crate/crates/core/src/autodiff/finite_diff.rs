use super::Tensor;
use crate::error::{DadaError, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time:
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(DadaError::invalid(format!("step size must be positive, got {h}")));
    }
    let mut probe = x.clone();
    probe.grad = None;
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Largest violation of `|a - b| <= rel * max(|a|, |b|) + abs_floor` over all
/// coordinates, reported as the ratio to the allowed error (<= 1 passes).
pub fn grad_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (rel * a.abs().max(n.abs()) + abs_floor))
        .fold(0.0, f64::max)
}
