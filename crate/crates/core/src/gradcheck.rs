//! Central finite-difference checks for layer backward passes.
//!
//! The probe loss is `L = sum(forward(x) * probe)` for a fixed random
//! `probe`, so `probe` is exactly the upstream gradient fed to `backward`.

use crate::error::Result;
use crate::layers::{Layer, Mode};
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors (L2 norms).
/// Two all-zero vectors compare as `0`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Relative error of the input gradient.
    pub input: f64,
    /// Relative error per parameter, by name.
    pub params: Vec<(String, f64)>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|(_, e)| *e).fold(self.input, f64::max)
    }
}

fn probe_loss(layer: &mut dyn Layer, input: &Tensor, probe: &Tensor) -> Result<f64> {
    let out = layer.forward(input, Mode::Training)?;
    Ok(out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum())
}

/// Compares `layer.backward` against central differences with step `h`
/// for the input and every parameter coordinate.
///
/// The layer must be deterministic in training mode (not dropout).
pub fn check_layer(layer: &mut dyn Layer, input: &Tensor, probe: &Tensor, h: f64) -> Result<GradReport> {
    layer.forward(input, Mode::Training)?;
    layer.zero_grad();
    let analytic_input = layer.backward(probe)?;
    let analytic_params: Vec<(String, Vec<f64>)> = layer
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut numeric = Vec::with_capacity(input.len());
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = probe_loss(layer, &x, probe)?;
        x.data_mut()[i] = orig - h;
        let down = probe_loss(layer, &x, probe)?;
        x.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let input_err = relative_error(analytic_input.data(), &numeric);

    let mut params = Vec::new();
    for (pi, (name, analytic)) in analytic_params.iter().enumerate() {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let orig = layer.params()[pi].value.data()[j];
            layer.params_mut()[pi].value.data_mut()[j] = orig + h;
            let up = probe_loss(layer, input, probe)?;
            layer.params_mut()[pi].value.data_mut()[j] = orig - h;
            let down = probe_loss(layer, input, probe)?;
            layer.params_mut()[pi].value.data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        params.push((name.clone(), relative_error(analytic, &numeric)));
    }
    Ok(GradReport {
        input: input_err,
        params,
    })
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
