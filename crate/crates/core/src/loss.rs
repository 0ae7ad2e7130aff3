use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits, `(softmax - onehot) / B`.
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!("logits must be [B, classes], got {:?}", logits.shape())));
    }
    let (b, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    logits.ensure_finite("logits")?;
    let mut grad = Tensor::zeros(&[b, classes])?;
    let mut loss = 0.0;
    for (n, (row, &label)) in logits.data().chunks(classes).zip(labels).enumerate() {
        let top = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let g = &mut grad.data_mut()[n * classes..(n + 1) * classes];
        let mut total = 0.0;
        for (gi, &z) in g.iter_mut().zip(row) {
            *gi = (z - top).exp();
            total += *gi;
        }
        loss += total.ln() - (row[label] - top);
        for gi in g.iter_mut() {
            *gi /= total * b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let (loss, _) = softmax_xent(&Tensor::zeros(&[3, 10]).unwrap(), &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logit() {
        let mut z = Tensor::zeros(&[1, 10]).unwrap();
        z.data_mut()[3] = 50.0;
        let (loss, _) = softmax_xent(&z, &[3]).unwrap();
        // loss = ln(1 + 9 e^-50) < 1e-9
        assert!(loss < 1e-9);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let z = Tensor::random_normal(&mut crate::rng::Rng::new(0), &[4, 10], 0.0, 3.0).unwrap();
        let (_, g) = softmax_xent(&z, &[1, 2, 3, 9]).unwrap();
        for row in g.data().chunks(10) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn bad_label() {
        let z = Tensor::zeros(&[1, 10]).unwrap();
        assert!(matches!(softmax_xent(&z, &[10]), Err(Error::Data(_))));
    }
}
