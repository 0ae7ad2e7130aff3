use super::{cached, expect_same_shape, Layer, Mode};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` at train time,
/// so inference is the identity.
pub struct Dropout {
    rate: f64,
    rng: Rng,
    mask: Option<Tensor>,
}

impl Dropout {
    pub fn new(rate: f64, rng: Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        Ok(Dropout { rate, rng, mask: None })
    }
}

impl Layer for Dropout {
    fn name(&self) -> String {
        format!("dropout{}", self.rate)
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Inference || self.rate == 0.0 {
            self.mask = Some(Tensor::full(input.shape(), 1.0)?);
            return Ok(input.clone());
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mut mask = Tensor::zeros(input.shape())?;
        for m in mask.data_mut() {
            *m = if self.rng.uniform() < self.rate { 0.0 } else { keep };
        }
        let out = input.mul(&mask)?;
        self.mask = Some(mask);
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let mask = cached(&self.mask, "dropout")?;
        expect_same_shape(grad_out, mask.shape(), "dropout")?;
        grad_out.mul(mask)
    }
}
