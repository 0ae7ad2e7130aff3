use super::{cached, expect_same_shape, Layer, Mode};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Default)]
pub struct Relu {
    input: Option<Tensor>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn name(&self) -> String {
        "relu".into()
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let out = input.max_scalar(0.0)?;
        self.input = (mode == Mode::Training).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = cached(&self.input, "relu")?;
        expect_same_shape(grad_out, input.shape(), "relu")?;
        let mut grad = grad_out.clone();
        for (g, &x) in grad.data_mut().iter_mut().zip(input.data()) {
            if x <= 0.0 {
                *g = 0.0;
            }
        }
        Ok(grad)
    }
}
