use super::{cached, expect_rank, expect_same_shape, Layer, Mode, Param, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Mat, Tensor};

/// Fully connected layer, `y = x W + b` with `W: [in, out]`.
pub struct Dense {
    inputs: usize,
    outputs: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Dense {
    /// He-normal weights, zero bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Result<Self> {
        let w = Tensor::random_normal(rng, &[inputs, outputs], 0.0, (2.0 / inputs as f64).sqrt())?;
        Self::from_parts(w, Tensor::zeros(&[outputs])?)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        expect_rank(&weight, 2, "dense weight")?;
        let (inputs, outputs) = (weight.shape()[0], weight.shape()[1]);
        if bias.shape() != [outputs] {
            return Err(Error::shape(format!("dense bias {:?} for {outputs} outputs", bias.shape())));
        }
        Ok(Dense {
            inputs,
            outputs,
            weight: Param::new("dense.weight", ParamKind::Weight, weight),
            bias: Param::new("dense.bias", ParamKind::Bias, bias),
            input: None,
        })
    }

    pub fn param_count(&self) -> usize {
        (self.inputs + 1) * self.outputs
    }
}

impl Layer for Dense {
    fn name(&self) -> String {
        format!("dense{}", self.outputs)
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        expect_rank(input, 2, "dense")?;
        let b = input.shape()[0];
        if input.shape()[1] != self.inputs {
            return Err(Error::shape(format!(
                "dense expects {} features, got {}",
                self.inputs,
                input.shape()[1]
            )));
        }
        let mut out = Tensor::zeros(&[b, self.outputs])?;
        for row in out.data_mut().chunks_mut(self.outputs) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            b,
            self.inputs,
            self.outputs,
            1.0,
            Mat::row_major(input.data(), self.inputs),
            Mat::row_major(self.weight.value.data(), self.outputs),
            1.0,
            out.data_mut(),
        );
        self.input = (mode == Mode::Training).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = cached(&self.input, "dense")?;
        let b = input.shape()[0];
        expect_same_shape(grad_out, &[b, self.outputs], "dense")?;
        gemm(
            self.inputs,
            b,
            self.outputs,
            1.0,
            Mat::transposed(input.data(), self.inputs),
            Mat::row_major(grad_out.data(), self.outputs),
            1.0,
            self.weight.grad.data_mut(),
        );
        for row in grad_out.data().chunks(self.outputs) {
            for (db, g) in self.bias.grad.data_mut().iter_mut().zip(row) {
                *db += g;
            }
        }
        let mut grad_in = Tensor::zeros(&[b, self.inputs])?;
        gemm(
            b,
            self.outputs,
            self.inputs,
            1.0,
            Mat::row_major(grad_out.data(), self.outputs),
            Mat::transposed(self.weight.value.data(), self.outputs),
            0.0,
            grad_in.data_mut(),
        );
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}
