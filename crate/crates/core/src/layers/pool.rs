use super::{expect_rank, expect_same_shape, Layer, Mode};
use crate::error::Result;
use crate::tensor::Tensor;

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped.
/// Gradient goes to the first maximal element in row-major order.
#[derive(Debug, Default)]
pub struct MaxPool2x2 {
    input_shape: Option<Vec<usize>>,
    argmax: Vec<usize>,
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for MaxPool2x2 {
    fn name(&self) -> String {
        "maxpool2x2".into()
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_rank(input, 4, "maxpool2x2")?;
        let s = input.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(crate::Error::Shape(format!("maxpool2x2 input too small: {s:?}")));
        }
        let mut out = Tensor::zeros(&[b, c, oh, ow])?;
        self.argmax.clear();
        self.argmax.reserve(out.len());
        let x = input.data();
        let dst = out.data_mut();
        let mut o = 0;
        for plane in 0..b * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + (2 * y + dy) * w + 2 * xx + dx;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                    dst[o] = x[best];
                    self.argmax.push(best);
                    o += 1;
                }
            }
        }
        self.input_shape = Some(s.to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| crate::Error::State("maxpool2x2: backward called before forward".into()))?;
        let out_shape = [shape[0], shape[1], shape[2] / 2, shape[3] / 2];
        expect_same_shape(grad_out, &out_shape, "maxpool2x2")?;
        let mut grad = Tensor::zeros(shape)?;
        let g = grad.data_mut();
        for (&at, &go) in self.argmax.iter().zip(grad_out.data()) {
            g[at] += go;
        }
        Ok(grad)
    }
}

/// `[B, ...] -> [B, prod(...)]`.
#[derive(Debug, Default)]
pub struct Flatten {
    input_shape: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Flatten {
    fn name(&self) -> String {
        "flatten".into()
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let b = input.shape()[0];
        self.input_shape = Some(input.shape().to_vec());
        input.clone().reshape(&[b, input.len() / b])
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| crate::Error::State("flatten: backward called before forward".into()))?;
        grad_out.clone().reshape(shape)
    }
}

/// Per-channel maximum over all spatial positions: `[B, C, H, W] -> [B, C]`.
#[derive(Debug, Default)]
pub struct GlobalMaxPool {
    input_shape: Option<Vec<usize>>,
    argmax: Vec<usize>,
}

impl GlobalMaxPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalMaxPool {
    fn name(&self) -> String {
        "gmp".into()
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_rank(input, 4, "gmp")?;
        let s = input.shape();
        let hw = s[2] * s[3];
        let mut out = Tensor::zeros(&[s[0], s[1]])?;
        self.argmax.clear();
        for (plane, dst) in out.data_mut().iter_mut().enumerate() {
            let vals = &input.data()[plane * hw..(plane + 1) * hw];
            let mut best = 0;
            for (i, &v) in vals.iter().enumerate().skip(1) {
                if v > vals[best] {
                    best = i;
                }
            }
            *dst = vals[best];
            self.argmax.push(plane * hw + best);
        }
        self.input_shape = Some(s.to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let shape = self
            .input_shape
            .as_ref()
            .ok_or_else(|| crate::Error::State("gmp: backward called before forward".into()))?;
        expect_same_shape(grad_out, &shape[..2], "gmp")?;
        let mut grad = Tensor::zeros(shape)?;
        for (&at, &g) in self.argmax.iter().zip(grad_out.data()) {
            grad.data_mut()[at] += g;
        }
        Ok(grad)
    }
}

/// Per-channel mean over all spatial positions: `[B, C, H, W] -> [B, C]`.
#[derive(Debug, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for GlobalAvgPool {
    fn name(&self) -> String {
        "gap".into()
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        expect_rank(input, 4, "gap")?;
        let s = input.shape();
        let hw = s[2] * s[3];
        let mut out = Tensor::zeros(&[s[0], s[1]])?;
        for (plane, dst) in out.data_mut().iter_mut().enumerate() {
            *dst = input.data()[plane * hw..(plane + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        self.input_shape = Some(s.to_vec());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let s = self
            .input_shape
            .clone()
            .ok_or_else(|| crate::Error::State("gap: backward called before forward".into()))?;
        expect_same_shape(grad_out, &s[..2], "gap")?;
        let mut grad = Tensor::zeros(&s)?;
        let hw = s[2] * s[3];
        for (plane, &g) in grad_out.data().iter().enumerate() {
            grad.data_mut()[plane * hw..(plane + 1) * hw].fill(g / hw as f64);
        }
        Ok(grad)
    }
}
