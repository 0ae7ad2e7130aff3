//! Same-padded, stride-1 2-D cross-correlation lowered to GEMM via im2col.

use super::{cached, expect_rank, expect_same_shape, Layer, Mode, Param, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, gemm_strided, Mat, Tensor};

pub struct Conv2d {
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    weight: Param,
    bias: Param,
    input: Option<Tensor>,
}

impl Conv2d {
    /// He-normal weights (`stddev = sqrt(2 / fan_in)`), zero bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::config(format!("same padding needs an odd kernel, got {kernel}")));
        }
        let fan_in = (in_channels * kernel * kernel) as f64;
        let w = Tensor::random_normal(
            rng,
            &[out_channels, in_channels, kernel, kernel],
            0.0,
            (2.0 / fan_in).sqrt(),
        )?;
        Self::from_parts(w, Tensor::zeros(&[out_channels])?)
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        expect_rank(&weight, 4, "conv2d weight")?;
        let s = weight.shape();
        let (out_channels, in_channels, kernel) = (s[0], s[1], s[2]);
        if s[3] != kernel || kernel % 2 == 0 {
            return Err(Error::shape(format!("conv2d needs square odd kernels, got {s:?}")));
        }
        if bias.shape() != [out_channels] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} for {out_channels} output channels",
                bias.shape()
            )));
        }
        Ok(Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::new("conv.weight", ParamKind::Weight, weight),
            bias: Param::new("conv.bias", ParamKind::Bias, bias),
            input: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Image rows per im2col tile, sized so a tile stays cache-resident.
    fn tile_rows(&self, h: usize, w: usize) -> usize {
        (TILE_ELEMS / (self.patch_len() * w)).clamp(1, h)
    }

    /// Lays output rows `y0..y1` of one sample `[C, H, W]` out as
    /// `[C*k*k, (y1-y0)*W]` with zero padding.
    fn im2col(&self, sample: &[f64], h: usize, w: usize, (y0, y1): (usize, usize), cols: &mut [f64]) {
        let k = self.kernel;
        let n = (y1 - y0) * w;
        for c in 0..self.in_channels {
            let plane = &sample[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let dst = &mut cols[row..row + n];
                    let (x0, x1, shift) = valid_span(kx, k, w);
                    for y in y0..y1 {
                        let line = &mut dst[(y - y0) * w..(y - y0 + 1) * w];
                        match source_row(y, ky, k, h) {
                            None => line.fill(0.0),
                            Some(sy) => {
                                let src = &plane[sy * w..(sy + 1) * w];
                                line[..x0].fill(0.0);
                                line[x1..].fill(0.0);
                                line[x0..x1].copy_from_slice(&src[shifted(x0, shift)..shifted(x1, shift)]);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters a tile back, accumulating.
    fn col2im(&self, cols: &[f64], h: usize, w: usize, (y0, y1): (usize, usize), sample: &mut [f64]) {
        let k = self.kernel;
        let n = (y1 - y0) * w;
        for c in 0..self.in_channels {
            let plane = &mut sample[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + ky) * k + kx) * n;
                    let src = &cols[row..row + n];
                    let (x0, x1, shift) = valid_span(kx, k, w);
                    for y in y0..y1 {
                        let Some(sy) = source_row(y, ky, k, h) else { continue };
                        let dst = &mut plane[sy * w + shifted(x0, shift)..sy * w + shifted(x1, shift)];
                        let line = &src[(y - y0) * w + x0..(y - y0) * w + x1];
                        for (d, s) in dst.iter_mut().zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Target size of one im2col tile, in elements (256 KiB).
const TILE_ELEMS: usize = 32 * 1024;

fn shifted(x: usize, shift: isize) -> usize {
    (x as isize + shift) as usize
}

/// Output columns `x0..x1` read input column `x + shift` for kernel column `kx`.
fn valid_span(kx: usize, k: usize, w: usize) -> (usize, usize, isize) {
    let shift = kx as isize - (k / 2) as isize;
    let x0 = (-shift).max(0) as usize;
    let x1 = (w as isize - shift.max(0)).max(x0 as isize) as usize;
    (x0.min(w), x1.min(w), shift)
}

/// Input row read by output row `y` under kernel row `ky`, if inside the image.
fn source_row(y: usize, ky: usize, k: usize, h: usize) -> Option<usize> {
    let sy = y as isize + ky as isize - (k / 2) as isize;
    (sy >= 0 && sy < h as isize).then_some(sy as usize)
}

impl Layer for Conv2d {
    fn name(&self) -> String {
        format!("conv{k}x{k}x{}", self.out_channels, k = self.kernel)
    }

    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        expect_rank(input, 4, "conv2d")?;
        let s = input.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv2d expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let hw = h * w;
        let patch = self.patch_len();
        let tile = self.tile_rows(h, w);
        let mut cols = vec![0.0; patch * tile * w];
        let mut out = Tensor::zeros(&[b, self.out_channels, h, w])?;
        let in_stride = c * hw;
        let out_stride = self.out_channels * hw;
        for n in 0..b {
            let sample = &input.data()[n * in_stride..(n + 1) * in_stride];
            let dst = &mut out.data_mut()[n * out_stride..(n + 1) * out_stride];
            for (o, bias) in self.bias.value.data().iter().enumerate() {
                dst[o * hw..(o + 1) * hw].fill(*bias);
            }
            for y0 in (0..h).step_by(tile) {
                let y1 = (y0 + tile).min(h);
                let cols_n = (y1 - y0) * w;
                self.im2col(sample, h, w, (y0, y1), &mut cols);
                gemm_strided(
                    self.out_channels,
                    patch,
                    cols_n,
                    1.0,
                    Mat::row_major(self.weight.value.data(), patch),
                    Mat::row_major(&cols, cols_n),
                    1.0,
                    &mut dst[y0 * w..],
                    hw as isize,
                    1,
                );
            }
        }
        self.input = (mode == Mode::Training).then(|| input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = cached(&self.input, "conv2d")?;
        let s = input.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        expect_same_shape(grad_out, &[b, self.out_channels, h, w], "conv2d")?;
        let hw = h * w;
        let patch = self.patch_len();
        let tile = self.tile_rows(h, w);
        let mut cols = vec![0.0; patch * tile * w];
        let mut dcols = vec![0.0; patch * tile * w];
        let mut grad_in = Tensor::zeros(s)?;
        let in_stride = c * hw;
        let out_stride = self.out_channels * hw;
        for n in 0..b {
            let g = &grad_out.data()[n * out_stride..(n + 1) * out_stride];
            let sample = &input.data()[n * in_stride..(n + 1) * in_stride];
            for (o, db) in self.bias.grad.data_mut().iter_mut().enumerate() {
                *db += g[o * hw..(o + 1) * hw].iter().sum::<f64>();
            }
            for y0 in (0..h).step_by(tile) {
                let y1 = (y0 + tile).min(h);
                let cols_n = (y1 - y0) * w;
                let g_tile = &g[y0 * w..];
                self.im2col(sample, h, w, (y0, y1), &mut cols);
                // dW^T += cols [patch, n] * g^T [n, O], written through dW's
                // transposed view so both operands stream contiguously
                gemm_strided(
                    patch,
                    cols_n,
                    self.out_channels,
                    1.0,
                    Mat::row_major(&cols, cols_n),
                    Mat {
                        data: g_tile,
                        row_stride: 1,
                        col_stride: hw as isize,
                    },
                    1.0,
                    self.weight.grad.data_mut(),
                    1,
                    patch as isize,
                );
                // dcols = W^T [patch, O] * g [O, n]
                gemm(
                    patch,
                    self.out_channels,
                    cols_n,
                    1.0,
                    Mat::transposed(self.weight.value.data(), patch),
                    Mat {
                        data: g_tile,
                        row_stride: hw as isize,
                        col_stride: 1,
                    },
                    0.0,
                    &mut dcols,
                );
                self.col2im(&dcols, h, w, (y0, y1), &mut grad_in.data_mut()[n * in_stride..(n + 1) * in_stride]);
            }
        }
        Ok(grad_in)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop same-padded cross-correlation.
    fn reference_conv(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
        let s = input.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ws = weight.shape();
        let (o, k) = (ws[0], ws[2]);
        let pad = (k / 2) as isize;
        let mut out = Tensor::zeros(&[b, o, h, w]).unwrap();
        for n in 0..b {
            for oc in 0..o {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias.data()[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky as isize - pad;
                                    let sx = x as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += input.data()[((n * c + ic) * h + sy as usize) * w + sx as usize]
                                        * weight.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((n * o + oc) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut rng = Rng::new(1);
        let x = Tensor::random_normal(&mut rng, &[1, 1, 5, 5], 0.0, 1.0).unwrap();
        let mut conv = Conv2d::from_parts(Tensor::zeros(&[1, 1, 3, 3]).unwrap(), Tensor::zeros(&[1]).unwrap()).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = Rng::new(2);
        let x = Tensor::random_normal(&mut rng, &[2, 1, 5, 5], 0.0, 1.0).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        k.data_mut()[4] = 1.0;
        let mut conv = Conv2d::from_parts(k, Tensor::zeros(&[1]).unwrap()).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_nested_loop_reference() {
        let mut rng = Rng::new(3);
        let x = Tensor::random_normal(&mut rng, &[1, 1, 5, 5], 0.0, 1.0).unwrap();
        let w = Tensor::random_normal(&mut rng, &[1, 1, 3, 3], 0.0, 1.0).unwrap();
        let b = Tensor::random_normal(&mut rng, &[1], 0.0, 1.0).unwrap();
        let expect = reference_conv(&x, &w, &b);
        let mut conv = Conv2d::from_parts(w.clone(), b.clone()).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        for (a, e) in y.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }

        let x = Tensor::random_normal(&mut rng, &[2, 3, 6, 4], 0.0, 1.0).unwrap();
        let w = Tensor::random_normal(&mut rng, &[4, 3, 3, 3], 0.0, 1.0).unwrap();
        let b = Tensor::random_normal(&mut rng, &[4], 0.0, 1.0).unwrap();
        let expect = reference_conv(&x, &w, &b);
        let mut conv = Conv2d::from_parts(w, b).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        for (a, e) in y.data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = Rng::new(4);
        let x = Tensor::random_normal(&mut rng, &[2, 2, 4, 4], 0.0, 1.0).unwrap();
        let mut conv = Conv2d::new(2, 3, 3, &mut rng).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        let gi = conv.backward(&Tensor::zeros(y.shape()).unwrap()).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(conv.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn bias_gradient_is_summed_grad_out() {
        let mut rng = Rng::new(5);
        let x = Tensor::random_normal(&mut rng, &[3, 2, 4, 5], 0.0, 1.0).unwrap();
        let mut conv = Conv2d::new(2, 3, 3, &mut rng).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        let g = Tensor::random_normal(&mut rng, y.shape(), 0.0, 1.0).unwrap();
        conv.backward(&g).unwrap();
        let hw = 20;
        for o in 0..3 {
            let mut expect = 0.0;
            for n in 0..3 {
                expect += g.data()[(n * 3 + o) * hw..(n * 3 + o + 1) * hw].iter().sum::<f64>();
            }
            assert!((conv.bias.grad.data()[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_and_state_errors() {
        let mut rng = Rng::new(6);
        let mut conv = Conv2d::new(2, 3, 3, &mut rng).unwrap();
        assert!(matches!(conv.backward(&Tensor::zeros(&[1, 3, 2, 2]).unwrap()), Err(Error::State(_))));
        let x = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        assert!(matches!(conv.forward(&x, Mode::Training), Err(Error::Shape(_))));
    }

    #[test]
    fn inference_forward_leaves_nothing_to_backpropagate() {
        let mut rng = Rng::new(4);
        let mut conv = Conv2d::new(2, 3, 3, &mut rng).unwrap();
        let x = Tensor::random_normal(&mut rng, &[1, 2, 5, 5], 0.0, 1.0).unwrap();
        let y = conv.forward(&x, Mode::Training).unwrap();
        conv.forward(&x, Mode::Inference).unwrap();
        assert!(matches!(conv.backward(&y), Err(Error::State(_))));
    }
}
