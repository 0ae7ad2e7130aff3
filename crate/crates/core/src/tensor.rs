//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Exp,
    Scale(f64),
    MaxScalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
    /// Index of the maximum, stored as `f64`. Ties resolve to the lowest index.
    ArgMax,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::shape("empty shape"));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("zero extent at axis {pos} in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Tensor> {
        let mut t = Tensor::zeros(shape)?;
        t.data.fill(value);
        Ok(t)
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Result<Tensor> {
        let mut t = Tensor::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// I.i.d. normal samples drawn in row-major order from `rng`.
    pub fn random_normal(rng: &mut Rng, shape: &[usize], mean: f64, stddev: f64) -> Result<Tensor> {
        if !(stddev >= 0.0) || !mean.is_finite() || !stddev.is_finite() {
            return Err(Error::config(format!(
                "random_normal needs finite mean and stddev >= 0, got ({mean}, {stddev})"
            )));
        }
        let mut t = Tensor::zeros(shape)?;
        for v in &mut t.data {
            *v = mean + stddev * rng.normal();
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Tensor> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    /// Copy of rows `start..end` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Tensor> {
        let outer = self.shape[0];
        if start >= end || end > outer {
            return Err(Error::shape(format!(
                "slice {start}..{end} out of range for leading extent {outer}"
            )));
        }
        let inner = self.data.len() / outer;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * inner..end * inner].to_vec(),
        })
    }

    /// Gathers the listed rows of the leading axis.
    pub fn gather_outer(&self, rows: &[usize]) -> Result<Tensor> {
        let outer = self.shape[0];
        let inner = self.data.len() / outer;
        if rows.is_empty() {
            return Err(Error::shape("gather of zero rows"));
        }
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= outer {
                return Err(Error::shape(format!("row {r} out of range for {outer}")));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_outer(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "concat mismatch: {:?} vs {:?}",
                    p.shape, first.shape
                )));
            }
            outer += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Ok(Tensor { shape, data })
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{context}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
        }
    }

    pub fn map(&self, op: UnaryOp) -> Result<Tensor> {
        let data = match op {
            UnaryOp::Exp => self.data.iter().map(|v| v.exp()).collect(),
            UnaryOp::Scale(s) => self.data.iter().map(|v| v * s).collect(),
            UnaryOp::MaxScalar(s) => self.data.iter().map(|&v| if v > s { v } else { s }).collect(),
        };
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("elementwise")?;
        Ok(out)
    }

    pub fn zip(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise operands {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let f: fn(f64, f64) -> f64 = match op {
            BinaryOp::Add => |a, b| a + b,
            BinaryOp::Sub => |a, b| a - b,
            BinaryOp::Mul => |a, b| a * b,
        };
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        let out = Tensor {
            shape: self.shape.clone(),
            data,
        };
        out.ensure_finite("elementwise")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(BinaryOp::Mul, other)
    }

    pub fn scale(&self, s: f64) -> Result<Tensor> {
        self.map(UnaryOp::Scale(s))
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.map(UnaryOp::Exp)
    }

    pub fn max_scalar(&self, s: f64) -> Result<Tensor> {
        self.map(UnaryOp::MaxScalar(s))
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Reduces along `axis`, removing it. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn reduce(&self, axis: usize, kind: Reduction) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for rank {}",
                self.rank()
            )));
        }
        let extent = self.shape[axis];
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| self.data[(o * extent + k) * inner + i];
                out[o * inner + i] = match kind {
                    Reduction::Sum => (0..extent).map(at).sum(),
                    Reduction::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    Reduction::Max => (0..extent).map(at).fold(f64::NEG_INFINITY, f64::max),
                    Reduction::ArgMax => {
                        let mut best = 0;
                        for k in 1..extent {
                            if at(k) > at(best) {
                                best = k;
                            }
                        }
                        best as f64
                    }
                };
            }
        }
        let mut shape: Vec<usize> = self.shape.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor { shape, data: out })
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (rhs.shape[0], rhs.shape[1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner mismatch: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            Mat::row_major(&self.data, k),
            Mat::row_major(&rhs.data, n),
            0.0,
            &mut out,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

/// A strided read-only matrix view for [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat {
            data,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `out = alpha * a * b + beta * out`, with `a: m x k`, `b: k x n` and `out`
/// a row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: Mat, b: Mat, beta: f64, out: &mut [f64]) {
    gemm_strided(m, k, n, alpha, a, b, beta, out, n as isize, 1);
}

/// [`gemm`] writing through an arbitrary strided `m x n` view of `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat,
    b: Mat,
    beta: f64,
    out: &mut [f64],
    out_row_stride: isize,
    out_col_stride: isize,
) {
    let reach = |rs: isize, cs: isize, rows: usize, cols: usize| {
        (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
    };
    assert!(m > 0 && k > 0 && n > 0);
    assert!(reach(a.row_stride, a.col_stride, m, k) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(reach(b.row_stride, b.col_stride, k, n) < b.data.len(), "gemm: rhs view out of bounds");
    assert!(reach(out_row_stride, out_col_stride, m, n) < out.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above bound every strided access within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            out.as_mut_ptr(),
            out_row_stride,
            out_col_stride,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    #[test]
    fn zeros_shapes() {
        let t = Tensor::zeros(&[2, 3]).unwrap();
        assert_eq!(t.len(), 6);
        assert!(t.data().iter().all(|&v| v == 0.0));
        assert_eq!(Tensor::zeros(&[1]).unwrap().data(), &[0.0]);
        assert_eq!(Tensor::zeros(&[2, 2, 2]).unwrap().len(), 8);
    }

    #[test]
    fn zeros_rejects_bad_shapes() {
        assert!(matches!(Tensor::zeros(&[]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::zeros(&[3, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);

        let z = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let c = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(z.matmul(&c).unwrap().data(), &[0.0]);

        let mut rng = Rng::new(3);
        let m = Tensor::random_normal(&mut rng, &[3, 3], 0.0, 1.0).unwrap();
        let i = Tensor::identity(3).unwrap();
        assert_eq!(i.matmul(&m).unwrap(), m);
        assert_eq!(m.matmul(&i).unwrap(), m);
    }

    #[test]
    fn matmul_mismatch() {
        let a = Tensor::zeros(&[2, 3]).unwrap();
        assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor::zeros(&[2]).unwrap();
        assert_eq!(z.exp().unwrap().data(), &[1.0, 1.0]);
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
        let r = Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap();
        assert_eq!(r.max_scalar(0.0).unwrap().data(), &[0.0, 2.0]);
        assert!(matches!(a.add(&Tensor::zeros(&[3]).unwrap()), Err(Error::Shape(_))));
    }

    #[test]
    fn overflow_is_surfaced() {
        let t = Tensor::from_vec(&[1], vec![1000.0]).unwrap();
        assert!(matches!(t.exp(), Err(Error::Numeric(_))));
    }

    #[test]
    fn reduce_examples() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(t.reduce(1, Reduction::Mean).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(Tensor::zeros(&[4]).unwrap().reduce(0, Reduction::Sum).unwrap().data(), &[0.0]);
        let v = Tensor::from_vec(&[3], vec![0.2, 0.9, 0.9]).unwrap();
        assert_eq!(v.reduce(0, Reduction::ArgMax).unwrap().data(), &[1.0]);
        assert!(matches!(t.reduce(2, Reduction::Sum), Err(Error::Shape(_))));
    }

    #[test]
    fn random_normal_contract() {
        let mut rng = Rng::new(0);
        let t = Tensor::random_normal(&mut rng, &[4, 4], 2.5, 0.0).unwrap();
        assert!(t.data().iter().all(|&v| v == 2.5));

        let a = Tensor::random_normal(&mut Rng::new(9), &[5, 5], 0.0, 1.0).unwrap();
        let b = Tensor::random_normal(&mut Rng::new(9), &[5, 5], 0.0, 1.0).unwrap();
        assert_eq!(a, b);

        let n = 100_000;
        let s = Tensor::random_normal(&mut Rng::new(11), &[n], 0.0, 1.0).unwrap();
        let mean = s.sum() / n as f64;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "stddev {}", var.sqrt());
    }

    proptest! {
        #[test]
        fn mean_times_extent_is_sum(
            rows in 1usize..6, cols in 1usize..6, seed in any::<u64>(), axis in 0usize..2
        ) {
            let t = Tensor::random_normal(&mut Rng::new(seed), &[rows, cols], 0.0, 3.0).unwrap();
            let mean = t.reduce(axis, Reduction::Mean).unwrap();
            let sum = t.reduce(axis, Reduction::Sum).unwrap();
            let extent = t.shape()[axis] as f64;
            for (m, s) in mean.data().iter().zip(sum.data()) {
                prop_assert!((m * extent - s).abs() <= 1e-12 * (1.0 + s.abs()));
            }
        }

        #[test]
        fn gemm_views_match_naive(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Tensor::random_normal(&mut rng, &[k, m], 0.0, 1.0).unwrap();
            let b = Tensor::random_normal(&mut rng, &[k, n], 0.0, 1.0).unwrap();
            // a^T b through a transposed view
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, Mat::transposed(a.data(), m), Mat::row_major(b.data(), n), 0.0, &mut out);
            for i in 0..m {
                for j in 0..n {
                    let naive: f64 = (0..k).map(|p| a.data()[p * m + i] * b.data()[p * n + j]).sum();
                    prop_assert!((out[i * n + j] - naive).abs() < 1e-12);
                }
            }
        }
    }
}
