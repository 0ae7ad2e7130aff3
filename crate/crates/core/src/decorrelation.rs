//! Pairwise-correlation penalty on codebook centers.
//!
//! For centers `c_1..c_K` the penalty is the sum over all ordered pairs
//! `i != j` of the squared Pearson correlation between `c_i` and `c_j`,
//! taken across the `D` coordinates. It is added to the task loss with
//! weight `beta`; only the centers receive its gradient.
//!
//! A small `epsilon` sits inside each variance term so constant centers
//! give a correlation near zero instead of `NaN`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// The beta values searched on the validation split.
pub const BETA_GRID: [f64; 4] = [0.1, 0.01, 0.001, 0.0001];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Squared Pearson correlation (centered).
    #[default]
    Pearson,
    /// Squared cosine similarity (uncentered).
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub beta: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub similarity: Similarity,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl RegularizerConfig {
    pub fn new(beta: f64) -> Result<Self> {
        let cfg = RegularizerConfig {
            beta,
            epsilon: DEFAULT_EPSILON,
            similarity: Similarity::Pearson,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::config(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::config(format!(
            "correlation needs vectors of length >= 2, got {d}"
        )));
    }
    Ok(())
}

fn centered(v: &[f64], similarity: Similarity) -> Vec<f64> {
    match similarity {
        Similarity::Pearson => {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| x - mean).collect()
        }
        Similarity::Cosine => v.to_vec(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn pearson_corr(a: &[f64], b: &[f64], epsilon: f64) -> Result<f64> {
    correlation(a, b, epsilon, Similarity::Pearson)
}

pub fn correlation(a: &[f64], b: &[f64], epsilon: f64, similarity: Similarity) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("correlation of lengths {} and {}", a.len(), b.len())));
    }
    check_dim(a.len())?;
    let (a, b) = (centered(a, similarity), centered(b, similarity));
    Ok(dot(&a, &b) / ((dot(&a, &a) + epsilon) * (dot(&b, &b) + epsilon)).sqrt())
}

/// Squared Pearson correlation.
pub fn sim(a: &[f64], b: &[f64], epsilon: f64) -> Result<f64> {
    Ok(pearson_corr(a, b, epsilon)?.powi(2))
}

type Rows = Vec<Vec<f64>>;

/// Centered rows scaled by `1 / sqrt(|a|^2 + eps)`, plus those norms squared.
fn normalized_rows(centers: &Tensor, epsilon: f64, similarity: Similarity) -> Result<(Rows, Rows, Vec<f64>)> {
    if centers.rank() != 2 {
        return Err(Error::shape(format!("centers must be [K, D], got {:?}", centers.shape())));
    }
    let (k, d) = (centers.shape()[0], centers.shape()[1]);
    if k < 2 {
        return Err(Error::config(format!("penalty needs K >= 2, got {k}")));
    }
    check_dim(d)?;
    let mut units = Vec::with_capacity(k);
    let mut devs = Vec::with_capacity(k);
    let mut norms = Vec::with_capacity(k);
    for row in centers.data().chunks(d) {
        let a = centered(row, similarity);
        let s = dot(&a, &a) + epsilon;
        units.push(a.iter().map(|v| v / s.sqrt()).collect());
        devs.push(a);
        norms.push(s);
    }
    Ok((units, devs, norms))
}

/// `K x K` correlation matrix of the centers.
pub fn correlation_matrix(centers: &Tensor, epsilon: f64, similarity: Similarity) -> Result<Tensor> {
    let (units, _, _) = normalized_rows(centers, epsilon, similarity)?;
    let k = units.len();
    let mut r = Tensor::zeros(&[k, k])?;
    for i in 0..k {
        for j in i..k {
            let v = dot(&units[i], &units[j]);
            r.data_mut()[i * k + j] = v;
            r.data_mut()[j * k + i] = v;
        }
    }
    Ok(r)
}

pub fn dictionary_penalty(centers: &Tensor, epsilon: f64) -> Result<f64> {
    penalty_with(centers, epsilon, Similarity::Pearson)
}

/// Sum of squared correlations over ordered pairs `i != j`.
pub fn penalty_with(centers: &Tensor, epsilon: f64, similarity: Similarity) -> Result<f64> {
    let (units, _, _) = normalized_rows(centers, epsilon, similarity)?;
    let k = units.len();
    let mut total = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            total += dot(&units[i], &units[j]).powi(2);
        }
    }
    Ok(2.0 * total)
}

/// Mean squared correlation over off-diagonal pairs, in `[0, 1]`.
pub fn mean_offdiag_sq_corr(centers: &Tensor, epsilon: f64, similarity: Similarity) -> Result<f64> {
    let k = centers.shape()[0] as f64;
    Ok(penalty_with(centers, epsilon, similarity)? / (k * (k - 1.0)))
}

pub fn penalty_backward(centers: &Tensor, epsilon: f64) -> Result<Tensor> {
    penalty_backward_with(centers, epsilon, Similarity::Pearson)
}

/// Exact gradient of [`penalty_with`] w.r.t. every center.
///
/// With `a_i` the centered center, `S_i = |a_i|^2 + eps` and
/// `r_ij = a_i . a_j / sqrt(S_i S_j)`:
///
/// ```text
/// dP/da_i = 4 * sum_{j != i} r_ij * (a_j / sqrt(S_i S_j) - r_ij * a_i / S_i)
/// ```
///
/// and centering maps it back through `g_c = g_a - mean(g_a)`.
pub fn penalty_backward_with(centers: &Tensor, epsilon: f64, similarity: Similarity) -> Result<Tensor> {
    let (units, devs, norms) = normalized_rows(centers, epsilon, similarity)?;
    let (k, d) = (centers.shape()[0], centers.shape()[1]);
    let mut grad = Tensor::zeros(&[k, d])?;
    for i in 0..k {
        let g = &mut grad.data_mut()[i * d..(i + 1) * d];
        let si = norms[i].sqrt();
        for j in 0..k {
            if j == i {
                continue;
            }
            let r = dot(&units[i], &units[j]);
            for c in 0..d {
                g[c] += 4.0 * r * (units[j][c] / si - r * devs[i][c] / norms[i]);
            }
        }
        if similarity == Similarity::Pearson {
            let mean = g.iter().sum::<f64>() / d as f64;
            for v in g.iter_mut() {
                *v -= mean;
            }
        }
    }
    Ok(grad)
}

/// `task_loss + beta * penalty`.
pub fn augmented_loss(task_loss: f64, centers: &Tensor, config: &RegularizerConfig) -> Result<f64> {
    if !task_loss.is_finite() {
        return Err(Error::Numeric(format!("task loss is {task_loss}")));
    }
    config.validate()?;
    let penalty = penalty_with(centers, config.epsilon, config.similarity)?;
    if !penalty.is_finite() {
        return Err(Error::Numeric(format!("penalty is {penalty}")));
    }
    Ok(task_loss + config.beta * penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    const EPS: f64 = DEFAULT_EPSILON;

    #[test]
    fn corr_examples() {
        let a = [1.0, 0.0, -1.0];
        assert!((pearson_corr(&a, &a, EPS).unwrap() - 1.0).abs() < 1e-9);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((pearson_corr(&a, &neg, EPS).unwrap() + 1.0).abs() < 1e-9);
        assert_eq!(pearson_corr(&a, &[0.0, 1.0, 0.0], EPS).unwrap(), 0.0);
        assert!(matches!(pearson_corr(&[1.0], &[2.0], EPS), Err(Error::Config(_))));
    }

    #[test]
    fn sim_examples() {
        let a = [0.3, -1.0, 2.0, 0.5];
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((sim(&a, &neg, EPS).unwrap() - 1.0).abs() < 1e-9);
        let affine: Vec<f64> = a.iter().map(|v| 2.0 * v + 7.0).collect();
        assert!((sim(&a, &affine, EPS).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(sim(&[1.0, 0.0, -1.0], &[0.0, 1.0, 0.0], EPS).unwrap(), 0.0);
    }

    #[test]
    fn constant_center_is_not_penalized() {
        let c = Tensor::from_vec(&[2, 3], vec![4.0, 4.0, 4.0, 1.0, 2.0, 3.0]).unwrap();
        let p = dictionary_penalty(&c, EPS).unwrap();
        assert!(p.is_finite() && p < 1e-9);
        assert!(penalty_backward(&c, EPS).unwrap().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn identical_centers_hit_the_upper_bound() {
        let k = 5;
        let row = [0.5, -1.0, 3.0, 2.0];
        let data: Vec<f64> = (0..k).flat_map(|_| row).collect();
        let c = Tensor::from_vec(&[k, 4], data).unwrap();
        let p = dictionary_penalty(&c, EPS).unwrap();
        assert!((p - (k * (k - 1)) as f64).abs() < 1e-9);
    }

    #[test]
    fn two_dimensional_centers_are_fully_correlated() {
        let c = Tensor::from_vec(&[3, 2], vec![0.3, -1.2, 2.0, 0.7, -0.4, 0.1]).unwrap();
        assert!((dictionary_penalty(&c, DEFAULT_EPSILON).unwrap() - 6.0).abs() < 1e-9);
        let g = penalty_backward(&c, DEFAULT_EPSILON).unwrap();
        assert!(g.data().iter().all(|v| v.abs() < 1e-9), "{:?}", g.data());
    }

    #[test]
    fn orthogonal_pair_is_zero() {
        let c = Tensor::from_vec(&[2, 3], vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(dictionary_penalty(&c, EPS).unwrap(), 0.0);
    }

    #[test]
    fn augmented_loss_examples() {
        let c = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.1]).unwrap();
        let zero = RegularizerConfig::new(0.0).unwrap();
        assert_eq!(augmented_loss(1.5, &c, &zero).unwrap(), 1.5);

        // two identical non-constant centers: penalty is exactly 2 up to eps
        let same = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let cfg = RegularizerConfig::new(0.01).unwrap();
        assert!((augmented_loss(1.5, &same, &cfg).unwrap() - 1.52).abs() < 1e-12);

        for beta in BETA_GRID {
            assert!(RegularizerConfig::new(beta).is_ok());
        }
        assert!(RegularizerConfig::new(-0.1).is_err());
        assert!(RegularizerConfig::new(f64::NAN).is_err());
        assert!(matches!(augmented_loss(f64::INFINITY, &c, &zero), Err(Error::Numeric(_))));
    }

    #[test]
    fn correlation_matrix_is_symmetric_with_unit_diagonal() {
        let c = Tensor::random_normal(&mut Rng::new(1), &[6, 8], 0.0, 1.0).unwrap();
        let r = correlation_matrix(&c, EPS, Similarity::Pearson).unwrap();
        for i in 0..6 {
            assert!((r.data()[i * 6 + i] - 1.0).abs() < 1e-9);
            for j in 0..6 {
                assert_eq!(r.data()[i * 6 + j], r.data()[j * 6 + i]);
            }
        }
    }

    /// Central differences of `penalty_with` on every center coordinate.
    fn fd_grad(c: &Tensor, similarity: Similarity, h: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(c.len());
        for idx in 0..c.len() {
            let mut plus = c.clone();
            plus.data_mut()[idx] += h;
            let mut minus = c.clone();
            minus.data_mut()[idx] -= h;
            let (fp, fm) = (
                penalty_with(&plus, EPS, similarity).unwrap(),
                penalty_with(&minus, EPS, similarity).unwrap(),
            );
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, similarity) in [(1, Similarity::Pearson), (2, Similarity::Pearson), (3, Similarity::Cosine)] {
            let c = Tensor::random_normal(&mut Rng::new(seed), &[6, 8], 0.0, 1.0).unwrap();
            let analytic = penalty_backward_with(&c, EPS, similarity).unwrap();
            let numeric = fd_grad(&c, similarity, 1e-6);
            let e = rel_err(analytic.data(), &numeric);
            assert!(e < 1e-5, "{similarity:?}: relative error {e}");
        }
    }

    #[test]
    fn decorrelated_centers_are_stationary() {
        // rows of a centered Hadamard basis are pairwise uncorrelated
        let h = [
            1.0, 1.0, -1.0, -1.0, //
            1.0, -1.0, 1.0, -1.0, //
            1.0, -1.0, -1.0, 1.0,
        ];
        let c = Tensor::from_vec(&[3, 4], h.to_vec()).unwrap();
        assert!(dictionary_penalty(&c, EPS).unwrap() < 1e-20);
        let g = penalty_backward(&c, EPS).unwrap();
        let numeric = fd_grad(&c, Similarity::Pearson, 1e-6);
        for (a, n) in g.data().iter().zip(&numeric) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn symmetry_and_range(seed in any::<u64>(), k in 2usize..7, d in 2usize..10) {
            let mut rng = Rng::new(seed);
            let c = Tensor::random_normal(&mut rng, &[k, d], 0.0, 1.0).unwrap();
            let p = dictionary_penalty(&c, EPS).unwrap();
            prop_assert!(p >= 0.0 && p <= (k * (k - 1)) as f64 + 1e-9);
            let rows: Vec<&[f64]> = c.data().chunks(d).collect();
            prop_assert_eq!(sim(rows[0], rows[1], EPS).unwrap(), sim(rows[1], rows[0], EPS).unwrap());
        }

        #[test]
        fn affine_invariance(seed in any::<u64>(), s in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0], t in -10.0f64..10.0) {
            let mut rng = Rng::new(seed);
            let a = Tensor::random_normal(&mut rng, &[8], 0.0, 1.0).unwrap();
            let b = Tensor::random_normal(&mut rng, &[8], 0.0, 1.0).unwrap();
            let moved: Vec<f64> = a.data().iter().map(|v| s * v + t).collect();
            let before = sim(a.data(), b.data(), EPS).unwrap();
            let after = sim(&moved, b.data(), EPS).unwrap();
            prop_assert!((before - after).abs() <= 1e-9);
        }

        #[test]
        fn uniform_shift_has_no_gradient(seed in any::<u64>()) {
            let c = Tensor::random_normal(&mut Rng::new(seed), &[5, 7], 0.0, 1.0).unwrap();
            let g = penalty_backward(&c, EPS).unwrap();
            // a constant shift of any single center leaves its correlations unchanged
            for row in g.data().chunks(7) {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-9);
            }
        }
    }
}
