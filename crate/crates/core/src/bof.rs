//! Bag-of-Features pooling.
//!
//! Each spatial feature vector `x_n` (the `D` channels at position `n` of the
//! last conv map) is soft-assigned to the `K` codebook items:
//!
//! ```text
//! psi[n, i] = exp(-dist(x_n, c_i) / m_i) / sum_j exp(-dist(x_n, c_j) / m_j)
//! hist[i]   = (1 / P) * sum_n psi[n, i]
//! ```
//!
//! `dist` is the Euclidean norm by default. The softmax is evaluated with the
//! maximum score subtracted first, so small widths `m_i` do not overflow.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{expect_rank, expect_same_shape, Layer, Mode, Param, ParamKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Lower bound for every RBF width, enforced after each optimizer step.
pub const SCALE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CodebookInit {
    Gaussian,
    /// Copy `K` distinct feature vectors from one forward pass of the
    /// untrained conv stack.
    #[default]
    Sample,
}

/// `K` centers in `R^D` plus one positive width per center.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub centers: Param,
    pub scales: Param,
}

/// Plain-data copy of a codebook, used in run records and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookSnapshot {
    pub k: usize,
    pub d: usize,
    pub centers: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Codebook {
    pub fn new(centers: Tensor, scales: Tensor) -> Result<Codebook> {
        expect_rank(&centers, 2, "codebook centers")?;
        let (k, _d) = (centers.shape()[0], centers.shape()[1]);
        if k < 2 {
            return Err(Error::config(format!("codebook needs K >= 2, got {k}")));
        }
        if scales.shape() != [k] {
            return Err(Error::shape(format!("{k} centers but scales {:?}", scales.shape())));
        }
        if let Some(m) = scales.data().iter().find(|&&m| !(m >= SCALE_FLOOR)) {
            return Err(Error::state(format!("scale {m} below floor {SCALE_FLOOR}")));
        }
        Ok(Codebook {
            centers: Param::new("bof.centers", ParamKind::CodebookCenters, centers),
            scales: Param::new("bof.scales", ParamKind::CodebookScales, scales),
        })
    }

    /// Centers drawn from `N(0, 1/sqrt(D))`, unit widths.
    pub fn gaussian(rng: &mut Rng, k: usize, d: usize) -> Result<Codebook> {
        if d == 0 {
            return Err(Error::config("codebook needs D >= 1"));
        }
        let centers = Tensor::random_normal(rng, &[k.max(1), d], 0.0, 1.0 / (d as f64).sqrt())?;
        Codebook::new(centers, Tensor::full(&[k.max(1)], 1.0)?)
    }

    /// Centers copied from `K` distinct positions of `features: [B, D, P]`,
    /// chosen in a seeded random order. Falls back to [`Codebook::gaussian`]
    /// (with a warning) when fewer than `K` distinct vectors exist.
    pub fn sample(rng: &mut Rng, k: usize, features: &Tensor) -> Result<Codebook> {
        expect_rank(features, 3, "codebook sampling")?;
        let (b, d, p) = (features.shape()[0], features.shape()[1], features.shape()[2]);
        if k < 2 {
            return Err(Error::config(format!("codebook needs K >= 2, got {k}")));
        }
        let vector = |pos: usize| -> Vec<f64> {
            let (n, q) = (pos / p, pos % p);
            (0..d).map(|c| features.data()[(n * d + c) * p + q]).collect()
        };
        let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(k);
        for pos in rng.permutation(b * p) {
            let v = vector(pos);
            if !chosen.contains(&v) {
                chosen.push(v);
                if chosen.len() == k {
                    break;
                }
            }
        }
        if chosen.len() < k {
            log::warn!(
                "only {} distinct feature vectors for a {k}-item codebook; using gaussian init",
                chosen.len()
            );
            return Codebook::gaussian(rng, k, d);
        }
        let centers = Tensor::from_vec(&[k, d], chosen.concat())?;
        Codebook::new(centers, Tensor::full(&[k], 1.0)?)
    }

    pub fn k(&self) -> usize {
        self.centers.value.shape()[0]
    }

    pub fn d(&self) -> usize {
        self.centers.value.shape()[1]
    }

    pub fn clamp_scales(&mut self) {
        for m in self.scales.value.data_mut() {
            if *m < SCALE_FLOOR {
                *m = SCALE_FLOOR;
            }
        }
    }

    fn check_scales(&self) -> Result<()> {
        match self.scales.value.data().iter().position(|&m| !(m >= SCALE_FLOOR)) {
            None => Ok(()),
            Some(i) => Err(Error::state(format!(
                "scale m_{i} = {} is below the floor {SCALE_FLOOR}",
                self.scales.value.data()[i]
            ))),
        }
    }

    pub fn snapshot(&self) -> CodebookSnapshot {
        CodebookSnapshot {
            k: self.k(),
            d: self.d(),
            centers: self.centers.value.data().to_vec(),
            scales: self.scales.value.data().to_vec(),
        }
    }

    pub fn from_snapshot(s: &CodebookSnapshot) -> Result<Codebook> {
        Codebook::new(
            Tensor::from_vec(&[s.k, s.d], s.centers.clone())?,
            Tensor::from_vec(&[s.k], s.scales.clone())?,
        )
    }
}

impl CodebookSnapshot {
    /// Line-oriented text form: a `k`/`d` header, then `K` rows of centers
    /// and one row of scales. Floats use shortest round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# bofnet codebook v1\n");
        let _ = writeln!(out, "k {}", self.k);
        let _ = writeln!(out, "d {}", self.d);
        out.push_str("centers\n");
        for row in self.centers.chunks(self.d) {
            out.push_str(&join(row));
            out.push('\n');
        }
        out.push_str("scales\n");
        out.push_str(&join(&self.scales));
        out.push('\n');
        out
    }

    pub fn from_text(text: &str) -> Result<CodebookSnapshot> {
        let bad = |msg: &str| Error::Data(format!("codebook text: {msg}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut header = |key: &str| -> Result<usize> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let value = line
                .strip_prefix(key)
                .ok_or_else(|| bad(&format!("expected `{key}`, got `{line}`")))?;
            value.trim().parse().map_err(|_| bad(&format!("bad {key} value `{value}`")))
        };
        let k = header("k ")?;
        let d = header("d ")?;
        if lines.next() != Some("centers") {
            return Err(bad("missing `centers` section"));
        }
        let mut centers = Vec::with_capacity(k * d);
        for _ in 0..k {
            let row = parse_row(lines.next().ok_or_else(|| bad("missing center row"))?)?;
            if row.len() != d {
                return Err(bad(&format!("center row has {} values, expected {d}", row.len())));
            }
            centers.extend(row);
        }
        if lines.next() != Some("scales") {
            return Err(bad("missing `scales` section"));
        }
        let scales = parse_row(lines.next().ok_or_else(|| bad("missing scales row"))?)?;
        if scales.len() != k {
            return Err(bad(&format!("{} scales for {k} centers", scales.len())));
        }
        Ok(CodebookSnapshot { k, d, centers, scales })
    }
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_row(line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::Data(format!("codebook text: bad float `{t}`"))))
        .collect()
}

/// Soft memberships and per-sample histograms for one batch.
#[derive(Debug, Clone)]
pub struct QuantizedBatch {
    /// `[B, K, P]`; every `psi[b, :, n]` sums to one.
    pub psi: Tensor,
    /// `[B, K]`; every row sums to one.
    pub histogram: Tensor,
    /// `[B, K, P]` distances `dist(x_n, c_i)` (squared when so configured).
    pub distances: Tensor,
}

/// Views `[B, C, H, W]` as `[B, C, H*W]`; rank-3 input passes through.
fn as_features(input: &Tensor) -> Result<Tensor> {
    match input.rank() {
        3 => Ok(input.clone()),
        4 => {
            let s = input.shape();
            input.clone().reshape(&[s[0], s[1], s[2] * s[3]])
        }
        _ => Err(Error::shape(format!(
            "bof expects [B, D, P] or [B, C, H, W], got {:?}",
            input.shape()
        ))),
    }
}

/// Forward pass on `features: [B, D, P]`.
pub fn bof_forward(features: &Tensor, codebook: &Codebook, distance: Distance) -> Result<QuantizedBatch> {
    expect_rank(features, 3, "bof")?;
    let (b, d, p) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let k = codebook.k();
    if d != codebook.d() {
        return Err(Error::shape(format!(
            "features have D = {d} but codebook centers have D = {}",
            codebook.d()
        )));
    }
    codebook.check_scales()?;
    let centers = codebook.centers.value.data();
    let scales = codebook.scales.value.data();
    let x = features.data();

    let mut psi = Tensor::zeros(&[b, k, p])?;
    let mut dist = Tensor::zeros(&[b, k, p])?;
    let mut hist = Tensor::zeros(&[b, k])?;
    let mut feat = vec![0.0; d];
    let mut scores = vec![0.0; k];
    for n in 0..b {
        for q in 0..p {
            for (c, f) in feat.iter_mut().enumerate() {
                *f = x[(n * d + c) * p + q];
            }
            for i in 0..k {
                let center = &centers[i * d..(i + 1) * d];
                let sq: f64 = feat.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                let di = match distance {
                    Distance::Euclidean => sq.sqrt(),
                    Distance::SquaredEuclidean => sq,
                };
                dist.data_mut()[(n * k + i) * p + q] = di;
                scores[i] = -di / scales[i];
            }
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - top).exp();
                total += *s;
            }
            for (i, s) in scores.iter().enumerate() {
                let v = s / total;
                psi.data_mut()[(n * k + i) * p + q] = v;
                hist.data_mut()[n * k + i] += v;
            }
        }
    }
    for h in hist.data_mut() {
        *h /= p as f64;
    }
    hist.ensure_finite("bof histogram")?;
    Ok(QuantizedBatch {
        psi,
        histogram: hist,
        distances: dist,
    })
}

/// Gradients of a histogram-space loss for one batch.
#[derive(Debug, Clone)]
pub struct BofGradients {
    pub features: Tensor,
    pub centers: Tensor,
    pub scales: Tensor,
}

/// Backward pass through [`bof_forward`] for the upstream gradient
/// `grad_histogram: [B, K]`.
pub fn bof_backward(
    features: &Tensor,
    codebook: &Codebook,
    distance: Distance,
    forward: &QuantizedBatch,
    grad_histogram: &Tensor,
) -> Result<BofGradients> {
    let (b, d, p) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let k = codebook.k();
    expect_same_shape(grad_histogram, &[b, k], "bof")?;
    let centers = codebook.centers.value.data();
    let scales = codebook.scales.value.data();
    let x = features.data();
    let psi = forward.psi.data();
    let dist = forward.distances.data();

    let mut gx = Tensor::zeros(&[b, d, p])?;
    let mut gc = Tensor::zeros(&[k, d])?;
    let mut gm = Tensor::zeros(&[k])?;
    let mut feat = vec![0.0; d];
    let mut gfeat = vec![0.0; d];
    for n in 0..b {
        // d hist_i / d psi[i, q] = 1 / P for every position q
        let gpsi: Vec<f64> = grad_histogram.data()[n * k..(n + 1) * k]
            .iter()
            .map(|g| g / p as f64)
            .collect();
        for q in 0..p {
            let at = |i: usize| (n * k + i) * p + q;
            let dot: f64 = (0..k).map(|i| psi[at(i)] * gpsi[i]).sum();
            for (c, f) in feat.iter_mut().enumerate() {
                *f = x[(n * d + c) * p + q];
            }
            gfeat.fill(0.0);
            for i in 0..k {
                let gs = psi[at(i)] * (gpsi[i] - dot);
                if gs == 0.0 {
                    continue;
                }
                let (m, di) = (scales[i], dist[at(i)]);
                // score = -dist / m
                gm.data_mut()[i] += gs * di / (m * m);
                let gd = -gs / m;
                let coef = match distance {
                    // subgradient 0 at x == c
                    Distance::Euclidean if di > 0.0 => gd / di,
                    Distance::Euclidean => 0.0,
                    Distance::SquaredEuclidean => 2.0 * gd,
                };
                if coef == 0.0 {
                    continue;
                }
                let center = &centers[i * d..(i + 1) * d];
                let gci = &mut gc.data_mut()[i * d..(i + 1) * d];
                for c in 0..d {
                    let t = coef * (feat[c] - center[c]);
                    gfeat[c] += t;
                    gci[c] -= t;
                }
            }
            for (c, g) in gfeat.iter().enumerate() {
                gx.data_mut()[(n * d + c) * p + q] = *g;
            }
        }
    }
    Ok(BofGradients {
        features: gx,
        centers: gc,
        scales: gm,
    })
}

/// BoF pooling as a network layer: `[B, C, H, W] -> [B, K]`.
pub struct BofPool {
    codebook: Codebook,
    distance: Distance,
    cache: Option<(Vec<usize>, Tensor, QuantizedBatch)>,
}

impl BofPool {
    pub fn new(codebook: Codebook, distance: Distance) -> BofPool {
        BofPool {
            codebook,
            distance,
            cache: None,
        }
    }

    pub fn distance(&self) -> Distance {
        self.distance
    }

    /// Memberships from the last forward pass.
    pub fn last_quantization(&self) -> Option<&QuantizedBatch> {
        self.cache.as_ref().map(|(_, _, q)| q)
    }
}

impl Layer for BofPool {
    fn name(&self) -> String {
        format!("bof{}", self.codebook.k())
    }

    fn forward(&mut self, input: &Tensor, _mode: Mode) -> Result<Tensor> {
        let features = as_features(input)?;
        let q = bof_forward(&features, &self.codebook, self.distance)?;
        let out = q.histogram.clone();
        self.cache = Some((input.shape().to_vec(), features, q));
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (shape, features, q) = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("bof: backward called before forward"))?;
        let g = bof_backward(features, &self.codebook, self.distance, q, grad_out)?;
        self.codebook.centers.grad.add_assign(&g.centers)?;
        self.codebook.scales.grad.add_assign(&g.scales)?;
        g.features.reshape(shape)
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.codebook.centers, &self.codebook.scales]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.codebook.centers, &mut self.codebook.scales]
    }

    fn codebook(&self) -> Option<&Codebook> {
        Some(&self.codebook)
    }

    fn codebook_mut(&mut self) -> Option<&mut Codebook> {
        Some(&mut self.codebook)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn book(centers: Vec<f64>, k: usize, d: usize, scales: Vec<f64>) -> Codebook {
        Codebook::new(
            Tensor::from_vec(&[k, d], centers).unwrap(),
            Tensor::from_vec(&[k], scales).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn two_center_example() {
        let cb = book(vec![0.0, 1.0], 2, 1, vec![1.0, 1.0]);
        let x = Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap();
        let q = bof_forward(&x, &cb, Distance::Euclidean).unwrap();
        // independent scalar evaluation
        let (a, b) = (1.0f64, (-1.0f64).exp());
        let expect = [a / (a + b), b / (a + b)];
        assert!((q.psi.data()[0] - expect[0]).abs() < 1e-15);
        assert!((q.psi.data()[1] - expect[1]).abs() < 1e-15);
        assert!((expect[0] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn equidistant_feature_is_uniform() {
        // four centers at unit distance from the origin
        let cb = book(vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0], 4, 2, vec![0.5; 4]);
        let x = Tensor::from_vec(&[1, 2, 1], vec![0.0, 0.0]).unwrap();
        let q = bof_forward(&x, &cb, Distance::Euclidean).unwrap();
        assert!(q.psi.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn repeated_feature_histogram_equals_single_psi() {
        let mut rng = Rng::new(1);
        let cb = Codebook::gaussian(&mut rng, 5, 3).unwrap();
        let v = [0.3, -1.2, 0.8];
        let single = Tensor::from_vec(&[1, 3, 1], v.to_vec()).unwrap();
        let q1 = bof_forward(&single, &cb, Distance::Euclidean).unwrap();
        let p = 7;
        let mut data = Vec::new();
        for c in v {
            data.extend(std::iter::repeat_n(c, p));
        }
        let many = Tensor::from_vec(&[1, 3, p], data).unwrap();
        let q = bof_forward(&many, &cb, Distance::Euclidean).unwrap();
        for (a, b) in q.histogram.data().iter().zip(q1.psi.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut rng = Rng::new(2);
        let cb = Codebook::gaussian(&mut rng, 3, 4).unwrap();
        let x = Tensor::zeros(&[1, 5, 2]).unwrap();
        assert!(matches!(bof_forward(&x, &cb, Distance::Euclidean), Err(Error::Shape(_))));
        assert!(matches!(Codebook::gaussian(&mut rng, 1, 4), Err(Error::Config(_))));
        let mut cb = Codebook::gaussian(&mut rng, 3, 4).unwrap();
        cb.scales.value.data_mut()[1] = 1e-4;
        let x = Tensor::zeros(&[1, 4, 2]).unwrap();
        assert!(matches!(bof_forward(&x, &cb, Distance::Euclidean), Err(Error::State(_))));
        cb.clamp_scales();
        assert_eq!(cb.scales.value.data()[1], SCALE_FLOOR);
        assert!(bof_forward(&x, &cb, Distance::Euclidean).is_ok());
    }

    #[test]
    fn backward_before_forward() {
        let cb = Codebook::gaussian(&mut Rng::new(0), 3, 2).unwrap();
        let mut layer = BofPool::new(cb, Distance::Euclidean);
        assert!(matches!(layer.backward(&Tensor::zeros(&[1, 3]).unwrap()), Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = Rng::new(3);
        let cb = Codebook::gaussian(&mut rng, 4, 3).unwrap();
        let mut layer = BofPool::new(cb, Distance::Euclidean);
        let x = Tensor::random_normal(&mut rng, &[2, 3, 2, 2], 0.0, 1.0).unwrap();
        layer.forward(&x, Mode::Training).unwrap();
        let g = layer.backward(&Tensor::zeros(&[2, 4]).unwrap()).unwrap();
        assert_eq!(g.shape(), x.shape());
        assert!(g.data().iter().all(|&v| v == 0.0));
        assert!(layer.params().iter().all(|p| p.grad.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn large_widths_flatten_memberships() {
        let mut rng = Rng::new(4);
        let mut cb = Codebook::gaussian(&mut rng, 6, 4).unwrap();
        cb.scales.value.fill(1e6);
        let x = Tensor::random_normal(&mut rng, &[2, 4, 9], 0.0, 1.0).unwrap();
        let q = bof_forward(&x, &cb, Distance::Euclidean).unwrap();
        let dev = q.psi.data().iter().map(|v| (v - 1.0 / 6.0).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-4, "max deviation {dev}");
    }

    #[test]
    fn gaussian_init_contract() {
        let d = 25;
        let cb = Codebook::gaussian(&mut Rng::new(5), 400, d).unwrap();
        assert!(cb.scales.value.data().iter().all(|&m| m == 1.0));
        let target = 1.0 / (d as f64).sqrt();
        // 400 draws per coordinate; 10^4 draws overall
        for c in 0..d {
            let col: Vec<f64> = (0..400).map(|i| cb.centers.value.data()[i * d + c]).collect();
            let mean = col.iter().sum::<f64>() / 400.0;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 399.0).sqrt();
            assert!((sd - target).abs() < 0.1 * target, "coordinate {c}: stddev {sd} vs {target}");
        }
        let again = Codebook::gaussian(&mut Rng::new(5), 400, d).unwrap();
        assert_eq!(again.centers.value, cb.centers.value);
    }

    #[test]
    fn sample_init_copies_distinct_features() {
        let mut rng = Rng::new(6);
        let f = Tensor::random_normal(&mut rng, &[2, 3, 10], 0.0, 1.0).unwrap();
        let cb = Codebook::sample(&mut Rng::new(7), 5, &f).unwrap();
        assert!(cb.scales.value.data().iter().all(|&m| m == 1.0));
        for i in 0..5 {
            let row = &cb.centers.value.data()[i * 3..(i + 1) * 3];
            let found = (0..2).any(|n| (0..10).any(|q| (0..3).all(|c| f.data()[(n * 3 + c) * 10 + q] == row[c])));
            assert!(found);
        }
        let again = Codebook::sample(&mut Rng::new(7), 5, &f).unwrap();
        assert_eq!(again.centers.value, cb.centers.value);
    }

    #[test]
    fn sample_init_falls_back_on_degenerate_features() {
        let f = Tensor::zeros(&[2, 3, 10]).unwrap();
        let cb = Codebook::sample(&mut Rng::new(8), 4, &f).unwrap();
        assert_eq!(cb.k(), 4);
        assert!(cb.centers.value.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn text_round_trip() {
        let cb = Codebook::gaussian(&mut Rng::new(9), 3, 4).unwrap();
        let snap = cb.snapshot();
        let parsed = CodebookSnapshot::from_text(&snap.to_text()).unwrap();
        assert_eq!(parsed, snap);
        assert!(CodebookSnapshot::from_text("k 2\nd 1\ncenters\n1\n").is_err());
    }

    proptest! {
        #[test]
        fn memberships_are_normalized(seed in any::<u64>(), k in 2usize..8, d in 1usize..6, p in 1usize..12) {
            let mut rng = Rng::new(seed);
            let mut cb = Codebook::gaussian(&mut rng, k, d).unwrap();
            for m in cb.scales.value.data_mut() {
                *m = 0.01 + rng.uniform() * 3.0;
            }
            let x = Tensor::random_normal(&mut rng, &[2, d, p], 0.0, 2.0).unwrap();
            let q = bof_forward(&x, &cb, Distance::Euclidean).unwrap();
            for n in 0..2 {
                for pos in 0..p {
                    let s: f64 = (0..k).map(|i| q.psi.data()[(n * k + i) * p + pos]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
                let h: f64 = q.histogram.data()[n * k..(n + 1) * k].iter().sum();
                prop_assert!((h - 1.0).abs() < 1e-9);
            }
            prop_assert!(q.psi.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn spatial_permutation_leaves_histogram(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let cb = Codebook::gaussian(&mut rng, 5, 3).unwrap();
            let x = Tensor::random_normal(&mut rng, &[1, 3, 9], 0.0, 1.0).unwrap();
            let perm = rng.permutation(9);
            let mut y = x.clone();
            for c in 0..3 {
                for (q, &src) in perm.iter().enumerate() {
                    y.data_mut()[c * 9 + q] = x.data()[c * 9 + src];
                }
            }
            let a = bof_forward(&x, &cb, Distance::Euclidean).unwrap();
            let b = bof_forward(&y, &cb, Distance::Euclidean).unwrap();
            for (u, v) in a.histogram.data().iter().zip(b.histogram.data()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn codebook_permutation_permutes_histogram(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let (k, d) = (5, 3);
            let cb = Codebook::gaussian(&mut rng, k, d).unwrap();
            let mut scales = cb.scales.value.clone();
            for m in scales.data_mut() {
                *m = 0.1 + rng.uniform();
            }
            let cb = Codebook::new(cb.centers.value.clone(), scales).unwrap();
            let perm = rng.permutation(k);
            let mut centers = Vec::new();
            let mut sc = Vec::new();
            for &i in &perm {
                centers.extend_from_slice(&cb.centers.value.data()[i * d..(i + 1) * d]);
                sc.push(cb.scales.value.data()[i]);
            }
            let permuted = book(centers, k, d, sc);
            let x = Tensor::random_normal(&mut rng, &[2, d, 4], 0.0, 1.0).unwrap();
            let a = bof_forward(&x, &cb, Distance::Euclidean).unwrap();
            let b = bof_forward(&x, &permuted, Distance::Euclidean).unwrap();
            for n in 0..2 {
                for (j, &i) in perm.iter().enumerate() {
                    let (u, v) = (a.histogram.data()[n * k + i], b.histogram.data()[n * k + j]);
                    // the softmax denominator sums in a different order, so allow rounding
                    prop_assert!((u - v).abs() <= 4.0 * f64::EPSILON);
                }
            }
        }
    }
}
