//! Layer stacks and the two reference topologies.
//!
//! MNIST / Fashion-MNIST (`28x28x1`):
//!
//! ```text
//! conv3x3x32-relu, conv3x3x32-relu, maxpool2x2, conv3x3xC-relu,
//! {gmp | gap | bof(K)}, dropout 0.2, dense512-relu, dropout 0.2, dense10
//! ```
//!
//! CIFAR-10 (`32x32x3`) uses `128, 128, pool, 64, 64, pool, C` before the
//! same pooling and head. The softmax lives in the loss.

use serde::{Deserialize, Serialize};

use crate::bof::{BofPool, Codebook, CodebookInit, CodebookSnapshot, Distance};
use crate::error::{Error, Result};
use crate::layers::{
    Conv2d, Dense, Dropout, GlobalAvgPool, GlobalMaxPool, Layer, MaxPool2x2, Mode, Param, Relu,
};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Gmp,
    Gap,
    Bof,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Gmp => "gmp",
            Pooling::Gap => "gap",
            Pooling::Bof => "bof",
        })
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmp" => Ok(Pooling::Gmp),
            "gap" => Ok(Pooling::Gap),
            "bof" => Ok(Pooling::Bof),
            other => Err(Error::config(format!("unknown pooling `{other}` (gmp, gap, bof)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Three conv layers, one max-pool; for 28x28 grayscale input.
    Mnist,
    /// Five conv layers, two max-pools; for 32x32 RGB input.
    Cifar,
}

impl Architecture {
    fn trunk(self, filters: usize) -> Vec<Block> {
        use Block::*;
        match self {
            Architecture::Mnist => vec![Conv(32), Conv(32), Pool, Conv(filters)],
            Architecture::Cifar => vec![Conv(128), Conv(128), Pool, Conv(64), Conv(64), Pool, Conv(filters)],
        }
    }
}

enum Block {
    Conv(usize),
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub in_channels: usize,
    /// Filters in the last conv layer.
    pub filters: usize,
    pub pooling: Pooling,
    pub codebook_size: Option<usize>,
    pub distance: Distance,
    pub codebook_init: CodebookInit,
    pub dropout: f64,
    pub hidden: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(architecture: Architecture, filters: usize, pooling: Pooling, codebook_size: Option<usize>) -> Self {
        ModelSpec {
            architecture,
            in_channels: match architecture {
                Architecture::Mnist => 1,
                Architecture::Cifar => 3,
            },
            filters,
            pooling,
            codebook_size,
            distance: Distance::Euclidean,
            codebook_init: CodebookInit::default(),
            dropout: 0.2,
            hidden: 512,
            classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.filters == 0 {
            return Err(Error::config("the last conv layer needs at least one filter"));
        }
        match (self.pooling, self.codebook_size) {
            (Pooling::Bof, None) => return Err(Error::config("bof pooling needs a codebook size")),
            (Pooling::Bof, Some(k)) if k < 2 => {
                return Err(Error::config(format!("codebook size must be >= 2, got {k}")))
            }
            (Pooling::Gmp | Pooling::Gap, Some(k)) => {
                log::warn!("codebook size {k} ignored for {} pooling", self.pooling)
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of the pooled representation fed to the first dense layer.
    pub fn pooled_width(&self) -> usize {
        match self.pooling {
            Pooling::Bof => self.codebook_size.unwrap_or(0),
            Pooling::Gmp | Pooling::Gap => self.filters,
        }
    }
}

pub struct Model {
    spec: ModelSpec,
    layers: Vec<Box<dyn Layer>>,
    /// Index of the pooling layer in `layers`.
    pooling_at: usize,
}

/// Builds a freshly initialized model. Parameter tensors and dropout masks
/// each draw from their own stream of `seed`.
///
/// With [`CodebookInit::Sample`], `init_batch` (a batch of training images)
/// seeds the codebook from the untrained conv stack's features; without one
/// the codebook stays Gaussian.
pub fn build_model(spec: &ModelSpec, seed: u64, init_batch: Option<&Tensor>) -> Result<Model> {
    spec.validate()?;
    let root = Rng::new(seed);
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    let mut channels = spec.in_channels;
    let mut param_stream = streams::PARAM_BASE;
    let mut next_stream = || {
        param_stream += 1;
        root.fork(param_stream)
    };
    for block in spec.architecture.trunk(spec.filters) {
        match block {
            Block::Conv(out) => {
                layers.push(Box::new(Conv2d::new(channels, out, 3, &mut next_stream())?));
                layers.push(Box::new(Relu::new()));
                channels = out;
            }
            Block::Pool => layers.push(Box::new(MaxPool2x2::new())),
        }
    }
    let pooling_at = layers.len();
    match spec.pooling {
        Pooling::Gmp => layers.push(Box::new(GlobalMaxPool::new())),
        Pooling::Gap => layers.push(Box::new(GlobalAvgPool::new())),
        Pooling::Bof => {
            let k = spec.codebook_size.expect("validated");
            let cb = Codebook::gaussian(&mut root.fork(streams::CODEBOOK), k, channels)?;
            layers.push(Box::new(BofPool::new(cb, spec.distance)));
        }
    }
    layers.push(Box::new(Dropout::new(spec.dropout, root.fork(streams::DROPOUT_BASE))?));
    layers.push(Box::new(Dense::new(spec.pooled_width(), spec.hidden, &mut next_stream())?));
    layers.push(Box::new(Relu::new()));
    layers.push(Box::new(Dropout::new(spec.dropout, root.fork(streams::DROPOUT_BASE + 1))?));
    layers.push(Box::new(Dense::new(spec.hidden, spec.classes, &mut next_stream())?));

    let mut model = Model {
        spec: spec.clone(),
        layers,
        pooling_at,
    };
    if spec.pooling == Pooling::Bof && spec.codebook_init == CodebookInit::Sample {
        if let Some(batch) = init_batch {
            model.seed_codebook(batch, &mut root.fork(streams::CODEBOOK))?;
        }
    }
    Ok(model)
}

/// A named parameter tensor, for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Model {
    pub fn from_layers(spec: ModelSpec, layers: Vec<Box<dyn Layer>>, pooling_at: usize) -> Model {
        Model {
            spec,
            layers,
            pooling_at,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name()).collect()
    }

    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x, mode)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<Tensor> {
        let mut g = grad_logits.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    /// Output of the conv trunk (the pooling layer's input), inference mode.
    pub fn trunk_features(&mut self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &mut self.layers[..self.pooling_at] {
            x = layer.forward(&x, Mode::Inference)?;
        }
        Ok(x)
    }

    /// Re-initializes the codebook from distinct trunk feature vectors of `batch`.
    pub fn seed_codebook(&mut self, batch: &Tensor, rng: &mut Rng) -> Result<()> {
        let features = self.trunk_features(batch)?;
        let s = features.shape().to_vec();
        let features = features.reshape(&[s[0], s[1], s[2] * s[3]])?;
        let k = match self.codebook() {
            Some(cb) => cb.k(),
            None => return Err(Error::config("model has no codebook")),
        };
        let fresh = Codebook::sample(rng, k, &features)?;
        *self.codebook_mut().expect("checked above") = fresh;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.zero_grad();
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters after the pooling layer (the classifier head).
    pub fn head_param_count(&self) -> usize {
        self.layers[self.pooling_at + 1..]
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.layers.iter().find_map(|l| l.codebook())
    }

    pub fn codebook_mut(&mut self) -> Option<&mut Codebook> {
        self.layers.iter_mut().find_map(|l| l.codebook_mut())
    }

    pub fn codebook_snapshot(&self) -> Option<CodebookSnapshot> {
        self.codebook().map(|cb| cb.snapshot())
    }

    /// Copies of every parameter value, in `params()` order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::state(format!(
                "snapshot has {} tensors, model has {} parameters",
                values.len(),
                params.len()
            )));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::state(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Vec<NamedTensor> {
        self.params()
            .iter()
            .enumerate()
            .map(|(i, p)| NamedTensor {
                name: format!("{i}.{}", p.name),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    pub fn load_checkpoint(&mut self, tensors: &[NamedTensor]) -> Result<()> {
        let values = tensors
            .iter()
            .map(|t| Tensor::from_vec(&t.shape, t.data.clone()))
            .collect::<Result<Vec<_>>>()?;
        self.restore(&values)
    }
}
