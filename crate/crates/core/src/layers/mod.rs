//! Network layers with explicit forward/backward passes.
//!
//! Every layer caches what its backward pass needs during `forward`, and
//! `backward` *accumulates* into the gradient slots of its parameters. Call
//! [`Layer::zero_grad`] (or `Model::zero_grad`) between optimizer steps.

mod activation;
mod conv;
mod dense;
mod dropout;
mod pool;

pub use activation::Relu;
pub use conv::Conv2d;
pub use dense::Dense;
pub use dropout::Dropout;
pub use pool::{Flatten, GlobalAvgPool, GlobalMaxPool, MaxPool2x2};

use serde::{Deserialize, Serialize};

use crate::bof::Codebook;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    CodebookCenters,
    CodebookScales,
}

impl ParamKind {
    pub fn is_codebook(self) -> bool {
        matches!(self, ParamKind::CodebookCenters | ParamKind::CodebookScales)
    }
}

/// A trainable tensor and its gradient slot (always the same shape).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: Tensor) -> Param {
        let grad = Tensor::zeros(value.shape()).expect("parameter tensors have valid shapes");
        Param {
            name: name.into(),
            kind,
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub trait Layer: Send {
    fn name(&self) -> String;

    /// Layers with large activations skip caching in inference mode, so
    /// `backward` needs a preceding training-mode forward.
    fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Gradient w.r.t. the last forward input. Parameter gradients are accumulated.
    fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor>;

    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn codebook(&self) -> Option<&Codebook> {
        None
    }

    fn codebook_mut(&mut self) -> Option<&mut Codebook> {
        None
    }
}

pub(crate) fn expect_rank(t: &Tensor, rank: usize, who: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(crate::Error::Shape(format!(
            "{who} expects a rank-{rank} input, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

pub(crate) fn cached<'a>(cache: &'a Option<Tensor>, who: &str) -> Result<&'a Tensor> {
    cache
        .as_ref()
        .ok_or_else(|| crate::Error::State(format!("{who}: backward needs a preceding training-mode forward")))
}

pub(crate) fn expect_same_shape(grad: &Tensor, shape: &[usize], who: &str) -> Result<()> {
    if grad.shape() != shape {
        return Err(crate::Error::Shape(format!(
            "{who}: gradient shape {:?} does not match output {:?}",
            grad.shape(),
            shape
        )));
    }
    Ok(())
}
