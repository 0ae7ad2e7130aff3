//! Bag-of-features pooling with a learnable RBF codebook, a decorrelation
//! penalty on the codebook centers, and the small CNN toolkit needed to
//! train and compare it against global max/average pooling.

// Parameter checks are written as `!(x > 0.0)` so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bof;
pub mod data;
pub mod decorrelation;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
