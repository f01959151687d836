//! Face-representation network with norm-driven local/global attention fusion.
//!
//! The crate builds everything from a small reverse-mode autodiff engine:
//! a residual CNN backbone, a multi-head multi-scale local feature extractor
//! (per-scale spatial attention plus squeeze-excitation channel attention),
//! a fully connected global head, a parameter-free fusion module that mixes
//! the two embeddings by their feature-norm quality, and margin-softmax
//! classification heads. A training/eval harness, synthetic face generator,
//! and an image-degradation lab for feature-norm correlation studies sit on
//! top, all deterministic given a seed.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gfe;
pub mod lgf;
pub mod margin;
pub mod mhms;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::ops::Mode;
pub use tensor::{Parameter, Scalar, Tensor};
