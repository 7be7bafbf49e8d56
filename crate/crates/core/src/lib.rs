//! Vision Mamba with registers, built on a small tape-based tensor engine.
//!
//! - [`graph`] / [`tensor`]: dense tensors and reverse-mode autodiff.
//! - [`ssm`]: ZOH discretization, sequential and associative scans, the LTI
//!   convolution view and the selective scan.
//! - [`block`]: the bidirectional Mamba block.
//! - [`model`]: patch embedding, register layouts, backbone and register head.
//! - [`artifact`]: token-norm maps, distance maps, norm-based selection, probes.
//! - [`data`] / [`train`]: synthetic datasets and the training loop.
//! - [`mbrt`]: the tensor container used for checkpoints and traces.

pub mod artifact;
pub mod block;
pub mod data;
pub mod error;
pub mod graph;
pub mod mbrt;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
