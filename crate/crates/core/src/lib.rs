//! ANN-to-SNN conversion and integrate-and-fire simulation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense CHW tensors and the handful of kernels the fixture
//!   networks need (convolution, transposed convolution, max pooling, ReLU,
//!   channel concatenation).
//! - [`graph`]: the ANN as a layer DAG, its on-disk format, the reference
//!   forward pass, batch-norm folding and activation-maxima sampling.
//! - [`convert`]: channel-wise weight normalization and the converted model.
//! - [`snn`]: the temporally separated spiking engine with rate (optionally
//!   compressed) and weighted-spike (STDI) coding, membrane-potential max
//!   pooling and output decoding.
//! - [`energy`]: operation counting, the energy model and output comparison.

pub mod convert;
pub mod energy;
pub mod error;
pub mod graph;
pub mod snn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{IntTensor, Kernel, Shape, Tensor};
