//! Character-level neural machine translation at desk scale.
//!
//! The crate provides the full pipeline: a minimal reverse-mode autodiff
//! engine ([`tensor`]), character/BPE segmentation and batching
//! ([`tokenize`]), three transformer variants including a convolutional
//! source-length-reduction front-end ([`model`]), Adam/Noam training with
//! gradient accumulation ([`train`]), beam-search decoding ([`decode`]), and
//! the BLEU-4 / chrF / CharacTER evaluation metrics ([`metrics`]).

pub mod decode;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tokenize;
pub mod train;

pub use tensor::{Scalar, Tensor, TensorError};
