//! Hollow-kernel convolutional networks on the CPU.
//!
//! This crate implements the full pipeline for shape-aware ("hollow")
//! convolution kernels: a dense tensor type with reverse-mode automatic
//! differentiation, hollow mask construction and shape-preserving masked
//! optimization, the U-Net family of segmentation architectures (dilated,
//! hollow, kernel-generating, temporal and Bi-ConvLSTM variants), the
//! weighted-BCE + Dice training losses, a synthetic hollow-phantom data
//! generator, and a deterministic experiment harness.
//!
//! Everything runs on the CPU with explicit seeds; two runs with the same
//! seed and thread count produce bit-identical buffers.

pub mod arch;
pub mod data;
pub mod error;
pub mod hollow;
pub mod io;
pub mod loss;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Element, Tape, Tensor, Var};
