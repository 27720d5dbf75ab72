//! Frequency-fused visual state-space models on a small, self-contained
//! reverse-mode differentiation core.
//!
//! Layers, bottom up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` tensors and a tape recording
//!   whole-tensor primitives.
//! - [`fft`]: 2D DFT (radix-2 with a direct fallback) and amplitude spectra.
//! - [`ssm`]: discretization, selective parameters, scan recurrence and the
//!   time-invariant convolution kernel.
//! - [`blocks`], [`embed`], [`model`]: block variants, tokenizers and model
//!   assembly with parameter and MAC accounting.
//! - [`harness`]: synthetic data, SGD training, evaluation, checkpoints and
//!   the verification suite behind the CLI.

pub mod autodiff;
pub mod blocks;
pub mod embed;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod params;
pub mod ssm;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
