//! Melody generation toolkit built around ABC notation.
//!
//! The pipeline: parse and normalize tunes ([`abc`]), describe their musical
//! form with S/B/E control codes ([`control`]), cut the prefixed text into
//! fixed-width bar patches ([`patchtok`]), and model the patch stream with a
//! dual-decoder autoregressive transformer ([`model`]) trained at desk scale
//! ([`trainer`]). [`generate`] samples new tunes under user-supplied control
//! codes and [`evalbench`] measures generation efficiency and form
//! controllability against a flat character-level baseline.
//!
//! Numeric code is generic over the scalar type (f32 for training, f64 for
//! gradient checking); concrete aliases live at the crate root.

pub mod abc;
pub mod container;
pub mod control;
pub mod evalbench;
pub mod fsutil;
pub mod generate;
pub mod model;
pub mod patchtok;
pub mod tensor;
pub mod trainer;

pub use tensor::Scalar;

/// Single-precision tensor, the training configuration.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, used by finite-difference gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// Single-precision dual-decoder model.
pub type Model32 = model::DualDecoderModel<f32>;
/// Double-precision dual-decoder model.
pub type Model64 = model::DualDecoderModel<f64>;
/// Single-precision flat character-level baseline.
pub type FlatModel32 = evalbench::FlatDecoder<f32>;
