//! Fourier-tokenized autoregressive transformer surrogates for
//! time-dependent PDEs.
//!
//! Fields are mapped to a fixed number of tokens per (timestep, quantity)
//! through truncated real FFTs, a shared decoder-only transformer with a
//! block-causal temporal mask predicts the next timestep, and predictions
//! are decoded back by zero-padding and inverse FFT at any grid resolution.
//! Classical spectral solvers provide ground truth, and a contrastive
//! caption/physics aligner supplies the fine-tuning signal.

pub mod aligner;
pub mod archive;
pub mod codec;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fft;
pub mod field;
pub mod model;
pub mod params;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
