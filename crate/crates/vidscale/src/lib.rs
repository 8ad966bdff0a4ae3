//! Learned video rescaling: a trainable downscaler/upscaler pair in which the
//! high-frequency content discarded by downscaling is modeled as a Gaussian
//! mixture conditioned on the downscaled video itself, plus an extension to
//! lossy compression with a surrogate-gradient bridge for black-box codecs.
//!
//! The crate is organized around a small reverse-mode autodiff tape
//! ([`graph::Graph`]) over dense `f64` tensors. All heavy kernels are
//! data-parallel over independent output cells, so results are bitwise
//! reproducible regardless of thread count; the `parallel` feature (default)
//! enables rayon, and without it every kernel falls back to the sequential
//! path.

pub mod blocks;
pub mod codec;
pub mod data;
pub mod error;
pub mod freq;
pub mod gmm;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod parallel;
pub mod params;
pub mod prior;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
