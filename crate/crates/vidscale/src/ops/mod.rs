//! Differentiable tensor operations: elementwise math, 3-D convolution,
//! separable linear resampling (bicubic, Gaussian blur, adaptive pooling),
//! index rearrangement (pixel shuffling, channel splits), batched matmul and
//! softmax, reductions, the straight-through quantizer, mixture sampling and
//! the codec passthrough.

mod conv;
mod elementwise;
mod matmul;
mod quantize;
mod reduce;
mod resample;
mod shuffle;

pub use conv::conv3d_value;
pub use quantize::quantize_value;
pub use resample::{
    adaptive_pool_stencil, apply_stencil, bicubic_down_stencil, bicubic_down_value,
    bicubic_up_stencil, bicubic_up_value, gaussian_stencil, keys_cubic, subsample_stencil, Axis,
    Stencil,
};
pub use shuffle::{pixel_shuffle_value, pixel_unshuffle_value};

use crate::parallel;

const EW_CHUNK: usize = 1 << 14;

/// Parallel elementwise unary map (bitwise deterministic).
pub(crate) fn unary_map(src: &[f64], f: impl Fn(f64) -> f64 + Sync) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    parallel::chunks_mut_indexed(&mut out, EW_CHUNK, |i, c| {
        let base = i * EW_CHUNK;
        for (j, v) in c.iter_mut().enumerate() {
            *v = f(src[base + j]);
        }
    });
    out
}

/// Parallel elementwise binary map (bitwise deterministic).
pub(crate) fn binary_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
    assert_eq!(a.len(), b.len());
    let mut out = vec![0.0; a.len()];
    parallel::chunks_mut_indexed(&mut out, EW_CHUNK, |i, c| {
        let base = i * EW_CHUNK;
        for (j, v) in c.iter_mut().enumerate() {
            *v = f(a[base + j], b[base + j]);
        }
    });
    out
}
