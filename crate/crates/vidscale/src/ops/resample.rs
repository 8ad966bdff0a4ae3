use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{add_grad, Graph, GraphOp, Var};
use crate::parallel;
use crate::tensor::Tensor;

/// Axis of a clip that a 1-D stencil runs along.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
}

/// Sparse 1-D linear map (CSR over output rows). Bicubic resampling, Gaussian
/// blurring, adaptive average pooling and strided subsampling are all
/// instances; the transpose provides the exact backward pass.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub in_len: usize,
    pub out_len: usize,
    offsets: Vec<u32>,
    idx: Vec<u32>,
    wgt: Vec<f64>,
}

impl Stencil {
    fn from_rows(in_len: usize, rows: Vec<Vec<(usize, f64)>>) -> Stencil {
        let out_len = rows.len();
        let mut offsets = Vec::with_capacity(out_len + 1);
        let mut idx = Vec::new();
        let mut wgt = Vec::new();
        offsets.push(0u32);
        for row in rows {
            for (i, w) in row {
                idx.push(i as u32);
                wgt.push(w);
            }
            offsets.push(idx.len() as u32);
        }
        Stencil {
            in_len,
            out_len,
            offsets,
            idx,
            wgt,
        }
    }

    pub fn row(&self, m: usize) -> (&[u32], &[f64]) {
        let a = self.offsets[m] as usize;
        let b = self.offsets[m + 1] as usize;
        (&self.idx[a..b], &self.wgt[a..b])
    }

    /// Exact transpose (swaps input and output roles).
    pub fn transpose(&self) -> Stencil {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.in_len];
        for m in 0..self.out_len {
            let (idx, wgt) = self.row(m);
            for (&i, &w) in idx.iter().zip(wgt) {
                rows[i as usize].push((m, w));
            }
        }
        Stencil::from_rows(self.out_len, rows)
    }
}

/// Half-sample symmetric reflection (edge duplicated), used as the boundary
/// rule for every stencil in this crate.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Keys cubic interpolation kernel with a = -0.5.
pub fn keys_cubic(d: f64) -> f64 {
    let t = d.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

fn cubic_rows(
    in_len: usize,
    out_len: usize,
    src_of: impl Fn(usize) -> f64,
) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|m| {
            let src = src_of(m);
            let base = src.floor() as isize;
            (-1..=2)
                .map(|j| {
                    let p = base + j;
                    (reflect(p, in_len), keys_cubic(src - p as f64))
                })
                .collect()
        })
        .collect()
}

/// Bicubic decimation by integer factor `k` (half-pixel center convention).
pub fn bicubic_down_stencil(in_len: usize, k: usize) -> Result<Stencil> {
    if k < 2 || !in_len.is_multiple_of(k) {
        return Err(Error::dim(format!(
            "length {in_len} not divisible by downscale factor {k}"
        )));
    }
    let out_len = in_len / k;
    let rows = cubic_rows(in_len, out_len, |m| (m as f64 + 0.5) * k as f64 - 0.5);
    Ok(Stencil::from_rows(in_len, rows))
}

/// Bicubic interpolation by integer factor `k` (half-pixel center convention).
pub fn bicubic_up_stencil(in_len: usize, k: usize) -> Result<Stencil> {
    if k < 2 {
        return Err(Error::dim("upscale factor must be >= 2"));
    }
    let out_len = in_len * k;
    let rows = cubic_rows(in_len, out_len, |m| (m as f64 + 0.5) / k as f64 - 0.5);
    Ok(Stencil::from_rows(in_len, rows))
}

/// Same-length Gaussian blur, truncated at radius `floor(4*sigma)`
/// (13 taps for sigma = 1.6), kernel normalized to unit sum.
pub fn gaussian_stencil(len: usize, sigma: f64) -> Stencil {
    assert!(sigma > 0.0);
    let radius = ((4.0 * sigma).floor() as isize).max(1);
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    let rows = (0..len)
        .map(|m| {
            (-radius..=radius)
                .map(|j| (reflect(m as isize + j, len), taps[(j + radius) as usize]))
                .collect()
        })
        .collect();
    Stencil::from_rows(len, rows)
}

/// Adaptive average pooling bins (PyTorch-compatible): bin `m` averages input
/// positions `[floor(m*in/out), ceil((m+1)*in/out))`. For inputs smaller than
/// the target the bins degenerate to repeated single pixels.
pub fn adaptive_pool_stencil(in_len: usize, out_len: usize) -> Stencil {
    assert!(in_len > 0 && out_len > 0);
    let rows = (0..out_len)
        .map(|m| {
            let start = m * in_len / out_len;
            let end = ((m + 1) * in_len).div_ceil(out_len);
            let w = 1.0 / (end - start) as f64;
            (start..end).map(|i| (i, w)).collect()
        })
        .collect();
    Stencil::from_rows(in_len, rows)
}

/// Stride-`k` subsampling starting at offset 0.
pub fn subsample_stencil(in_len: usize, k: usize) -> Result<Stencil> {
    if k == 0 || !in_len.is_multiple_of(k) {
        return Err(Error::dim(format!(
            "length {in_len} not divisible by stride {k}"
        )));
    }
    let rows = (0..in_len / k).map(|m| vec![(m * k, 1.0)]).collect();
    Ok(Stencil::from_rows(in_len, rows))
}

fn split_axes(shape: &[usize], axis: Axis) -> (usize, usize, usize) {
    let r = shape.len();
    assert!(r >= 2, "stencil application needs at least 2 axes");
    match axis {
        Axis::Width => (shape[..r - 1].iter().product(), shape[r - 1], 1),
        Axis::Height => (shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]),
    }
}

/// Apply a 1-D stencil along the height or width axis of a tensor.
pub fn apply_stencil(x: &Tensor, axis: Axis, st: &Stencil) -> Result<Tensor> {
    let (outer, len, inner) = split_axes(x.shape(), axis);
    if len != st.in_len {
        return Err(Error::dim(format!(
            "stencil expects length {} along {:?}, got {}",
            st.in_len, axis, len
        )));
    }
    let mut out_shape = x.shape().to_vec();
    let r = out_shape.len();
    match axis {
        Axis::Width => out_shape[r - 1] = st.out_len,
        Axis::Height => out_shape[r - 2] = st.out_len,
    }
    let xv = x.data();
    let block = st.out_len * inner;
    let mut out = vec![0.0; outer * block];
    parallel::chunks_mut_indexed(&mut out, block, |o, dst| {
        let src = &xv[o * len * inner..][..len * inner];
        for m in 0..st.out_len {
            let (idx, wgt) = st.row(m);
            let dst_row = &mut dst[m * inner..][..inner];
            for (&i, &w) in idx.iter().zip(wgt) {
                let src_row = &src[i as usize * inner..][..inner];
                for (d, s) in dst_row.iter_mut().zip(src_row) {
                    *d += w * s;
                }
            }
        }
    });
    Tensor::from_vec(&out_shape, out)
}

struct StencilOp {
    x: usize,
    axis: Axis,
    transpose: Arc<Stencil>,
}

impl GraphOp for StencilOp {
    fn backward(&self, _values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gx = apply_stencil(g, self.axis, &self.transpose).unwrap();
        add_grad(grads, self.x, gx);
    }
}

impl Graph {
    /// Apply a 1-D stencil along one axis as a differentiable node.
    pub fn resample(&mut self, x: Var, axis: Axis, st: &Stencil) -> Result<Var> {
        let out = apply_stencil(self.value(x), axis, st)?;
        let transpose = Arc::new(st.transpose());
        Ok(self.push(
            Arc::new(out),
            Some(Box::new(StencilOp {
                x: x.0,
                axis,
                transpose,
            })),
        ))
    }

    /// Framewise bicubic downscale by `k` (height then width).
    pub fn bicubic_down(&mut self, x: Var, k: usize) -> Result<Var> {
        let [_, _, _, h, w] = self.value(x).dims5()?;
        let sh = bicubic_down_stencil(h, k)?;
        let sw = bicubic_down_stencil(w, k)?;
        let y = self.resample(x, Axis::Height, &sh)?;
        self.resample(y, Axis::Width, &sw)
    }

    /// Framewise bicubic upscale by `k` (height then width).
    pub fn bicubic_up(&mut self, x: Var, k: usize) -> Result<Var> {
        let [_, _, _, h, w] = self.value(x).dims5()?;
        let sh = bicubic_up_stencil(h, k)?;
        let sw = bicubic_up_stencil(w, k)?;
        let y = self.resample(x, Axis::Height, &sh)?;
        self.resample(y, Axis::Width, &sw)
    }

    /// Framewise Gaussian blur (same size).
    pub fn gaussian_blur(&mut self, x: Var, sigma: f64) -> Result<Var> {
        let [_, _, _, h, w] = self.value(x).dims5()?;
        let sh = gaussian_stencil(h, sigma);
        let sw = gaussian_stencil(w, sigma);
        let y = self.resample(x, Axis::Height, &sh)?;
        self.resample(y, Axis::Width, &sw)
    }

    /// Adaptive average pooling to `(oh, ow)`.
    pub fn adaptive_pool(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let [_, _, _, h, w] = self.value(x).dims5()?;
        let sh = adaptive_pool_stencil(h, oh);
        let sw = adaptive_pool_stencil(w, ow);
        let y = self.resample(x, Axis::Height, &sh)?;
        self.resample(y, Axis::Width, &sw)
    }
}

/// Framewise bicubic resampling of a clip by an integer factor.
pub fn bicubic_down_value(x: &Tensor, k: usize) -> Result<Tensor> {
    let [_, _, _, h, w] = x.dims5()?;
    let y = apply_stencil(x, Axis::Height, &bicubic_down_stencil(h, k)?)?;
    apply_stencil(&y, Axis::Width, &bicubic_down_stencil(w, k)?)
}

pub fn bicubic_up_value(x: &Tensor, k: usize) -> Result<Tensor> {
    let [_, _, _, h, w] = x.dims5()?;
    let y = apply_stencil(x, Axis::Height, &bicubic_up_stencil(h, k)?)?;
    apply_stencil(&y, Axis::Width, &bicubic_up_stencil(w, k)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::rng::Rng;

    #[test]
    fn constant_preserved_by_bicubic() {
        let x = Tensor::full(&[1, 1, 3, 8, 8], 0.5);
        let down = bicubic_down_value(&x, 4).unwrap();
        assert_eq!(down.shape(), &[1, 1, 3, 2, 2]);
        for &v in down.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
        let up = bicubic_up_value(&down, 4).unwrap();
        assert_eq!(up.shape(), &[1, 1, 3, 8, 8]);
        for &v in up.data() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn down_then_up_restores_shape() {
        let x = Tensor::from_fn(&[1, 2, 3, 8, 12], |i| (i as f64 * 0.01).sin());
        let down = bicubic_down_value(&x, 4).unwrap();
        let up = bicubic_up_value(&down, 4).unwrap();
        assert_eq!(up.shape(), x.shape());
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let x = Tensor::zeros(&[1, 1, 3, 9, 8]);
        assert!(bicubic_down_value(&x, 4).is_err());
    }

    /// Independent oracle: direct (non-separable) 2-D convolution with the
    /// Keys kernel and the same reflection rule.
    fn bicubic_down_oracle(x: &Tensor, k: usize) -> Tensor {
        let [b, t, c, h, w] = x.dims5().unwrap();
        let (oh, ow) = (h / k, w / k);
        let mut out = Tensor::zeros(&[b, t, c, oh, ow]);
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let sy = (oy as f64 + 0.5) * k as f64 - 0.5;
                            let sx = (ox as f64 + 0.5) * k as f64 - 0.5;
                            let by = sy.floor() as isize;
                            let bx = sx.floor() as isize;
                            let mut acc = 0.0;
                            for p in -1..=2 {
                                for q in -1..=2 {
                                    let wy = keys_cubic(sy - (by + p) as f64);
                                    let wx = keys_cubic(sx - (bx + q) as f64);
                                    let iy = reflect(by + p, h);
                                    let ix = reflect(bx + q, w);
                                    acc += wy * wx * x.at5(bi, ti, ci, iy, ix);
                                }
                            }
                            out.set5(bi, ti, ci, oy, ox, acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ramp_matches_direct_convolution_oracle() {
        let x = Tensor::from_fn(&[1, 1, 3, 8, 8], |i| {
            let y = (i / 8) % 8;
            let xx = i % 8;
            (y as f64 * 0.1 + xx as f64 * 0.05) / 2.0
        });
        let got = bicubic_down_value(&x, 2).unwrap();
        let want = bicubic_down_oracle(&x, 2);
        assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn random_clip_matches_oracle_k4() {
        let mut rng = Rng::new(77);
        let x = Tensor::from_fn(&[1, 2, 3, 8, 8], |_| rng.uniform());
        let got = bicubic_down_value(&x, 4).unwrap();
        let want = bicubic_down_oracle(&x, 4);
        assert!(got.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn stencil_gradients_match_finite_differences() {
        let mut rng = Rng::new(13);
        let x = Tensor::from_fn(&[1, 1, 2, 8, 8], |_| rng.normal());
        let probe = Tensor::from_fn(&[1, 1, 2, 4, 4], |i| ((i % 7) as f64 - 3.0) * 0.2);
        let rel = check_input_gradient(&[x], 0, 1e-5, move |g, vars| {
            let y = g.bicubic_down(vars[0], 2).unwrap();
            let p = g.leaf(probe.clone());
            let m = g.mul(y, p);
            g.sum_all(m)
        });
        assert!(rel < 1e-7, "rel err {rel}");

        let mut rng = Rng::new(14);
        let x = Tensor::from_fn(&[1, 1, 1, 6, 6], |_| rng.normal());
        let rel = check_input_gradient(&[x], 0, 1e-5, |g, vars| {
            let y = g.gaussian_blur(vars[0], 1.0).unwrap();
            let q = g.mul(y, y);
            g.sum_all(q)
        });
        assert!(rel < 1e-7, "blur rel err {rel}");

        let mut rng = Rng::new(15);
        let x = Tensor::from_fn(&[1, 1, 1, 5, 7], |_| rng.normal());
        let rel = check_input_gradient(&[x], 0, 1e-5, |g, vars| {
            let y = g.adaptive_pool(vars[0], 3, 3).unwrap();
            let q = g.mul(y, y);
            g.sum_all(q)
        });
        assert!(rel < 1e-7, "pool rel err {rel}");
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let x = Tensor::from_fn(&[1, 1, 1, 4, 4], |i| i as f64);
        let st = adaptive_pool_stencil(4, 4);
        let y = apply_stencil(&x, Axis::Height, &st).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn adaptive_pool_upsamples_small_inputs_by_repetition() {
        let st = adaptive_pool_stencil(2, 4);
        let x = Tensor::from_vec(&[1, 1, 1, 2, 1], vec![1.0, 2.0]).unwrap();
        let y = apply_stencil(&x, Axis::Height, &st).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn gaussian_tap_count_for_sigma_16() {
        let st = gaussian_stencil(32, 1.6);
        let (idx, _) = st.row(16);
        assert_eq!(idx.len(), 13);
    }

    #[test]
    fn subsample_picks_offset_zero() {
        let st = subsample_stencil(8, 4).unwrap();
        let x = Tensor::from_fn(&[1, 1, 1, 1, 8], |i| i as f64);
        let y = apply_stencil(&x, Axis::Width, &st).unwrap();
        assert_eq!(y.data(), &[0.0, 4.0]);
    }
}
