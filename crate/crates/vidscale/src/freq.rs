//! Frequency analyzer and synthesizer.
//!
//! A clip is decomposed into a bicubic-downscaled low-frequency lane and the
//! pixel-unshuffled residual high-frequency lane; a learnable transform over
//! the concatenated lanes produces the features actually stored and modeled.
//! The synthesizer applies the inverse transform (exact coupling inverse for
//! the invertible variant, an independently trained mirror stack for the
//! plain variant) followed by the exact algebraic recomposition.

use crate::blocks::{
    build_coupling, build_dense_block, coupling_forward, coupling_inverse, dense_block_forward,
    randomize_coupling, randomize_dense_block, CouplingParams, DenseBlockParams,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::{
    apply_stencil, bicubic_down_value, bicubic_up_value, pixel_shuffle_value,
    pixel_unshuffle_value, Axis,
};
use crate::params::{ParamLeaves, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Low/high frequency feature pair at 1/k resolution.
#[derive(Copy, Clone, Debug)]
pub struct FrequencySplit {
    /// `(B, T, 3, H/k, W/k)`
    pub low: Var,
    /// `(B, T, 3k^2, H/k, W/k)`
    pub high: Var,
    pub k: usize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TransformKind {
    /// Coupling blocks; the synthesizer reuses the same parameters via the
    /// exact inverse.
    Invertible,
    /// Plain dense blocks; the synthesizer is an independent mirrored stack.
    Plain,
}

#[derive(Clone, Debug)]
pub struct TransformParams {
    pub kind: TransformKind,
    pub couplings: Vec<CouplingParams>,
    pub forward_blocks: Vec<DenseBlockParams>,
    pub mirror_blocks: Vec<DenseBlockParams>,
    pub k: usize,
    pub channels: usize,
}

/// Register the transform parameters. Every subnetwork's fusion layer is
/// zero-initialized, so the transform starts as the identity map and the
/// low-frequency lane starts equal to the bicubic downscale.
pub fn build_transform(
    store: &mut ParamStore,
    prefix: &str,
    kind: TransformKind,
    blocks: usize,
    k: usize,
    growth: usize,
    rng: &mut Rng,
) -> TransformParams {
    let channels = 3 * (1 + k * k);
    let (s1, s2) = (3, 3 * k * k);
    let mut couplings = Vec::new();
    let mut forward_blocks = Vec::new();
    let mut mirror_blocks = Vec::new();
    match kind {
        TransformKind::Invertible => {
            for i in 0..blocks {
                couplings.push(build_coupling(
                    store,
                    &format!("{prefix}.inv{i}"),
                    s1,
                    s2,
                    growth,
                    true,
                    rng,
                ));
            }
        }
        TransformKind::Plain => {
            for i in 0..blocks {
                forward_blocks.push(build_dense_block(
                    store,
                    &format!("{prefix}.fwd{i}"),
                    channels,
                    channels,
                    growth,
                    true,
                    rng,
                    true,
                ));
            }
            for i in 0..blocks {
                mirror_blocks.push(build_dense_block(
                    store,
                    &format!("{prefix}.mir{i}"),
                    channels,
                    channels,
                    growth,
                    true,
                    rng,
                    true,
                ));
            }
        }
    }
    TransformParams {
        kind,
        couplings,
        forward_blocks,
        mirror_blocks,
        k,
        channels,
    }
}

/// Randomize every subnetwork (tests exercising non-identity transforms).
pub fn randomize_transform(store: &mut ParamStore, t: &TransformParams, rng: &mut Rng, std: f64) {
    for c in &t.couplings {
        randomize_coupling(store, c, rng, std);
    }
    for b in t.forward_blocks.iter().chain(&t.mirror_blocks) {
        randomize_dense_block(store, b, rng, std);
    }
}

fn check_divisible(x: &Tensor, k: usize) -> Result<[usize; 5]> {
    let d = x.dims5()?;
    if k < 2 {
        return Err(Error::dim("downscale ratio must be >= 2"));
    }
    if d[3] % k != 0 || d[4] % k != 0 {
        return Err(Error::dim(format!(
            "spatial dims {}x{} not divisible by downscale ratio {k}",
            d[3], d[4]
        )));
    }
    Ok(d)
}

/// Fixed decomposition: `c_l = Down(x)`, `c_h = PixelUnshuffle(x - Up(c_l))`.
pub fn decompose_fixed(g: &mut Graph, x: Var, k: usize) -> Result<(Var, Var)> {
    check_divisible(g.value(x), k)?;
    let c_l = g.bicubic_down(x, k)?;
    let up = g.bicubic_up(c_l, k)?;
    let residual = g.sub(x, up);
    let c_h = g.pixel_unshuffle(residual, k)?;
    Ok((c_l, c_h))
}

/// Exact algebraic inverse of [`decompose_fixed`]:
/// `x = Up(c_l) + PixelShuffle(c_h)`.
pub fn compose_fixed(g: &mut Graph, c_l: Var, c_h: Var, k: usize) -> Result<Var> {
    let dl = g.value(c_l).dims5()?;
    let dh = g.value(c_h).dims5()?;
    if dl[2] != 3 || dh[2] != 3 * k * k || dl[3] != dh[3] || dl[4] != dh[4] {
        return Err(Error::dim(format!(
            "inconsistent decomposition shapes {:?} / {:?} for ratio {k}",
            dl, dh
        )));
    }
    let up = g.bicubic_up(c_l, k)?;
    let detail = g.pixel_shuffle(c_h, k)?;
    Ok(g.add(up, detail))
}

/// Value-level [`decompose_fixed`].
pub fn decompose_fixed_value(x: &Tensor, k: usize) -> Result<(Tensor, Tensor)> {
    check_divisible(x, k)?;
    let c_l = bicubic_down_value(x, k)?;
    let up = bicubic_up_value(&c_l, k)?;
    let residual = x.zip_map(&up, |a, b| a - b);
    let c_h = pixel_unshuffle_value(&residual, k)?;
    Ok((c_l, c_h))
}

/// Value-level [`compose_fixed`].
pub fn compose_fixed_value(c_l: &Tensor, c_h: &Tensor, k: usize) -> Result<Tensor> {
    let up = bicubic_up_value(c_l, k)?;
    let detail = pixel_shuffle_value(c_h, k)?;
    if up.shape() != detail.shape() {
        return Err(Error::dim(format!(
            "inconsistent decomposition shapes {:?} / {:?}",
            up.shape(),
            detail.shape()
        )));
    }
    Ok(up.zip_map(&detail, |a, b| a + b))
}

/// Apply the learnable transform to the concatenated lanes.
pub fn transform_forward(
    g: &mut Graph,
    f: Var,
    t: &TransformParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    let mut cur = f;
    match t.kind {
        TransformKind::Invertible => {
            for c in &t.couplings {
                cur = coupling_forward(g, cur, c, leaves)?;
            }
        }
        TransformKind::Plain => {
            for b in &t.forward_blocks {
                cur = dense_block_forward(g, cur, b, leaves)?;
            }
        }
    }
    Ok(cur)
}

/// Apply the synthesizer-side transform (coupling inverse or mirror stack).
pub fn transform_inverse(
    g: &mut Graph,
    f: Var,
    t: &TransformParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    let mut cur = f;
    match t.kind {
        TransformKind::Invertible => {
            for c in t.couplings.iter().rev() {
                cur = coupling_inverse(g, cur, c, leaves)?;
            }
        }
        TransformKind::Plain => {
            for b in &t.mirror_blocks {
                cur = dense_block_forward(g, cur, b, leaves)?;
            }
        }
    }
    Ok(cur)
}

/// Analyzer: fixed decomposition, transform, channel split.
pub fn analyze(
    g: &mut Graph,
    x: Var,
    t: &TransformParams,
    leaves: &ParamLeaves,
) -> Result<FrequencySplit> {
    let k = t.k;
    let (c_l, c_h) = decompose_fixed(g, x, k)?;
    let cat = g.concat_channels(&[c_l, c_h])?;
    let f = transform_forward(g, cat, t, leaves)?;
    let low = g.select_channels(f, 0, 3)?;
    let high = g.select_channels(f, 3, 3 + 3 * k * k)?;
    Ok(FrequencySplit { low, high, k })
}

/// Synthesizer: channel concat, inverse transform, fixed recomposition.
pub fn synthesize(
    g: &mut Graph,
    low: Var,
    high: Var,
    t: &TransformParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    let k = t.k;
    let dl = g.value(low).dims5()?;
    let dh = g.value(high).dims5()?;
    if dl[2] != 3 || dh[2] != 3 * k * k {
        return Err(Error::dim(format!(
            "synthesizer expects 3 + {} channels, got {} + {}",
            3 * k * k,
            dl[2],
            dh[2]
        )));
    }
    let cat = g.concat_channels(&[low, high])?;
    let f = transform_inverse(g, cat, t, leaves)?;
    let c_l = g.select_channels(f, 0, 3)?;
    let c_h = g.select_channels(f, 3, 3 + 3 * k * k)?;
    compose_fixed(g, c_l, c_h, k)
}

/// Bicubic resampling of a clip by an integer ratio, framewise.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Scale {
    Down(usize),
    Up(usize),
}

pub fn bicubic_resample(x: &Tensor, scale: Scale) -> Result<Tensor> {
    match scale {
        Scale::Down(k) => {
            check_divisible(x, k)?;
            bicubic_down_value(x, k)
        }
        Scale::Up(k) => bicubic_up_value(x, k),
    }
}

/// Framewise Gaussian blur of a clip (value level).
pub fn gaussian_blur_value(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let [_, _, _, h, w] = x.dims5()?;
    let sh = crate::ops::gaussian_stencil(h, sigma);
    let sw = crate::ops::gaussian_stencil(w, sigma);
    let y = apply_stencil(x, Axis::Height, &sh)?;
    apply_stencil(&y, Axis::Width, &sw)
}

/// Bicubic down, 255-level storage quantization, bicubic up: the fixed
/// pipeline every learned configuration is compared against.
pub fn bicubic_baseline(x: &Tensor, k: usize) -> Result<Tensor> {
    let down = bicubic_resample(x, Scale::Down(k))?;
    let stored = crate::ops::quantize_value(&down);
    bicubic_resample(&stored, Scale::Up(k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::keys_cubic;

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

    /// Independent bicubic oracle (direct 2-D convolution).
    fn bicubic_oracle(
        x: &Tensor,
        src_of: impl Fn(usize, usize) -> (f64, f64),
        oh: usize,
        ow: usize,
    ) -> Tensor {
        let [b, t, c, h, w] = x.dims5().unwrap();
        let mut out = Tensor::zeros(&[b, t, c, oh, ow]);
        for bi in 0..b {
            for ti in 0..t {
                for ci in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let (sy, sx) = src_of(oy, ox);
                            let by = sy.floor() as isize;
                            let bx = sx.floor() as isize;
                            let mut acc = 0.0;
                            for p in -1..=2 {
                                for q in -1..=2 {
                                    let wy = keys_cubic(sy - (by + p) as f64);
                                    let wx = keys_cubic(sx - (bx + q) as f64);
                                    acc += wy
                                        * wx
                                        * x.at5(bi, ti, ci, reflect(by + p, h), reflect(bx + q, w));
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
    fn constant_clip_decomposes_to_constant_and_zero() {
        let x = Tensor::full(&[1, 2, 3, 8, 8], 0.5);
        let (c_l, c_h) = decompose_fixed_value(&x, 2).unwrap();
        for &v in c_l.data() {
            assert!((v - 0.5).abs() < 1e-9);
        }
        for &v in c_h.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn compose_inverts_decompose() {
        let mut rng = Rng::new(12);
        for &k in &[2usize, 4] {
            let x = Tensor::from_fn(&[1, 2, 3, 8, 8], |_| rng.uniform());
            let (c_l, c_h) = decompose_fixed_value(&x, k).unwrap();
            let back = compose_fixed_value(&c_l, &c_h, k).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-6, "k={k}");
        }
    }

    #[test]
    fn residual_matches_reference_bicubic_oracle() {
        let mut rng = Rng::new(42);
        let x = Tensor::from_fn(&[1, 1, 3, 8, 8], |_| rng.uniform());
        let k = 2;
        let (c_l, c_h) = decompose_fixed_value(&x, k).unwrap();
        let oracle_down = bicubic_oracle(
            &x,
            |oy, ox| {
                (
                    (oy as f64 + 0.5) * k as f64 - 0.5,
                    (ox as f64 + 0.5) * k as f64 - 0.5,
                )
            },
            4,
            4,
        );
        assert!(c_l.max_abs_diff(&oracle_down) < 1e-6);
        let oracle_up = bicubic_oracle(
            &oracle_down,
            |oy, ox| {
                (
                    (oy as f64 + 0.5) / k as f64 - 0.5,
                    (ox as f64 + 0.5) / k as f64 - 0.5,
                )
            },
            8,
            8,
        );
        let residual = x.zip_map(&oracle_up, |a, b| a - b);
        let oracle_ch = pixel_unshuffle_value(&residual, k).unwrap();
        assert!(c_h.max_abs_diff(&oracle_ch) < 1e-6);
    }

    #[test]
    fn compose_of_one_hot_high_lane_is_single_detail_pixel() {
        let k = 2;
        let c_l = Tensor::zeros(&[1, 1, 3, 2, 2]);
        let mut c_h = Tensor::zeros(&[1, 1, 12, 2, 2]);
        // channel 7 = base channel 1, dy 1, dx 1 -> pixel (y*k+1, x*k+1)
        c_h.set5(0, 0, 7, 1, 0, 1.0);
        let x = compose_fixed_value(&c_l, &c_h, k).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for xx in 0..4 {
                    let v = x.at5(0, 0, c, y, xx);
                    if c == 1 && y == 3 && xx == 1 {
                        assert_eq!(v, 1.0);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_transform_passes_lanes_through() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let t = build_transform(
            &mut store,
            "t",
            TransformKind::Invertible,
            2,
            2,
            8,
            &mut rng,
        );
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x0 = Tensor::from_fn(&[1, 2, 3, 8, 8], |_| rng.uniform());
        let x = g.leaf(x0.clone());
        let split = analyze(&mut g, x, &t, &leaves).unwrap();
        let (c_l, c_h) = decompose_fixed_value(&x0, 2).unwrap();
        assert_eq!(g.shape(split.low), &[1, 2, 3, 4, 4]);
        assert_eq!(g.shape(split.high), &[1, 2, 12, 4, 4]);
        assert!(g.value(split.low).max_abs_diff(&c_l) < 1e-12);
        assert!(g.value(split.high).max_abs_diff(&c_h) < 1e-12);
    }

    #[test]
    fn invertible_synthesis_restores_input() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(9);
        let t = build_transform(
            &mut store,
            "t",
            TransformKind::Invertible,
            2,
            2,
            8,
            &mut rng,
        );
        randomize_transform(&mut store, &t, &mut rng, 0.1);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x0 = Tensor::from_fn(&[1, 2, 3, 8, 8], |_| rng.uniform());
        let x = g.leaf(x0.clone());
        let split = analyze(&mut g, x, &t, &leaves).unwrap();
        let back = synthesize(&mut g, split.low, split.high, &t, &leaves).unwrap();
        let err = g.value(back).max_abs_diff(&x0);
        assert!(err < 1e-5, "roundtrip err {err}");
    }

    #[test]
    fn plain_mirror_at_identity_init_reconstructs() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(10);
        let t = build_transform(&mut store, "t", TransformKind::Plain, 2, 2, 8, &mut rng);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x0 = Tensor::from_fn(&[1, 1, 3, 8, 8], |_| rng.uniform());
        let x = g.leaf(x0.clone());
        let split = analyze(&mut g, x, &t, &leaves).unwrap();
        let back = synthesize(&mut g, split.low, split.high, &t, &leaves).unwrap();
        assert!(g.value(back).max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn high_lane_perturbation_moves_through_shuffle_only() {
        // with the identity transform, changing f_h changes the output by
        // exactly the pixel shuffle of the change
        let mut store = ParamStore::new();
        let mut rng = Rng::new(11);
        let t = build_transform(
            &mut store,
            "t",
            TransformKind::Invertible,
            1,
            2,
            8,
            &mut rng,
        );
        let x0 = Tensor::from_fn(&[1, 1, 3, 4, 4], |_| rng.uniform());
        let (c_l, c_h) = decompose_fixed_value(&x0, 2).unwrap();
        let mut bumped = c_h.clone();
        bumped.data_mut()[5] += 0.25;

        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let lo = g.leaf(c_l);
        let hi_a = g.leaf(c_h.clone());
        let hi_b = g.leaf(bumped.clone());
        let out_a = synthesize(&mut g, lo, hi_a, &t, &leaves).unwrap();
        let out_b = synthesize(&mut g, lo, hi_b, &t, &leaves).unwrap();
        let diff = g.value(out_b).zip_map(g.value(out_a), |a, b| a - b);
        let expect = pixel_shuffle_value(&bumped.zip_map(&c_h, |a, b| a - b), 2).unwrap();
        assert!(diff.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn analyze_gradient_matches_central_differences() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(14);
        let t = build_transform(
            &mut store,
            "t",
            TransformKind::Invertible,
            1,
            2,
            4,
            &mut rng,
        );
        randomize_transform(&mut store, &t, &mut rng, 0.05);
        let x0 = Tensor::from_fn(&[1, 1, 3, 4, 4], |_| rng.uniform() * 0.8 + 0.1);
        let rel = crate::gradcheck::check_input_gradient(&[x0], 0, 1e-5, move |g, vars| {
            let leaves = store.leaves(g);
            let split = analyze(g, vars[0], &t, &leaves).unwrap();
            let a = g.mul(split.low, split.low);
            let b = g.mul(split.high, split.high);
            let sa = g.sum_all(a);
            let sb = g.sum_all(b);
            g.add(sa, sb)
        });
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn divisibility_errors_propagate() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 3, 6, 6]));
        assert!(decompose_fixed(&mut g, x, 4).is_err());
    }

    #[test]
    fn analyzer_parameter_gradients_match_central_differences() {
        // perturb stored transform parameters directly and compare the
        // analytic leaf gradients against central differences
        let mut store = ParamStore::new();
        let mut rng = Rng::new(15);
        let t = build_transform(
            &mut store,
            "t",
            TransformKind::Invertible,
            1,
            2,
            4,
            &mut rng,
        );
        randomize_transform(&mut store, &t, &mut rng, 0.05);
        let x0 = Tensor::from_fn(&[1, 1, 3, 4, 4], |_| rng.uniform() * 0.8 + 0.1);
        let probe = Tensor::from_fn(&[1, 1, 15, 2, 2], |i| ((i % 9) as f64 - 4.0) * 0.1);

        let eval = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let leaves = store.leaves(&mut g);
            let x = g.leaf(x0.clone());
            let (c_l, c_h) = decompose_fixed(&mut g, x, 2).unwrap();
            let cat = g.concat_channels(&[c_l, c_h]).unwrap();
            let f = transform_forward(&mut g, cat, &t, &leaves).unwrap();
            let p = g.leaf(probe.clone());
            let m = g.mul(f, p);
            let s = g.sum_all(m);
            g.value(s).item()
        };

        // analytic gradients
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x = g.leaf(x0.clone());
        let (c_l, c_h) = decompose_fixed(&mut g, x, 2).unwrap();
        let cat = g.concat_channels(&[c_l, c_h]).unwrap();
        let f = transform_forward(&mut g, cat, &t, &leaves).unwrap();
        let p = g.leaf(probe.clone());
        let m = g.mul(f, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);

        let mut worst = 0.0f64;
        let mut checked = 0;
        for name in [
            "t.inv0.cross.fusion.w",
            "t.inv0.scale.stage0.w",
            "t.inv0.shift.fusion.b",
        ] {
            let id = store.lookup(name).unwrap();
            let analytic = leaves
                .gradient(&grads, id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
            let n = store.get(id).len();
            for c in (0..n).step_by((n / 8).max(1)) {
                let h = 1e-5;
                let mut plus = store.clone();
                plus.get_mut(id).data_mut()[c] += h;
                let mut minus = store.clone();
                minus.get_mut(id).data_mut()[c] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max((analytic.data()[c] - fd).abs() / fd.abs().max(1.0));
                checked += 1;
            }
        }
        assert!(checked > 10);
        assert!(worst < 1e-6, "parameter gradient rel err {worst}");
    }
}
