//! Structural similarity and its multiscale extension.
//!
//! Framewise SSIM with the standard constants (K1 = 0.01, K2 = 0.03 on unit
//! dynamic range) and an 11-tap Gaussian window of sigma 1.5, evaluated at
//! valid window positions only, then averaged over frames (and channels in
//! RGB mode). MS-SSIM uses the canonical five scale weights with 2x average
//! pooling between scales; inputs too small for all five scales use the
//! scales that fit, with the weight subset renormalized.

use super::{luminance, Channel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn window_taps() -> [f64; WINDOW] {
    let mut taps = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Mean SSIM and mean contrast-structure over all valid windows of one plane.
fn plane_ssim_cs(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let taps = window_taps();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let oh = h - WINDOW + 1;
    let ow = w - WINDOW + 1;

    // separable window: horizontal pass first
    let hw = w - WINDOW + 1;
    let mut rows = vec![0.0; h * hw * 5]; // mu_a, mu_b, aa, bb, ab
    for y in 0..h {
        for x in 0..hw {
            let mut m = [0.0; 5];
            for (j, &t) in taps.iter().enumerate() {
                let av = a[y * w + x + j];
                let bv = b[y * w + x + j];
                m[0] += t * av;
                m[1] += t * bv;
                m[2] += t * av * av;
                m[3] += t * bv * bv;
                m[4] += t * av * bv;
            }
            for (k, v) in m.iter().enumerate() {
                rows[(k * h + y) * hw + x] = *v;
            }
        }
    }
    let mut ssim_sum = 0.0;
    let mut cs_sum = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let mut m = [0.0; 5];
            for (j, &t) in taps.iter().enumerate() {
                for k in 0..5 {
                    m[k] += t * rows[(k * h + y + j) * hw + x];
                }
            }
            let (mu_a, mu_b) = (m[0], m[1]);
            let va = m[2] - mu_a * mu_a;
            let vb = m[3] - mu_b * mu_b;
            let cov = m[4] - mu_a * mu_b;
            let l = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1);
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            ssim_sum += l * cs;
            cs_sum += cs;
        }
    }
    let n = (oh * ow) as f64;
    (ssim_sum / n, cs_sum / n)
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<[usize; 5]> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    a.dims5()
}

fn frame_planes(x: &Tensor, bi: usize, ti: usize, ci: usize) -> &[f64] {
    let [_, t, c, h, w] = x.dims5().unwrap();
    let base = ((bi * t + ti) * c + ci) * h * w;
    &x.data()[base..base + h * w]
}

/// Structural similarity, averaged over frames (RGB mode also averages over
/// the three channels; Y mode converts to luminance first).
pub fn ssim(a: &Tensor, b: &Tensor, channel: Channel) -> Result<f64> {
    let (a, b) = match channel {
        Channel::Rgb => (a.clone(), b.clone()),
        Channel::Y => (luminance(a)?, luminance(b)?),
    };
    let [bs, t, c, h, w] = check_pair(&a, &b)?;
    if h < WINDOW || w < WINDOW {
        return Err(Error::dim(format!(
            "frames {h}x{w} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let mut acc = 0.0;
    let mut n = 0.0;
    for bi in 0..bs {
        for ti in 0..t {
            for ci in 0..c {
                let (s, _) = plane_ssim_cs(
                    frame_planes(&a, bi, ti, ci),
                    frame_planes(&b, bi, ti, ci),
                    h,
                    w,
                );
                acc += s;
                n += 1.0;
            }
        }
    }
    Ok(acc / n)
}

fn downsample2(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = 0.25
                * (x[2 * y * w + 2 * xx]
                    + x[2 * y * w + 2 * xx + 1]
                    + x[(2 * y + 1) * w + 2 * xx]
                    + x[(2 * y + 1) * w + 2 * xx + 1]);
        }
    }
    (out, oh, ow)
}

/// Multiscale SSIM on the luminance plane, averaged over frames. Negative
/// contrast-structure values are clamped to zero before exponentiation.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = luminance(a)?;
    let b = luminance(b)?;
    let [bs, t, _, h, w] = check_pair(&a, &b)?;
    // how many scales fit
    let mut scales = 0;
    let (mut sh, mut sw) = (h, w);
    while scales < 5 && sh >= WINDOW && sw >= WINDOW {
        scales += 1;
        sh /= 2;
        sw /= 2;
    }
    if scales == 0 {
        return Err(Error::dim(format!(
            "frames {h}x{w} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let wsum: f64 = MS_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_WEIGHTS[..scales].iter().map(|v| v / wsum).collect();

    let mut acc = 0.0;
    let mut n = 0.0;
    for bi in 0..bs {
        for ti in 0..t {
            let mut pa = frame_planes(&a, bi, ti, 0).to_vec();
            let mut pb = frame_planes(&b, bi, ti, 0).to_vec();
            let (mut ch, mut cw) = (h, w);
            let mut value = 1.0;
            for (si, &wgt) in weights.iter().enumerate() {
                let (s, cs) = plane_ssim_cs(&pa, &pb, ch, cw);
                if si + 1 == weights.len() {
                    value *= s.max(0.0).powf(wgt);
                } else {
                    value *= cs.max(0.0).powf(wgt);
                    let (na, nh, nw) = downsample2(&pa, ch, cw);
                    let (nb, _, _) = downsample2(&pb, ch, cw);
                    pa = na;
                    pb = nb;
                    ch = nh;
                    cw = nw;
                }
            }
            acc += value;
            n += 1.0;
        }
    }
    Ok(acc / n)
}
