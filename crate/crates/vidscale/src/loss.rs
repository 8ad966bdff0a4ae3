//! Training objectives: conditional negative log-likelihood of the
//! high-frequency lane, the bicubic mimicry penalty, the full-feature
//! reconstruction penalty, the sampled reconstruction error, the per-location
//! Pearson correlation, and the surrogate/codec matching loss, plus the two
//! weighted totals.

use crate::error::{Error, Result};
use crate::freq::{synthesize, FrequencySplit, TransformParams};
use crate::gmm::{log_prob_sum, MixtureField};
use crate::graph::{Graph, Var};
use crate::params::ParamLeaves;

const RHO_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct LossWeights {
    pub conditional: f64,
    pub mimic: f64,
    pub penalize: f64,
    pub recons: f64,
    pub rho: f64,
    pub codec: f64,
    pub k: usize,
}

impl LossWeights {
    pub fn rescale_defaults(k: usize) -> Self {
        LossWeights {
            conditional: 0.01,
            mimic: 1.0,
            penalize: 1.0,
            recons: 1.0,
            rho: 1e-5,
            codec: 4.0,
            k,
        }
    }

    /// Compression training re-weights the reconstruction term to 0.1.
    pub fn compress_defaults(k: usize) -> Self {
        LossWeights {
            recons: 0.1,
            ..LossWeights::rescale_defaults(k)
        }
    }
}

/// Linear decay of the conditional-loss weight to exactly 0 over the final
/// half of training; returns the effective weight for iteration `iter` of
/// `total` (0-based).
pub fn conditional_weight_at(base: f64, iter: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let decay_start = total / 2;
    let last = total - 1;
    if iter < decay_start {
        base
    } else if last <= decay_start {
        0.0
    } else {
        base * (last - iter) as f64 / (last - decay_start) as f64
    }
}

/// Negative log-likelihood of the high-frequency lane under the predicted
/// field, summed over locations and averaged over the batch.
pub fn loss_conditional(g: &mut Graph, field: &MixtureField, f_h: Var) -> Result<Var> {
    let batch = g.shape(f_h)[0] as f64;
    let lp = log_prob_sum(g, field, f_h)?;
    Ok(g.scale(lp, -1.0 / batch))
}

/// Mean-square distance between the low-frequency lane and the bicubic
/// downscale of the input (the loss enters the total scaled by k^2).
pub fn loss_mimic(g: &mut Graph, x: Var, f_l: Var, k: usize) -> Result<Var> {
    let reference = g.bicubic_down(x, k)?;
    let d = g.sub(reference, f_l);
    let sq = g.mul(d, d);
    Ok(g.mean_all(sq))
}

/// Mean-square distance between the input and the synthesizer output on the
/// *full* feature (no quantization, no sampling). Zero by construction for
/// invertible transforms; trains the mirror stack for plain ones.
pub fn loss_penalize(
    g: &mut Graph,
    x: Var,
    split: &FrequencySplit,
    t: &TransformParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    let recon = synthesize(g, split.low, split.high, t, leaves)?;
    let d = g.sub(x, recon);
    let sq = g.mul(d, d);
    Ok(g.mean_all(sq))
}

/// Mean absolute reconstruction error.
pub fn loss_recons(g: &mut Graph, x: Var, x_hat: Var) -> Result<Var> {
    if g.shape(x) != g.shape(x_hat) {
        return Err(Error::dim(format!(
            "reconstruction shape mismatch: {:?} vs {:?}",
            g.shape(x),
            g.shape(x_hat)
        )));
    }
    let d = g.sub(x, x_hat);
    let a = g.abs(d);
    Ok(g.mean_all(a))
}

/// The four rescaling loss parts (as graph nodes).
#[derive(Copy, Clone, Debug)]
pub struct RescaleParts {
    pub conditional: Var,
    pub mimic: Var,
    pub penalize: Var,
    pub recons: Var,
}

/// Weighted rescaling total. `conditional_weight` is the scheduled value of
/// the conditional weight at the current iteration (see
/// [`conditional_weight_at`]).
pub fn total_rescale(
    g: &mut Graph,
    parts: &RescaleParts,
    w: &LossWeights,
    conditional_weight: f64,
) -> Var {
    let k2 = (w.k * w.k) as f64;
    let c = g.scale(parts.conditional, conditional_weight);
    let m = g.scale(parts.mimic, w.mimic * k2);
    let p = g.scale(parts.penalize, w.penalize);
    let r = g.scale(parts.recons, w.recons);
    let cm = g.add(c, m);
    let pr = g.add(p, r);
    g.add(cm, pr)
}

/// Per-location Pearson correlation across the batch axis, averaged over all
/// locations. `1e-8` is added to each standard-deviation term, so constant
/// (zero-variance) locations contribute 0.
pub fn pearson_rho(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!(
            "correlation inputs differ: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let n = g.shape(a)[0];
    if n < 2 {
        return Err(Error::InsufficientSamples(format!(
            "per-location correlation needs a batch of at least 2, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let sum_a = g.sum_axis0(a);
    let mean_a = g.scale(sum_a, inv_n);
    let mean_a = g.broadcast_axis0(mean_a, n);
    let ca = g.sub(a, mean_a);
    let sum_b = g.sum_axis0(b);
    let mean_b = g.scale(sum_b, inv_n);
    let mean_b = g.broadcast_axis0(mean_b, n);
    let cb = g.sub(b, mean_b);
    let prod = g.mul(ca, cb);
    let cov = g.sum_axis0(prod);
    let sq_a = g.mul(ca, ca);
    let va = g.sum_axis0(sq_a);
    let sq_b = g.mul(cb, cb);
    let vb = g.sum_axis0(sq_b);
    let sa = g.sqrt(va);
    let sb = g.sqrt(vb);
    let sa = g.add_scalar(sa, RHO_EPS);
    let sb = g.add_scalar(sb, RHO_EPS);
    let denom = g.mul(sa, sb);
    let rho = g.div(cov, denom);
    Ok(g.mean_all(rho))
}

/// Surrogate/codec matching loss: mean-square output distance minus the
/// weighted batch correlation. `codec_out` carries no gradient.
pub fn loss_codec(
    g: &mut Graph,
    codec_out: Var,
    surrogate_out: Var,
    rho_weight: f64,
) -> Result<Var> {
    let d = g.sub(codec_out, surrogate_out);
    let sq = g.mul(d, d);
    let mse = g.mean_all(sq);
    let rho = pearson_rho(g, codec_out, surrogate_out)?;
    let neg = g.scale(rho, -rho_weight);
    Ok(g.add(mse, neg))
}

/// Compression total: rescaling total plus the weighted codec loss.
pub fn total_compression(
    g: &mut Graph,
    rescale_total: Var,
    codec_loss: Var,
    codec_weight: f64,
) -> Var {
    let c = g.scale(codec_loss, codec_weight);
    g.add(rescale_total, c)
}
