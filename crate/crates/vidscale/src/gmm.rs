//! Per-location Gaussian mixture fields: density evaluation and
//! reparameterized sampling.
//!
//! The component density is
//! `p(f | mu, e^v) = exp(-(f-mu)^2 / e^v) / (sqrt(pi) * sqrt(e^v))`,
//! a normalized Gaussian whose *effective* standard deviation is
//! `sqrt(e^v / 2)`; the sampler uses exactly that scale so samples and
//! densities agree.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Log-variance parameters are clamped to this symmetric range before use.
pub const LOGVAR_CLAMP: f64 = 10.0;

const LN_SQRT_PI: f64 = 0.572364942924700087071713675677; // ln(sqrt(pi))

/// A dense field of K-component mixtures over `(B, T, C, H, W)` locations.
/// `weights` live on the probability simplex over the trailing component
/// axis; `log_weights` is the matching log-softmax (kept separately so the
/// log-density never takes `ln` of an underflowed weight).
#[derive(Copy, Clone, Debug)]
pub struct MixtureField {
    pub weights: Var,
    pub log_weights: Var,
    pub means: Var,
    pub logvars: Var,
    pub mixtures: usize,
}

/// Assemble a field from raw head outputs: weight logits are soft-maxed, raw
/// log-variances clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub fn field_from_raw(
    g: &mut Graph,
    weight_logits: Var,
    means: Var,
    logvars_raw: Var,
) -> Result<MixtureField> {
    let shape = g.shape(weight_logits).to_vec();
    if g.shape(means) != shape || g.shape(logvars_raw) != shape {
        return Err(Error::dim(format!(
            "mixture parameter shapes disagree: {:?} / {:?} / {:?}",
            shape,
            g.shape(means),
            g.shape(logvars_raw)
        )));
    }
    let mixtures = *shape.last().ok_or_else(|| Error::dim("empty field"))?;
    let weights = g.softmax_last(weight_logits);
    let log_weights = g.log_softmax_last(weight_logits);
    let logvars = g.clamp(logvars_raw, -LOGVAR_CLAMP, LOGVAR_CLAMP);
    Ok(MixtureField {
        weights,
        log_weights,
        means,
        logvars,
        mixtures,
    })
}

/// Total log-density of `target` under the field, summed over the batch and
/// every spatial-temporal-channel location:
/// `sum_o log sum_k w_o^k p(target(o) | mu_o^k, e^{v_o^k})`,
/// evaluated with log-sum-exp stabilization.
pub fn log_prob_sum(g: &mut Graph, field: &MixtureField, target: Var) -> Result<Var> {
    let k = field.mixtures;
    let want: Vec<usize> = g.shape(field.means)[..g.shape(field.means).len() - 1].to_vec();
    if g.shape(target) != want.as_slice() {
        return Err(Error::dim(format!(
            "target shape {:?} does not match field locations {:?}",
            g.shape(target),
            want
        )));
    }
    let f = g.broadcast_last(target, k);
    let diff = g.sub(f, field.means);
    let sq = g.mul(diff, diff);
    let neg_lv = g.neg(field.logvars);
    let inv_var = g.exp(neg_lv);
    let quad = g.mul(sq, inv_var);
    let half_lv = g.scale(field.logvars, 0.5);
    let spread = g.add(half_lv, quad);
    let spread = g.add_scalar(spread, LN_SQRT_PI);
    let log_pg = g.neg(spread);
    let joint = g.add(field.log_weights, log_pg);
    let per_loc = g.logsumexp_last(joint);
    Ok(g.sum_all(per_loc))
}

/// Reparameterized sample per location. `uniforms` select the component by
/// inverse CDF on the weights (no gradient through selection); `noise`
/// provides the standard-normal draws. Gradients flow to the selected
/// component's mean and log-variance.
pub fn sample(g: &mut Graph, field: &MixtureField, uniforms: &Tensor, noise: &Tensor) -> Var {
    let weights = g.value(field.weights).clone();
    g.sample_mixture(&weights, field.means, field.logvars, uniforms, noise)
}

/// Scalar mixture density at `f` (plain math; used by samplers' callers and
/// as the reference form for documentation and tests).
pub fn mixture_density(weights: &[f64], means: &[f64], logvars: &[f64], f: f64) -> f64 {
    let mut acc = 0.0;
    for ((&w, &mu), &lv) in weights.iter().zip(means).zip(logvars) {
        let var = lv.exp();
        let sigma = var.sqrt();
        acc += w * (-(f - mu) * (f - mu) / var).exp() / (std::f64::consts::PI.sqrt() * sigma);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::rng::Rng;

    fn scalar_field(
        g: &mut Graph,
        k: usize,
        logits: Vec<f64>,
        mu: Vec<f64>,
        lv: Vec<f64>,
    ) -> MixtureField {
        let shape = [1, 1, 1, 1, 1, k];
        let wl = g.leaf(Tensor::from_vec(&shape, logits).unwrap());
        let m = g.leaf(Tensor::from_vec(&shape, mu).unwrap());
        let v = g.leaf(Tensor::from_vec(&shape, lv).unwrap());
        field_from_raw(g, wl, m, v).unwrap()
    }

    #[test]
    fn single_component_log_density_at_mean() {
        // K=1, w=1, mu=0, v=0, f=0 -> -ln(sqrt(pi))
        let mut g = Graph::new();
        let field = scalar_field(&mut g, 1, vec![0.0], vec![0.0], vec![0.0]);
        let f = g.leaf(Tensor::zeros(&[1, 1, 1, 1, 1]));
        let lp = log_prob_sum(&mut g, &field, f).unwrap();
        assert!((g.value(lp).item() - (-0.5723649429)).abs() < 1e-8);
    }

    #[test]
    fn identical_components_collapse_to_single() {
        let mut g = Graph::new();
        let two = scalar_field(&mut g, 2, vec![0.3, 0.3], vec![0.4, 0.4], vec![-0.5, -0.5]);
        let one = scalar_field(&mut g, 1, vec![0.0], vec![0.4], vec![-0.5]);
        let f = g.leaf(Tensor::full(&[1, 1, 1, 1, 1], 0.9));
        let lp2 = log_prob_sum(&mut g, &two, f).unwrap();
        let lp1 = log_prob_sum(&mut g, &one, f).unwrap();
        assert!((g.value(lp2).item() - g.value(lp1).item()).abs() < 1e-12);
    }

    #[test]
    fn weights_live_on_simplex() {
        let mut rng = Rng::new(17);
        let mut g = Graph::new();
        let shape = [1, 2, 3, 2, 2, 5];
        let wl = g.leaf(Tensor::from_fn(&shape, |_| rng.normal() * 3.0));
        let m = g.leaf(Tensor::zeros(&shape));
        let v = g.leaf(Tensor::zeros(&shape));
        let field = field_from_raw(&mut g, wl, m, v).unwrap();
        let w = g.value(field.weights);
        for loc in 0..w.len() / 5 {
            let row = &w.data()[loc * 5..(loc + 1) * 5];
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    /// Trapezoid-rule quadrature of the per-location density (independent of
    /// the log-density implementation).
    fn quadrature(weights: &[f64], means: &[f64], logvars: &[f64]) -> f64 {
        let (a, b, n) = (-20.0, 20.0, 40_000usize);
        let h = (b - a) / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let f = a + i as f64 * h;
            let d = mixture_density(weights, means, logvars, f);
            acc += if i == 0 || i == n { 0.5 * d } else { d };
        }
        acc * h
    }

    #[test]
    fn density_normalizes_to_one() {
        let mut rng = Rng::new(23);
        for _ in 0..50 {
            let k = 5;
            let logits: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let weights: Vec<f64> = logits.iter().map(|l| (l - mx).exp() / z).collect();
            let means: Vec<f64> = (0..k).map(|_| rng.normal() * 3.0).collect();
            let logvars: Vec<f64> = (0..k).map(|_| rng.uniform() * 4.0 - 2.0).collect();
            let integral = quadrature(&weights, &means, &logvars);
            assert!(
                (integral - 1.0).abs() < 1e-4,
                "integral {integral} for w {weights:?}"
            );
        }
    }

    #[test]
    fn log_density_decreases_away_from_single_mean() {
        let mut prev = f64::INFINITY;
        for step in 0..6 {
            let mut g = Graph::new();
            let field = scalar_field(&mut g, 1, vec![0.0], vec![0.2], vec![0.3]);
            let f = g.leaf(Tensor::full(&[1, 1, 1, 1, 1], 0.2 + 0.3 * step as f64));
            let lp = log_prob_sum(&mut g, &field, f).unwrap();
            let v = g.value(lp).item();
            assert!(v < prev || step == 0, "not strictly decreasing at {step}");
            prev = v;
        }
    }

    #[test]
    fn log_prob_gradients_match_central_differences() {
        let mut rng = Rng::new(29);
        let shape = [1, 1, 2, 2, 2, 3];
        let logits = Tensor::from_fn(&shape, |_| rng.normal());
        let means = Tensor::from_fn(&shape, |_| rng.normal() * 0.5);
        let logvars = Tensor::from_fn(&shape, |_| rng.normal() * 0.5);
        let target = Tensor::from_fn(&[1, 1, 2, 2, 2], |_| rng.normal() * 0.7);
        for wrt in 0..4 {
            let tgt = target.clone();
            let rel = check_input_gradient(
                &[logits.clone(), means.clone(), logvars.clone(), tgt],
                wrt,
                1e-5,
                |g, vars| {
                    let field = field_from_raw(g, vars[0], vars[1], vars[2]).unwrap();
                    log_prob_sum(g, &field, vars[3]).unwrap()
                },
            );
            assert!(rel < 1e-6, "wrt {wrt} rel {rel}");
        }
    }

    #[test]
    fn sample_variance_matches_density_convention() {
        // K=1, v=0 -> Var = e^0 / 2 = 0.5, within 2% over 1e5 draws
        let n = 100_000;
        let mut g = Graph::new();
        let shape = [1, 1, 1, 1, n, 1];
        let wl = g.leaf(Tensor::zeros(&shape));
        let m = g.leaf(Tensor::zeros(&shape));
        let v = g.leaf(Tensor::zeros(&shape));
        let field = field_from_raw(&mut g, wl, m, v).unwrap();
        let mut rng = Rng::new(31);
        let mut eps = Tensor::zeros(&[1, 1, 1, 1, n]);
        rng.fill_normal(eps.data_mut(), 1.0);
        let mut u = Tensor::zeros(&[1, 1, 1, 1, n]);
        rng.fill_uniform(u.data_mut());
        let s = sample(&mut g, &field, &u, &eps);
        let data = g.value(s).data();
        let mean: f64 = data.iter().sum::<f64>() / n as f64;
        let var: f64 = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!((var - 0.5).abs() < 0.01, "sample variance {var}");
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let field = scalar_field(&mut g, 2, vec![0.0; 2], vec![0.0; 2], vec![0.0; 2]);
        let bad = g.leaf(Tensor::zeros(&[1, 1, 1, 1, 2]));
        assert!(log_prob_sum(&mut g, &field, bad).is_err());
    }
}
