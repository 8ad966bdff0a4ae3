//! Spatial-temporal prior network: maps the downscaled 3-channel clip to a
//! per-location Gaussian-mixture field over the high-frequency lane.
//!
//! Six refinement stages, each: a temporal dense block for short-range
//! spatial-temporal features, a spatial aggregator (adaptive average pool to
//! 32x32 followed by a fully-connected projection to a 256-dim frame
//! descriptor), a frame-to-frame dot-product attention map (logits scaled by
//! 1/sqrt(desc)), and a 1x1x1 fusion of the attention-averaged features added
//! residually. A three-layer per-location perceptron head (1x1x1
//! convolutions) emits 3K values per high-frequency channel.

use crate::blocks::{
    build_dense_block, dense_block_forward, ConvSpec, DenseBlockParams, LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::gmm::{field_from_raw, MixtureField};
use crate::graph::{Graph, Var};
use crate::params::{conv_init, ParamId, ParamLeaves, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Initial log-variance emitted by the zero-initialized head bias.
pub const HEAD_LOGVAR_INIT: f64 = -4.0;

#[derive(Clone, Debug)]
pub struct PriorConfig {
    pub in_channels: usize,
    pub width: usize,
    pub stages: usize,
    pub growth: usize,
    pub mixtures: usize,
    pub hf_channels: usize,
    pub desc_dim: usize,
    pub pool: usize,
    pub head_hidden: usize,
}

impl PriorConfig {
    pub fn new(k: usize, mixtures: usize, width: usize, stages: usize, growth: usize) -> Self {
        PriorConfig {
            in_channels: 3,
            width,
            stages,
            growth,
            mixtures,
            hf_channels: 3 * k * k,
            desc_dim: 256,
            pool: 32,
            head_hidden: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearSpec {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub block: DenseBlockParams,
    pub fc: LinearSpec,
    pub fuse: ConvSpec,
}

#[derive(Clone, Debug)]
pub struct PriorParams {
    pub cfg: PriorConfig,
    pub stages: Vec<StageParams>,
    pub head: [ConvSpec; 3],
}

fn add_linear(
    store: &mut ParamStore,
    name: &str,
    out_dim: usize,
    in_dim: usize,
    rng: &mut Rng,
) -> LinearSpec {
    let std = 1.0 / (in_dim as f64).sqrt();
    let w = store.add(
        format!("{name}.w"),
        Tensor::from_fn(&[out_dim, in_dim], |_| rng.normal() * std),
    );
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
    LinearSpec { w, b }
}

fn add_conv1(
    store: &mut ParamStore,
    name: &str,
    cout: usize,
    cin: usize,
    rng: &mut Rng,
    zero: bool,
) -> ConvSpec {
    let shape = [cout, cin, 1, 1, 1];
    let w = if zero {
        Tensor::zeros(&shape)
    } else {
        conv_init(&shape, rng, 0.5)
    };
    let w = store.add(format!("{name}.w"), w);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    ConvSpec { w, b }
}

/// Register the prior network. The final head convolution is zero-initialized
/// with its log-variance bias slots set to [`HEAD_LOGVAR_INIT`], so the field
/// starts as uniform weights, zero means and small variance for any input.
pub fn build_prior(
    store: &mut ParamStore,
    prefix: &str,
    cfg: PriorConfig,
    rng: &mut Rng,
) -> PriorParams {
    let mut stages = Vec::with_capacity(cfg.stages);
    for i in 0..cfg.stages {
        let cin = if i == 0 { cfg.in_channels } else { cfg.width };
        let block = build_dense_block(
            store,
            &format!("{prefix}.s{i}.block"),
            cin,
            cfg.width,
            cfg.growth,
            true,
            rng,
            false,
        );
        let fc = add_linear(
            store,
            &format!("{prefix}.s{i}.desc"),
            cfg.desc_dim,
            cfg.width * cfg.pool * cfg.pool,
            rng,
        );
        let fuse = add_conv1(
            store,
            &format!("{prefix}.s{i}.fuse"),
            cfg.width,
            cfg.width,
            rng,
            false,
        );
        stages.push(StageParams { block, fc, fuse });
    }
    let h0 = add_conv1(
        store,
        &format!("{prefix}.head0"),
        cfg.head_hidden,
        cfg.width,
        rng,
        false,
    );
    let h1 = add_conv1(
        store,
        &format!("{prefix}.head1"),
        cfg.head_hidden,
        cfg.head_hidden,
        rng,
        false,
    );
    let out_ch = cfg.hf_channels * 3 * cfg.mixtures;
    let h2 = add_conv1(
        store,
        &format!("{prefix}.head2"),
        out_ch,
        cfg.head_hidden,
        rng,
        true,
    );
    // log-variance slots of the zero head start at HEAD_LOGVAR_INIT
    let bias = store.get_mut(h2.b);
    for ch in 0..cfg.hf_channels {
        for kk in 0..cfg.mixtures {
            bias.data_mut()[ch * 3 * cfg.mixtures + 2 * cfg.mixtures + kk] = HEAD_LOGVAR_INIT;
        }
    }
    PriorParams {
        cfg,
        stages,
        head: [h0, h1, h2],
    }
}

/// Forward pass returning the mixture field and (for inspection) the
/// per-stage attention maps `(B, T, T)`.
pub fn prior_forward_with_attention(
    g: &mut Graph,
    x_l: Var,
    p: &PriorParams,
    leaves: &ParamLeaves,
) -> Result<(MixtureField, Vec<Tensor>)> {
    let [b, t, c, h, w] = g.value(x_l).dims5()?;
    if c != p.cfg.in_channels {
        return Err(Error::dim(format!(
            "prior network expects {} input channels, got {c}",
            p.cfg.in_channels
        )));
    }
    let mut attns = Vec::with_capacity(p.stages.len());
    let mut feat = x_l;
    for stage in &p.stages {
        feat = dense_block_forward(g, feat, &stage.block, leaves)?;
        let cw = p.cfg.width;
        let pooled = g.adaptive_pool(feat, p.cfg.pool, p.cfg.pool)?;
        let flat = g.reshape(pooled, &[b * t, cw * p.cfg.pool * p.cfg.pool]);
        let desc = g.linear(flat, leaves.var(stage.fc.w), leaves.var(stage.fc.b))?;
        let desc = g.reshape(desc, &[b, t, p.cfg.desc_dim]);
        let raw = g.bmm_nt(desc, desc)?;
        let scaled = g.scale(raw, 1.0 / (p.cfg.desc_dim as f64).sqrt());
        let attn = g.softmax_last(scaled);
        attns.push(g.value(attn).clone());
        let flat_feat = g.reshape(feat, &[b, t, cw * h * w]);
        let mixed = g.bmm_nn(attn, flat_feat)?;
        let mixed = g.reshape(mixed, &[b, t, cw, h, w]);
        let fused = g.conv3d(mixed, leaves.var(stage.fuse.w), leaves.var(stage.fuse.b))?;
        feat = g.add(feat, fused);
    }
    let h0 = g.conv3d(feat, leaves.var(p.head[0].w), leaves.var(p.head[0].b))?;
    let h0 = g.leaky_relu(h0, LEAKY_SLOPE);
    let h1 = g.conv3d(h0, leaves.var(p.head[1].w), leaves.var(p.head[1].b))?;
    let h1 = g.leaky_relu(h1, LEAKY_SLOPE);
    let out = g.conv3d(h1, leaves.var(p.head[2].w), leaves.var(p.head[2].b))?;
    let wl = g.split_mixture_params(out, p.cfg.hf_channels, p.cfg.mixtures, 0)?;
    let mu = g.split_mixture_params(out, p.cfg.hf_channels, p.cfg.mixtures, 1)?;
    let lv = g.split_mixture_params(out, p.cfg.hf_channels, p.cfg.mixtures, 2)?;
    let field = field_from_raw(g, wl, mu, lv)?;
    Ok((field, attns))
}

/// Forward pass: downscaled clip in, mixture field out.
pub fn prior_forward(
    g: &mut Graph,
    x_l: Var,
    p: &PriorParams,
    leaves: &ParamLeaves,
) -> Result<MixtureField> {
    prior_forward_with_attention(g, x_l, p, leaves).map(|(f, _)| f)
}

/// Zero the off-center taps of every temporal convolution so the network
/// becomes frame-local (attention remains the only cross-frame path).
pub fn disable_temporal_taps(store: &mut ParamStore, p: &PriorParams) {
    for stage in &p.stages {
        let spec = &stage.block.stages[3];
        let name = store.name(spec.w).to_string();
        let id = store.lookup(&name).unwrap();
        let t = store.get_mut(id);
        let shape = t.shape().to_vec();
        let (cout, cin, kt) = (shape[0], shape[1], shape[2]);
        assert_eq!(kt, 3, "expected temporal kernel");
        for co in 0..cout {
            for ci in 0..cin {
                for dt in [0usize, 2] {
                    t.data_mut()[(co * cin + ci) * 3 + dt] = 0.0;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmm;

    fn tiny_cfg() -> PriorConfig {
        PriorConfig {
            in_channels: 3,
            width: 6,
            stages: 2,
            growth: 4,
            mixtures: 3,
            hf_channels: 12,
            desc_dim: 16,
            pool: 4,
            head_hidden: 8,
        }
    }

    #[test]
    fn weights_sum_to_one_everywhere() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(41);
        let p = build_prior(&mut store, "p", tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x = g.leaf(Tensor::from_fn(&[2, 3, 3, 6, 6], |_| rng.uniform()));
        let field = prior_forward(&mut g, x, &p, &leaves).unwrap();
        let w = g.value(field.weights);
        let k = field.mixtures;
        for loc in 0..w.len() / k {
            let s: f64 = w.data()[loc * k..(loc + 1) * k].iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "loc {loc} sum {s}");
        }
        assert_eq!(g.shape(field.means), &[2, 3, 12, 6, 6, 3]);
    }

    #[test]
    fn zero_head_emits_uniform_small_variance_field() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(43);
        let p = build_prior(&mut store, "p", tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x = g.leaf(Tensor::from_fn(&[1, 2, 3, 4, 4], |_| rng.uniform()));
        let field = prior_forward(&mut g, x, &p, &leaves).unwrap();
        let k = field.mixtures as f64;
        for &w in g.value(field.weights).data() {
            assert!((w - 1.0 / k).abs() < 1e-12);
        }
        for &m in g.value(field.means).data() {
            assert_eq!(m, 0.0);
        }
        for &v in g.value(field.logvars).data() {
            assert_eq!(v, HEAD_LOGVAR_INIT);
        }
    }

    #[test]
    fn attention_rows_are_normalized() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(45);
        let p = build_prior(&mut store, "p", tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x = g.leaf(Tensor::from_fn(&[2, 4, 3, 6, 6], |_| rng.uniform()));
        let (_, attns) = prior_forward_with_attention(&mut g, x, &p, &leaves).unwrap();
        assert_eq!(attns.len(), 2);
        for a in &attns {
            assert_eq!(a.shape(), &[2, 4, 4]);
            for row in a.data().chunks(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "attention row sums to {s}");
            }
        }
    }

    #[test]
    fn single_frame_attention_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(47);
        let p = build_prior(&mut store, "p", tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x = g.leaf(Tensor::from_fn(&[1, 1, 3, 4, 4], |_| rng.uniform()));
        let (_, attns) = prior_forward_with_attention(&mut g, x, &p, &leaves).unwrap();
        for a in &attns {
            assert_eq!(a.shape(), &[1, 1, 1]);
            assert!((a.data()[0] - 1.0).abs() < 1e-12);
        }
    }

    fn permute_frames(t: &Tensor, perm: &[usize]) -> Tensor {
        let shape = t.shape().to_vec();
        let bt = shape[1];
        assert_eq!(perm.len(), bt);
        let inner: usize = shape[2..].iter().product();
        let b = shape[0];
        let mut out = Tensor::zeros(&shape);
        for bi in 0..b {
            for ti in 0..bt {
                let src = &t.data()[(bi * bt + perm[ti]) * inner..][..inner];
                out.data_mut()[(bi * bt + ti) * inner..][..inner].copy_from_slice(src);
            }
        }
        out
    }

    #[test]
    fn frame_permutation_commutes_when_temporal_taps_disabled() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(53);
        let p = build_prior(&mut store, "p", tiny_cfg(), &mut rng);
        disable_temporal_taps(&mut store, &p);
        let x0 = Tensor::from_fn(&[1, 3, 3, 4, 4], |_| rng.uniform());
        let perm = [2usize, 0, 1];
        let xp = permute_frames(&x0, &perm);

        let run = |input: Tensor, store: &ParamStore, p: &PriorParams| {
            let mut g = Graph::new();
            let leaves = store.leaves(&mut g);
            let x = g.leaf(input);
            let f = prior_forward(&mut g, x, p, &leaves).unwrap();
            (
                g.value(f.means).clone(),
                g.value(f.logvars).clone(),
                g.value(f.weights).clone(),
            )
        };
        let (m0, v0, w0) = run(x0, &store, &p);
        let (mp, vp, wp) = run(xp, &store, &p);
        assert!(permute_frames(&m0, &perm).max_abs_diff(&mp) < 1e-10);
        assert!(permute_frames(&v0, &perm).max_abs_diff(&vp) < 1e-10);
        assert!(permute_frames(&w0, &perm).max_abs_diff(&wp) < 1e-10);
    }

    #[test]
    fn prior_log_prob_gradient_reaches_input() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(59);
        let mut cfg = tiny_cfg();
        cfg.stages = 1;
        let p = build_prior(&mut store, "p", cfg, &mut rng);
        // non-zero head so gradients flow through all field parameters
        let id = store.lookup("p.head2.w").unwrap();
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::from_fn(&shape, |_| rng.normal() * 0.05));
        let x0 = Tensor::from_fn(&[1, 2, 3, 4, 4], |_| rng.uniform());
        let target = Tensor::from_fn(&[1, 2, 12, 4, 4], |_| rng.normal() * 0.1);
        let rel = crate::gradcheck::check_input_gradient(&[x0], 0, 1e-5, move |g, vars| {
            let leaves = store.leaves(g);
            let field = prior_forward(g, vars[0], &p, &leaves).unwrap();
            let tv = g.leaf(target.clone());
            gmm::log_prob_sum(g, &field, tv).unwrap()
        });
        assert!(rel < 1e-4, "rel err {rel}");
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(61);
        let p = build_prior(&mut store, "p", tiny_cfg(), &mut rng);
        let mut g = Graph::new();
        let leaves = store.leaves(&mut g);
        let x = g.leaf(Tensor::zeros(&[1, 1, 4, 4, 4]));
        assert!(prior_forward(&mut g, x, &p, &leaves).is_err());
    }
}
