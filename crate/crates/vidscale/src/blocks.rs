//! Dense convolutional blocks and invertible coupling blocks.
//!
//! A dense block is 4 convolution stages of growth width `g` with
//! concatenative connectivity and Leaky-ReLU (slope 0.2), closed by a 1x1x1
//! fusion convolution back to the output width; the input is added back when
//! input and output widths match. The temporal variant replaces the last
//! stage's spatial 1x3x3 kernel with a 3x1x1 temporal kernel.
//!
//! A coupling block splits channels into `(s1, s2)` lanes and applies an
//! additive update to lane 1 followed by an exponential-scale and shift
//! update to lane 2; it is exactly invertible by construction.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{conv_init, ParamId, ParamLeaves, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_GROWTH: usize = 16;

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DenseBlockParams {
    pub stages: Vec<ConvSpec>,
    pub fusion: ConvSpec,
    pub cin: usize,
    pub cout: usize,
    pub growth: usize,
    pub temporal: bool,
}

fn add_conv(
    store: &mut ParamStore,
    name: String,
    cout: usize,
    cin: usize,
    kernel: (usize, usize, usize),
    rng: &mut Rng,
    zero: bool,
) -> ConvSpec {
    let (kt, kh, kw) = kernel;
    let shape = [cout, cin, kt, kh, kw];
    let w = if zero {
        Tensor::zeros(&shape)
    } else {
        conv_init(&shape, rng, 0.5)
    };
    let w = store.add(format!("{name}.w"), w);
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
    ConvSpec { w, b }
}

/// Register a dense block's parameters. `zero_fusion` zero-initializes the
/// final fusion convolution so the block starts as the identity (matching
/// widths) or the zero map.
pub fn build_dense_block(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    growth: usize,
    temporal: bool,
    rng: &mut Rng,
    zero_fusion: bool,
) -> DenseBlockParams {
    let mut stages = Vec::with_capacity(4);
    for s in 0..4 {
        let in_ch = cin + s * growth;
        let kernel = if temporal && s == 3 {
            (3, 1, 1)
        } else {
            (1, 3, 3)
        };
        stages.push(add_conv(
            store,
            format!("{prefix}.stage{s}"),
            growth,
            in_ch,
            kernel,
            rng,
            false,
        ));
    }
    let fusion = add_conv(
        store,
        format!("{prefix}.fusion"),
        cout,
        cin + 4 * growth,
        (1, 1, 1),
        rng,
        zero_fusion,
    );
    DenseBlockParams {
        stages,
        fusion,
        cin,
        cout,
        growth,
        temporal,
    }
}

/// Forward pass of a dense block.
pub fn dense_block_forward(
    g: &mut Graph,
    x: Var,
    p: &DenseBlockParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    let [_, _, c, _, _] = g.value(x).dims5()?;
    if c != p.cin {
        return Err(Error::dim(format!(
            "dense block expects {} input channels, got {c}",
            p.cin
        )));
    }
    let mut feats = vec![x];
    for stage in &p.stages {
        let inp = if feats.len() == 1 {
            feats[0]
        } else {
            g.concat_channels(&feats)?
        };
        let conv = g.conv3d(inp, leaves.var(stage.w), leaves.var(stage.b))?;
        let act = g.leaky_relu(conv, LEAKY_SLOPE);
        feats.push(act);
    }
    let all = g.concat_channels(&feats)?;
    let fused = g.conv3d(all, leaves.var(p.fusion.w), leaves.var(p.fusion.b))?;
    if p.cin == p.cout {
        Ok(g.add(fused, x))
    } else {
        Ok(fused)
    }
}

#[derive(Clone, Debug)]
pub struct CouplingParams {
    /// s2 -> s1, added to lane 1.
    pub cross: DenseBlockParams,
    /// s1 -> s2, exponentiated multiplier on lane 2.
    pub scale_net: DenseBlockParams,
    /// s1 -> s2, added to lane 2.
    pub shift_net: DenseBlockParams,
    pub split: (usize, usize),
}

/// Register a coupling block. All three subnetworks get zero fusion layers so
/// the block starts as the identity map.
pub fn build_coupling(
    store: &mut ParamStore,
    prefix: &str,
    s1: usize,
    s2: usize,
    growth: usize,
    temporal: bool,
    rng: &mut Rng,
) -> CouplingParams {
    let cross = build_dense_block(
        store,
        &format!("{prefix}.cross"),
        s2,
        s1,
        growth,
        temporal,
        rng,
        true,
    );
    let scale_net = build_dense_block(
        store,
        &format!("{prefix}.scale"),
        s1,
        s2,
        growth,
        temporal,
        rng,
        true,
    );
    let shift_net = build_dense_block(
        store,
        &format!("{prefix}.shift"),
        s1,
        s2,
        growth,
        temporal,
        rng,
        true,
    );
    CouplingParams {
        cross,
        scale_net,
        shift_net,
        split: (s1, s2),
    }
}

fn check_split(g: &Graph, x: Var, p: &CouplingParams) -> Result<()> {
    let [_, _, c, _, _] = g.value(x).dims5()?;
    let (s1, s2) = p.split;
    if c != s1 + s2 {
        return Err(Error::dim(format!(
            "coupling expects {} channels ({s1}+{s2}), got {c}",
            s1 + s2
        )));
    }
    Ok(())
}

/// y1 = x1 + cross(x2); y2 = x2 * exp(scale(y1)) + shift(y1)
pub fn coupling_forward(
    g: &mut Graph,
    x: Var,
    p: &CouplingParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    check_split(g, x, p)?;
    let (s1, s2) = p.split;
    let x1 = g.select_channels(x, 0, s1)?;
    let x2 = g.select_channels(x, s1, s1 + s2)?;
    let add1 = dense_block_forward(g, x2, &p.cross, leaves)?;
    let y1 = g.add(x1, add1);
    let logscale = dense_block_forward(g, y1, &p.scale_net, leaves)?;
    let scale = g.exp(logscale);
    let shift = dense_block_forward(g, y1, &p.shift_net, leaves)?;
    let scaled = g.mul(x2, scale);
    let y2 = g.add(scaled, shift);
    g.concat_channels(&[y1, y2])
}

/// Exact inverse of [`coupling_forward`].
pub fn coupling_inverse(
    g: &mut Graph,
    y: Var,
    p: &CouplingParams,
    leaves: &ParamLeaves,
) -> Result<Var> {
    check_split(g, y, p)?;
    let (s1, s2) = p.split;
    let y1 = g.select_channels(y, 0, s1)?;
    let y2 = g.select_channels(y, s1, s1 + s2)?;
    let shift = dense_block_forward(g, y1, &p.shift_net, leaves)?;
    let logscale = dense_block_forward(g, y1, &p.scale_net, leaves)?;
    let neg = g.neg(logscale);
    let inv_scale = g.exp(neg);
    let detached = g.sub(y2, shift);
    let x2 = g.mul(detached, inv_scale);
    let add1 = dense_block_forward(g, x2, &p.cross, leaves)?;
    let x1 = g.sub(y1, add1);
    g.concat_channels(&[x1, x2])
}

/// Scatter fresh N(0, std^2) values into every parameter of a dense block,
/// including the fusion layer. Used by tests that need fully random blocks.
pub fn randomize_dense_block(
    store: &mut ParamStore,
    p: &DenseBlockParams,
    rng: &mut Rng,
    std: f64,
) {
    for spec in p.stages.iter().chain(std::iter::once(&p.fusion)) {
        for id in [spec.w, spec.b] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::from_fn(&shape, |_| rng.normal() * std));
        }
    }
}

pub fn randomize_coupling(store: &mut ParamStore, p: &CouplingParams, rng: &mut Rng, std: f64) {
    randomize_dense_block(store, &p.cross, rng, std);
    randomize_dense_block(store, &p.scale_net, rng, std);
    randomize_dense_block(store, &p.shift_net, rng, std);
}
