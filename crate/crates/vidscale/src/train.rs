//! Optimization loops for the rescaling and compression tasks, evaluation
//! protocols, and bit-exact checkpointing.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::codec::{self, CodecConfig, CodecKind, CodecMode};
use crate::data::{self, AugmentConfig};
use crate::error::{Error, Result};
use crate::freq::{analyze, synthesize, TransformKind};
use crate::gmm;
use crate::graph::Graph;
use crate::loss::{self, LossWeights, RescaleParts};
use crate::metrics::{self, Channel, RdCurve, RdPoint};
use crate::model::{Model, ModelConfig};
use crate::params::{Adam, ParamId, ParamLeaves};
use crate::prior::prior_forward;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Task {
    Rescale,
    Compress,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub task: Task,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr: f64,
    pub total_iters: u64,
    /// 0 derives total_iters / 4 (the transplanted halving schedule).
    pub lr_halving_period: u64,
    pub weights: LossWeights,
    pub seed: u64,
    pub clip_length: usize,
    pub crop: usize,
    pub codec_kind: CodecKind,
    pub codec_mode: CodecMode,
    pub qp_set: Vec<u8>,
    pub eval_draws: usize,
    pub data_manifest: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Rescale,
            model: ModelConfig::default(),
            batch_size: 8,
            lr: 1e-4,
            total_iters: 2000,
            lr_halving_period: 0,
            weights: LossWeights::rescale_defaults(2),
            seed: 0,
            clip_length: 7,
            crop: 64,
            codec_kind: CodecKind::Mock,
            codec_mode: CodecMode::Zerolatency,
            qp_set: codec::TRAIN_QP_SET.to_vec(),
            eval_draws: 5,
            data_manifest: None,
        }
    }
}

impl TrainConfig {
    pub fn halving_period(&self) -> u64 {
        if self.lr_halving_period > 0 {
            self.lr_halving_period
        } else {
            (self.total_iters / 4).max(1)
        }
    }

    pub fn lr_at(&self, iter: u64) -> f64 {
        self.lr / 2f64.powi((iter / self.halving_period()) as i32)
    }

    pub fn codec_config(&self, quality: u8) -> CodecConfig {
        CodecConfig {
            kind: self.codec_kind,
            mode: self.codec_mode,
            quality,
            lossless: false,
            fps: 50,
            preset: "veryfast".into(),
        }
    }

    /// Parse a flat `key = value` config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = TrainConfig::default();
        let mut saw_task = false;
        let mut explicit: Vec<(String, String)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected key = value",
                    path.display(),
                    ln + 1
                ))
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if k == "task" {
                saw_task = true;
            }
            explicit.push((k, v));
        }
        // apply task first so task-dependent defaults land before overrides
        if saw_task {
            for (k, v) in &explicit {
                if k == "task" {
                    cfg.apply_override(k, v)?;
                }
            }
        }
        for (k, v) in &explicit {
            if k != "task" {
                cfg.apply_override(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Apply one `key=value` override.
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value for {key}: {what}"));
        let parse_u = |v: &str| v.parse::<u64>().map_err(|e| bad(&e.to_string()));
        let parse_us = |v: &str| v.parse::<usize>().map_err(|e| bad(&e.to_string()));
        let parse_f = |v: &str| v.parse::<f64>().map_err(|e| bad(&e.to_string()));
        match key {
            "task" => {
                self.task = match value {
                    "rescale" => Task::Rescale,
                    "compress" => Task::Compress,
                    other => return Err(bad(other)),
                };
                // task-dependent defaults
                match self.task {
                    Task::Rescale => {
                        self.clip_length = 7;
                        self.weights = LossWeights::rescale_defaults(self.model.k);
                        self.model.with_surrogate = false;
                    }
                    Task::Compress => {
                        self.clip_length = 3;
                        self.weights = LossWeights::compress_defaults(self.model.k);
                        self.model.with_surrogate = true;
                    }
                }
            }
            "k" => {
                self.model.k = parse_us(value)?;
                self.weights.k = self.model.k;
            }
            "transform" => {
                self.model.transform_kind = match value {
                    "invertible" => TransformKind::Invertible,
                    "plain" => TransformKind::Plain,
                    other => return Err(bad(other)),
                };
            }
            "blocks" => self.model.transform_blocks = parse_us(value)?,
            "growth" => self.model.growth = parse_us(value)?,
            "mixtures" => self.model.mixtures = parse_us(value)?,
            "prior_width" => self.model.prior_width = parse_us(value)?,
            "prior_stages" => self.model.prior_stages = parse_us(value)?,
            "surrogate_blocks" => self.model.surrogate_blocks = parse_us(value)?,
            "batch_size" => self.batch_size = parse_us(value)?,
            "lr" => self.lr = parse_f(value)?,
            "total_iters" => self.total_iters = parse_u(value)?,
            "lr_halving_period" => self.lr_halving_period = parse_u(value)?,
            "lambda1" => self.weights.conditional = parse_f(value)?,
            "lambda2" => self.weights.mimic = parse_f(value)?,
            "lambda3" => self.weights.penalize = parse_f(value)?,
            "lambda4" => self.weights.recons = parse_f(value)?,
            "lambda_rho" => self.weights.rho = parse_f(value)?,
            "lambda_codec" => self.weights.codec = parse_f(value)?,
            "seed" => {
                self.seed = parse_u(value)?;
                self.model.init_seed = self.seed;
            }
            "clip_length" => self.clip_length = parse_us(value)?,
            "crop" => self.crop = parse_us(value)?,
            "codec" => {
                self.codec_kind = match value {
                    "mock" => CodecKind::Mock,
                    "hevc" => CodecKind::Hevc,
                    "avc" => CodecKind::Avc,
                    other => return Err(bad(other)),
                };
            }
            "codec_mode" => {
                self.codec_mode = match value {
                    "default" => CodecMode::Default,
                    "zerolatency" => CodecMode::Zerolatency,
                    other => return Err(bad(other)),
                };
            }
            "qp_set" => {
                let qs: std::result::Result<Vec<u8>, _> =
                    value.split(',').map(|s| s.trim().parse::<u8>()).collect();
                self.qp_set = qs.map_err(|e| bad(&e.to_string()))?;
                if self.qp_set.is_empty() {
                    return Err(bad("empty qp set"));
                }
            }
            "eval_draws" => self.eval_draws = parse_us(value)?,
            "data_manifest" => self.data_manifest = Some(PathBuf::from(value)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Render the config in the same flat format `from_file` reads.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let task = match self.task {
            Task::Rescale => "rescale",
            Task::Compress => "compress",
        };
        let kind = match self.model.transform_kind {
            TransformKind::Invertible => "invertible",
            TransformKind::Plain => "plain",
        };
        let codec = match self.codec_kind {
            CodecKind::Mock => "mock",
            CodecKind::Hevc => "hevc",
            CodecKind::Avc => "avc",
        };
        let mode = match self.codec_mode {
            CodecMode::Default => "default",
            CodecMode::Zerolatency => "zerolatency",
        };
        let _ = writeln!(s, "task = {task}");
        let _ = writeln!(s, "k = {}", self.model.k);
        let _ = writeln!(s, "transform = {kind}");
        let _ = writeln!(s, "blocks = {}", self.model.transform_blocks);
        let _ = writeln!(s, "growth = {}", self.model.growth);
        let _ = writeln!(s, "mixtures = {}", self.model.mixtures);
        let _ = writeln!(s, "prior_width = {}", self.model.prior_width);
        let _ = writeln!(s, "prior_stages = {}", self.model.prior_stages);
        let _ = writeln!(s, "surrogate_blocks = {}", self.model.surrogate_blocks);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "total_iters = {}", self.total_iters);
        let _ = writeln!(s, "lr_halving_period = {}", self.lr_halving_period);
        let _ = writeln!(s, "lambda1 = {}", self.weights.conditional);
        let _ = writeln!(s, "lambda2 = {}", self.weights.mimic);
        let _ = writeln!(s, "lambda3 = {}", self.weights.penalize);
        let _ = writeln!(s, "lambda4 = {}", self.weights.recons);
        let _ = writeln!(s, "lambda_rho = {}", self.weights.rho);
        let _ = writeln!(s, "lambda_codec = {}", self.weights.codec);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "clip_length = {}", self.clip_length);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "codec = {codec}");
        let _ = writeln!(s, "codec_mode = {mode}");
        let qp: Vec<String> = self.qp_set.iter().map(|q| q.to_string()).collect();
        let _ = writeln!(s, "qp_set = {}", qp.join(","));
        let _ = writeln!(s, "eval_draws = {}", self.eval_draws);
        if let Some(m) = &self.data_manifest {
            let _ = writeln!(s, "data_manifest = {}", m.display());
        }
        s
    }
}

/// Loss values of one optimization step.
#[derive(Clone, Debug)]
pub struct StepStats {
    pub iter: u64,
    pub conditional: f64,
    pub mimic: f64,
    pub penalize: f64,
    pub recons: f64,
    pub codec: Option<f64>,
    pub total: f64,
}

impl StepStats {
    /// The pinned loss-log line: `iter\tL_c\tL_mimic\tL_pen\tL_recons\ttotal`.
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.iter, self.conditional, self.mimic, self.penalize, self.recons, self.total
        )
    }
}

fn ensure_finite(stats: &StepStats) -> Result<()> {
    let vals = [
        ("L_c", stats.conditional),
        ("L_mimic", stats.mimic),
        ("L_pen", stats.penalize),
        ("L_recons", stats.recons),
        ("L_codec", stats.codec.unwrap_or(0.0)),
        ("total", stats.total),
    ];
    if vals.iter().any(|(_, v)| !v.is_finite()) {
        let dump: Vec<String> = vals.iter().map(|(n, v)| format!("{n}={v}")).collect();
        return Err(Error::NonFinite(dump.join(" ")));
    }
    Ok(())
}

fn collect_grads(
    store_len: usize,
    leaves: &ParamLeaves,
    grads: &mut crate::graph::Gradients,
) -> Vec<Option<Tensor>> {
    (0..store_len)
        .map(|i| grads.take(leaves.var(ParamId(i))))
        .collect()
}

/// One rescaling forward/backward pass; returns loss values and parameter
/// gradients in store order (no update applied).
pub(crate) fn rescale_step_grads(
    model: &Model,
    batch: &Tensor,
    weights: &LossWeights,
    conditional_weight: f64,
    rng: &mut Rng,
    iter: u64,
) -> Result<(StepStats, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let leaves = model.store.leaves(&mut g);
    let x = g.leaf(batch.clone());
    let split = analyze(&mut g, x, &model.transform, &leaves)?;
    // the conditional loss is trained against the unquantized low lane
    let field = prior_forward(&mut g, split.low, &model.prior, &leaves)?;
    let l_cond = loss::loss_conditional(&mut g, &field, split.high)?;
    let loc_shape: Vec<usize> = g.shape(field.means)[..g.shape(field.means).len() - 1].to_vec();
    let mut noise = Tensor::zeros(&loc_shape);
    let mut uniforms = Tensor::zeros(&loc_shape);
    rng.fill_normal(noise.data_mut(), 1.0);
    rng.fill_uniform(uniforms.data_mut());
    let f_hat = gmm::sample(&mut g, &field, &uniforms, &noise);
    let x_l = g.quantize_ste(split.low);
    let x_hat = synthesize(&mut g, x_l, f_hat, &model.transform, &leaves)?;
    let l_recons = loss::loss_recons(&mut g, x, x_hat)?;
    let l_mimic = loss::loss_mimic(&mut g, x, split.low, weights.k)?;
    let l_pen = loss::loss_penalize(&mut g, x, &split, &model.transform, &leaves)?;
    let parts = RescaleParts {
        conditional: l_cond,
        mimic: l_mimic,
        penalize: l_pen,
        recons: l_recons,
    };
    let total = loss::total_rescale(&mut g, &parts, weights, conditional_weight);
    let stats = StepStats {
        iter,
        conditional: g.value(l_cond).item(),
        mimic: g.value(l_mimic).item(),
        penalize: g.value(l_pen).item(),
        recons: g.value(l_recons).item(),
        codec: None,
        total: g.value(total).item(),
    };
    ensure_finite(&stats)?;
    let mut grads = g.backward(total);
    let gvec = collect_grads(model.store.len(), &leaves, &mut grads);
    Ok((stats, gvec))
}

/// One compression forward/backward pass. The stored low-resolution clip
/// passes through the codec with the surrogate's Jacobian wired underneath;
/// the surrogate itself is trained only by the codec-matching loss (its
/// parameters appear in no other branch, and its input there is detached).
pub(crate) fn compress_step_grads(
    model: &Model,
    batch: &Tensor,
    weights: &LossWeights,
    conditional_weight: f64,
    codec_cfg: &CodecConfig,
    rng: &mut Rng,
    iter: u64,
) -> Result<(StepStats, Vec<Option<Tensor>>)> {
    let surrogate = model
        .surrogate
        .as_ref()
        .ok_or_else(|| Error::Config("compression training needs a surrogate".into()))?;
    let mut g = Graph::new();
    let leaves = model.store.leaves(&mut g);
    // independent leaf set for the surrogate's passthrough branch: its
    // gradients are discarded, so the reconstruction path cannot train phi
    let shadow = model.store.leaves(&mut g);
    let x = g.leaf(batch.clone());
    let split = analyze(&mut g, x, &model.transform, &leaves)?;
    let field = prior_forward(&mut g, split.low, &model.prior, &leaves)?;
    let l_cond = loss::loss_conditional(&mut g, &field, split.high)?;
    let loc_shape: Vec<usize> = g.shape(field.means)[..g.shape(field.means).len() - 1].to_vec();
    let mut noise = Tensor::zeros(&loc_shape);
    let mut uniforms = Tensor::zeros(&loc_shape);
    rng.fill_normal(noise.data_mut(), 1.0);
    rng.fill_uniform(uniforms.data_mut());
    let f_hat = gmm::sample(&mut g, &field, &uniforms, &noise);
    let x_l = g.quantize_ste(split.low);
    let (x_tilde, _report) = codec::passthrough(&mut g, x_l, codec_cfg, surrogate, &shadow)?;
    let x_hat = synthesize(&mut g, x_tilde, f_hat, &model.transform, &leaves)?;
    let l_recons = loss::loss_recons(&mut g, x, x_hat)?;
    let l_mimic = loss::loss_mimic(&mut g, x, split.low, weights.k)?;
    let l_pen = loss::loss_penalize(&mut g, x, &split, &model.transform, &leaves)?;
    let parts = RescaleParts {
        conditional: l_cond,
        mimic: l_mimic,
        penalize: l_pen,
        recons: l_recons,
    };
    let selfc_total = loss::total_rescale(&mut g, &parts, weights, conditional_weight);
    // codec-matching branch: detached input, trainable surrogate leaves
    let eta = g.stop_gradient(x_tilde);
    let x_l_detached = g.stop_gradient(x_l);
    let phi_out = codec::surrogate_forward(&mut g, x_l_detached, surrogate, &leaves)?;
    let l_codec = loss::loss_codec(&mut g, eta, phi_out, weights.rho)?;
    let total = loss::total_compression(&mut g, selfc_total, l_codec, weights.codec);
    let stats = StepStats {
        iter,
        conditional: g.value(l_cond).item(),
        mimic: g.value(l_mimic).item(),
        penalize: g.value(l_pen).item(),
        recons: g.value(l_recons).item(),
        codec: Some(g.value(l_codec).item()),
        total: g.value(total).item(),
    };
    ensure_finite(&stats)?;
    let mut grads = g.backward(total);
    let gvec = collect_grads(model.store.len(), &leaves, &mut grads);
    Ok((stats, gvec))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub iter: u64,
    rng: Rng,
    clips: Vec<Tensor>,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    /// Build a trainer, loading and caching the manifest's train split.
    pub fn new(mut cfg: TrainConfig) -> Result<Self> {
        let manifest = cfg
            .data_manifest
            .clone()
            .ok_or_else(|| Error::Config("config needs data_manifest".into()))?;
        let corpus = data::read_manifest(&manifest)?;
        if corpus.train.is_empty() {
            return Err(Error::Config("manifest has no train clips".into()));
        }
        let clips: Result<Vec<Tensor>> = corpus
            .train
            .iter()
            .map(|r| data::load_clip(r, Some(cfg.clip_length)))
            .collect();
        cfg.model.with_surrogate = cfg.task == Task::Compress;
        Self::with_clips(cfg, clips?)
    }

    /// Build a trainer over in-memory clips (tests and programmatic use).
    pub fn with_clips(mut cfg: TrainConfig, clips: Vec<Tensor>) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::Config("no training clips".into()));
        }
        if cfg.task == Task::Compress {
            cfg.model.with_surrogate = true;
        }
        cfg.model.init_seed = cfg.seed;
        cfg.weights.k = cfg.model.k;
        let model = Model::new(cfg.model.clone());
        let adam = Adam::new(&model.store, 0.9, 0.999);
        let rng = Rng::new(cfg.seed ^ 0x747261696e);
        let order: Vec<usize> = (0..clips.len()).collect();
        Ok(Trainer {
            cfg,
            model,
            adam,
            iter: 0,
            rng,
            clips,
            order,
            cursor: 0,
        })
    }

    fn next_batch(&mut self) -> Result<Tensor> {
        let b = self.cfg.batch_size.min(self.clips.len());
        let crop = self.cfg.crop;
        let mut parts: Vec<Tensor> = Vec::with_capacity(b);
        for _ in 0..b {
            if self.cursor == 0 {
                self.rng.shuffle(&mut self.order);
            }
            let idx = self.order[self.cursor];
            self.cursor = (self.cursor + 1) % self.order.len();
            let clip = &self.clips[idx];
            let [_, _, _, h, w] = clip.dims5()?;
            let (ch, cw) = (crop.min(h), crop.min(w));
            let aug = data::augment(
                clip,
                &AugmentConfig {
                    flip: true,
                    rotate90: ch == cw,
                    crop: (ch, cw),
                    seed: self.rng.next_u64(),
                },
            )?;
            parts.push(aug);
        }
        // stack along the batch axis
        let shape = parts[0].shape().to_vec();
        let mut data: Vec<f64> = Vec::with_capacity(parts.len() * parts[0].len());
        for p in &parts {
            if p.shape() != shape.as_slice() {
                return Err(Error::dim("clips in one batch must share dimensions"));
            }
            data.extend_from_slice(p.data());
        }
        let mut out_shape = shape;
        out_shape[0] = parts.len();
        Tensor::from_vec(&out_shape, data)
    }

    /// Run one optimization step and apply the update.
    pub fn step(&mut self) -> Result<StepStats> {
        let batch = self.next_batch()?;
        let cond_w = loss::conditional_weight_at(
            self.cfg.weights.conditional,
            self.iter,
            self.cfg.total_iters,
        );
        let (stats, grads) = match self.cfg.task {
            Task::Rescale => rescale_step_grads(
                &self.model,
                &batch,
                &self.cfg.weights,
                cond_w,
                &mut self.rng,
                self.iter,
            )?,
            Task::Compress => {
                let qp = self.cfg.qp_set[self.rng.below(self.cfg.qp_set.len())];
                let codec_cfg = self.cfg.codec_config(qp);
                compress_step_grads(
                    &self.model,
                    &batch,
                    &self.cfg.weights,
                    cond_w,
                    &codec_cfg,
                    &mut self.rng,
                    self.iter,
                )?
            }
        };
        let lr = self.cfg.lr_at(self.iter);
        self.adam.step(&mut self.model.store, &grads, lr);
        self.iter += 1;
        Ok(stats)
    }

    /// Run to completion, writing one pinned log line per iteration.
    /// Codec failures abort the step without touching state; three in a row
    /// abort the run.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<()> {
        let mut consecutive_codec_failures = 0u32;
        while self.iter < self.cfg.total_iters {
            match self.step() {
                Ok(stats) => {
                    consecutive_codec_failures = 0;
                    writeln!(log, "{}", stats.log_line())?;
                }
                Err(Error::Codec(msg)) => {
                    consecutive_codec_failures += 1;
                    eprintln!(
                        "iteration {}: codec failure, step skipped: {msg}",
                        self.iter
                    );
                    if consecutive_codec_failures >= 3 {
                        return Err(Error::Codec(format!(
                            "three consecutive codec failures, giving up: {msg}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        log.flush()?;
        Ok(())
    }
}

/// One evaluation row (per clip, metrics averaged over draws).
#[derive(Clone, Debug)]
pub struct EvalRow {
    pub name: String,
    pub psnr_rgb: f64,
    pub psnr_y: f64,
    pub ssim_rgb: f64,
    pub ssim_y: f64,
}

impl EvalRow {
    pub fn header() -> &'static str {
        "clip\tpsnr_rgb\tpsnr_y\tssim_rgb\tssim_y"
    }

    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.name, self.psnr_rgb, self.psnr_y, self.ssim_rgb, self.ssim_y
        )
    }
}

/// Average the per-clip rows into a summary row named `average`.
pub fn average_row(rows: &[EvalRow]) -> EvalRow {
    let n = rows.len().max(1) as f64;
    EvalRow {
        name: "average".into(),
        psnr_rgb: rows.iter().map(|r| r.psnr_rgb).sum::<f64>() / n,
        psnr_y: rows.iter().map(|r| r.psnr_y).sum::<f64>() / n,
        ssim_rgb: rows.iter().map(|r| r.ssim_rgb).sum::<f64>() / n,
        ssim_y: rows.iter().map(|r| r.ssim_y).sum::<f64>() / n,
    }
}

/// Rescaling evaluation: downscale, quantize, upscale with `draws`
/// reconstruction draws (a single draw is the deterministic zero-noise one),
/// and average the metrics. Evaluation conditions the prior on the quantized
/// stored clip, unlike training.
pub fn evaluate_rescale(
    model: &Model,
    clips: &[(String, Tensor)],
    draws: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(clips.len());
    for (ci, (name, x)) in clips.iter().enumerate() {
        let x_l = model.downscale(x)?;
        let recons = model.upscale_draws(&x_l, draws, seed ^ (ci as u64) << 16)?;
        let mut acc = [0.0f64; 4];
        for r in &recons {
            acc[0] += metrics::psnr(x, r, Channel::Rgb)?;
            acc[1] += metrics::psnr(x, r, Channel::Y)?;
            acc[2] += metrics::ssim(x, r, Channel::Rgb)?;
            acc[3] += metrics::ssim(x, r, Channel::Y)?;
        }
        let n = recons.len() as f64;
        rows.push(EvalRow {
            name: name.clone(),
            psnr_rgb: acc[0] / n,
            psnr_y: acc[1] / n,
            ssim_rgb: acc[2] / n,
            ssim_y: acc[3] / n,
        });
    }
    Ok(rows)
}

/// Rate-distortion curves for the learned system and the plain-codec anchor.
#[derive(Clone, Debug)]
pub struct CompressEval {
    pub system_psnr: RdCurve,
    pub system_msssim: RdCurve,
    pub anchor_psnr: RdCurve,
    pub anchor_msssim: RdCurve,
}

/// Sweep the quality values: the system path downscales, encodes the stored
/// clip, decodes, and reconstructs with `draws` draws; the anchor encodes the
/// full-resolution clip directly. Bits per pixel always uses the original
/// dimensions.
pub fn evaluate_compress(
    model: &Model,
    clips: &[(String, Tensor)],
    qps: &[u8],
    codec_kind: CodecKind,
    codec_mode: CodecMode,
    draws: usize,
    seed: u64,
) -> Result<CompressEval> {
    let mut sys_psnr = Vec::new();
    let mut sys_ms = Vec::new();
    let mut anc_psnr = Vec::new();
    let mut anc_ms = Vec::new();
    for &qp in qps {
        let cfg = CodecConfig {
            kind: codec_kind,
            mode: codec_mode,
            quality: qp,
            lossless: false,
            fps: 50,
            preset: "veryfast".into(),
        };
        let mut acc = [0.0f64; 6]; // sys bpp, sys psnr, sys msssim, anc bpp, anc psnr, anc msssim
        for (ci, (_, x)) in clips.iter().enumerate() {
            let [_, t, _, h, w] = x.dims5()?;
            // learned system
            let x_l = model.downscale(x)?;
            let (decoded, report) = codec::roundtrip(&x_l, &cfg)?;
            let recons =
                model.upscale_draws(&decoded, draws, seed ^ (qp as u64) << 32 ^ ci as u64)?;
            let mut p = 0.0;
            let mut m = 0.0;
            for r in &recons {
                p += metrics::psnr(x, r, Channel::Rgb)?;
                m += metrics::ms_ssim(x, r)?;
            }
            acc[0] += metrics::bpp_for_dims(report.encoded_bytes, t, w, h);
            acc[1] += p / recons.len() as f64;
            acc[2] += m / recons.len() as f64;
            // anchor: codec on the full-resolution input
            let (anchor_out, anchor_report) = codec::roundtrip(x, &cfg)?;
            acc[3] += metrics::bpp(&anchor_report);
            acc[4] += metrics::psnr(x, &anchor_out, Channel::Rgb)?;
            acc[5] += metrics::ms_ssim(x, &anchor_out)?;
        }
        let n = clips.len() as f64;
        sys_psnr.push(RdPoint {
            bpp: acc[0] / n,
            quality: acc[1] / n,
        });
        sys_ms.push(RdPoint {
            bpp: acc[0] / n,
            quality: acc[2] / n,
        });
        anc_psnr.push(RdPoint {
            bpp: acc[3] / n,
            quality: acc[4] / n,
        });
        anc_ms.push(RdPoint {
            bpp: acc[3] / n,
            quality: acc[5] / n,
        });
    }
    Ok(CompressEval {
        system_psnr: RdCurve::new(sys_psnr)?,
        system_msssim: RdCurve::new(sys_ms)?,
        anchor_psnr: RdCurve::new(anc_psnr)?,
        anchor_msssim: RdCurve::new(anc_ms)?,
    })
}

// --- checkpointing -----------------------------------------------------

fn write_le(buf: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Save parameters, optimizer moments, the iteration counter and a config
/// snapshot. The layout (a plain-text manifest plus one little-endian f64
/// blob) makes save -> load -> save byte-identical.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &TrainConfig,
    model: &Model,
    adam: &Adam,
    iter: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let _ = writeln!(manifest, "format-version\t{CHECKPOINT_VERSION}");
    let _ = writeln!(manifest, "iteration\t{iter}");
    let _ = writeln!(manifest, "adam-steps\t{}", adam.steps());
    let emit = |manifest: &mut String, name: String, t: &Tensor, blob: &mut Vec<u8>| {
        let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            manifest,
            "tensor\t{name}\tf64\t{}\t{}\t{}",
            shape.join(","),
            blob.len(),
            t.len()
        );
        write_le(blob, t);
    };
    for i in 0..model.store.len() {
        let id = ParamId(i);
        emit(
            &mut manifest,
            format!("param/{}", model.store.name(id)),
            model.store.get(id),
            &mut blob,
        );
    }
    for i in 0..model.store.len() {
        let (m, v) = adam.moments(i);
        let name = model.store.name(ParamId(i)).to_string();
        emit(&mut manifest, format!("adam-m/{name}"), m, &mut blob);
        emit(&mut manifest, format!("adam-v/{name}"), v, &mut blob);
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    std::fs::write(dir.join("tensors.bin"), blob)?;
    std::fs::write(dir.join("config.txt"), cfg.snapshot())?;
    Ok(())
}

fn checkpoint_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(TrainConfig, Model, Adam, u64)> {
    let cfg = TrainConfig::from_file(&dir.join("config.txt"))?;
    let mut model = Model::new(cfg.model.clone());
    let mut adam = Adam::new(&model.store, 0.9, 0.999);
    let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| checkpoint_err(format!("{}: {e}", dir.display())))?;
    let blob = std::fs::read(dir.join("tensors.bin"))?;
    let mut iteration = 0u64;
    for line in manifest.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["format-version", v] => {
                let v: u32 = v.parse().map_err(|_| checkpoint_err("bad version"))?;
                if v != CHECKPOINT_VERSION {
                    return Err(checkpoint_err(format!("unsupported version {v}")));
                }
            }
            ["iteration", v] => {
                iteration = v.parse().map_err(|_| checkpoint_err("bad iteration"))?
            }
            ["adam-steps", v] => {
                adam.set_steps(v.parse().map_err(|_| checkpoint_err("bad adam steps"))?)
            }
            ["tensor", name, "f64", shape, offset, count] => {
                let shape: Vec<usize> = if shape.is_empty() {
                    Vec::new()
                } else {
                    shape
                        .split(',')
                        .map(|d| d.parse().map_err(|_| checkpoint_err("bad shape")))
                        .collect::<Result<_>>()?
                };
                let offset: usize = offset.parse().map_err(|_| checkpoint_err("bad offset"))?;
                let count: usize = count.parse().map_err(|_| checkpoint_err("bad count"))?;
                let end = offset + count * 8;
                if end > blob.len() {
                    return Err(checkpoint_err("blob too short"));
                }
                let data: Vec<f64> = blob[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let tensor =
                    Tensor::from_vec(&shape, data).map_err(|e| checkpoint_err(e.to_string()))?;
                if let Some(rest) = name.strip_prefix("param/") {
                    let id = model
                        .store
                        .lookup(rest)
                        .ok_or_else(|| checkpoint_err(format!("unknown parameter {rest}")))?;
                    model.store.set(id, tensor);
                } else if let Some(rest) = name.strip_prefix("adam-m/") {
                    let id = model
                        .store
                        .lookup(rest)
                        .ok_or_else(|| checkpoint_err(format!("unknown parameter {rest}")))?;
                    let v = adam.moments(id.0).1.clone();
                    adam.set_moments(id.0, tensor, v)?;
                } else if let Some(rest) = name.strip_prefix("adam-v/") {
                    let id = model
                        .store
                        .lookup(rest)
                        .ok_or_else(|| checkpoint_err(format!("unknown parameter {rest}")))?;
                    let m = adam.moments(id.0).0.clone();
                    adam.set_moments(id.0, m, tensor)?;
                } else {
                    return Err(checkpoint_err(format!("unknown tensor {name}")));
                }
            }
            _ => return Err(checkpoint_err(format!("bad manifest line: {line}"))),
        }
    }
    Ok((cfg, model, adam, iteration))
}
