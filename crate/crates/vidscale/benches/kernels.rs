//! Data-parallel kernels vs the sequential fallback. Every kernel is bitwise
//! deterministic either way, so this measures pure scheduling overhead and
//! speedup. With `--no-default-features` the parallel pathway compiles out
//! and both variants time the sequential code.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use vidscale::data::synthetic_clip;
use vidscale::freq::TransformKind;
use vidscale::graph::Graph;
use vidscale::model::ModelConfig;
use vidscale::ops::conv3d_value;
use vidscale::parallel;
use vidscale::rng::Rng;
use vidscale::tensor::Tensor;
use vidscale::train::{Task, TrainConfig, Trainer};

fn with_modes(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    for (suffix, sequential) in [("par", false), ("seq", true)] {
        parallel::set_sequential(sequential);
        c.bench_function(&format!("{name}/{suffix}"), |b| b.iter(&mut f));
    }
    parallel::set_sequential(false);
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = Tensor::from_fn(&[2, 3, 16, 32, 32], |_| rng.normal());
    let w = Tensor::from_fn(&[16, 16, 1, 3, 3], |_| rng.normal() * 0.1);
    let b = Tensor::zeros(&[16]);
    with_modes(c, "conv3d_1x3x3_forward", || {
        black_box(conv3d_value(black_box(&x), &w, Some(&b)).unwrap());
    });
}

fn bench_conv_backward(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let x = Tensor::from_fn(&[1, 3, 12, 24, 24], |_| rng.normal());
    let w = Tensor::from_fn(&[12, 12, 3, 1, 1], |_| rng.normal() * 0.1);
    let bias = Tensor::zeros(&[12]);
    with_modes(c, "conv3d_3x1x1_train", || {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let bv = g.leaf(bias.clone());
        let y = g.conv3d(xv, wv, bv).unwrap();
        let q = g.mul(y, y);
        let s = g.sum_all(q);
        let grads = g.backward(s);
        black_box(grads.get(wv).unwrap().len());
    });
}

fn bench_bicubic(c: &mut Criterion) {
    let mut rng = Rng::new(3);
    let x = Tensor::from_fn(&[1, 5, 3, 128, 128], |_| rng.uniform());
    with_modes(c, "bicubic_down4", || {
        black_box(vidscale::ops::bicubic_down_value(black_box(&x), 4).unwrap());
    });
}

fn bench_mixture_log_prob(c: &mut Criterion) {
    let mut rng = Rng::new(4);
    let shape = [2, 3, 12, 16, 16, 5];
    let logits = Tensor::from_fn(&shape, |_| rng.normal());
    let means = Tensor::from_fn(&shape, |_| rng.normal());
    let logvars = Tensor::from_fn(&shape, |_| rng.normal() * 0.3);
    let target = Tensor::from_fn(&[2, 3, 12, 16, 16], |_| rng.normal());
    with_modes(c, "mixture_log_prob", || {
        let mut g = Graph::new();
        let wl = g.leaf(logits.clone());
        let mu = g.leaf(means.clone());
        let lv = g.leaf(logvars.clone());
        let f = vidscale::gmm::field_from_raw(&mut g, wl, mu, lv).unwrap();
        let t = g.leaf(target.clone());
        let lp = vidscale::gmm::log_prob_sum(&mut g, &f, t).unwrap();
        black_box(g.value(lp).item());
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut cfg = TrainConfig {
        task: Task::Rescale,
        batch_size: 1,
        total_iters: u64::MAX,
        crop: 24,
        clip_length: 2,
        seed: 5,
        ..TrainConfig::default()
    };
    cfg.model = ModelConfig {
        k: 2,
        transform_kind: TransformKind::Invertible,
        transform_blocks: 2,
        growth: 8,
        mixtures: 5,
        prior_width: 4,
        prior_stages: 2,
        surrogate_blocks: 2,
        with_surrogate: false,
        init_seed: 5,
    };
    let mut rng = Rng::new(6);
    let clips: Vec<Tensor> = (0..2)
        .map(|_| synthetic_clip(&mut rng, 2, 24, 24))
        .collect();
    let mut trainer = Trainer::with_clips(cfg, clips).unwrap();
    with_modes(c, "rescale_train_step", || {
        black_box(trainer.step().unwrap().total);
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_conv_backward, bench_bicubic, bench_mixture_log_prob, bench_train_step
}
criterion_main!(benches);
