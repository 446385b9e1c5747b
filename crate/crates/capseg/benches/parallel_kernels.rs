//! Parallel-seam benchmarks.
//!
//! `batch_gradient` contrasts the rayon seam against its sequential twin in
//! one run. `hd95` and `synth_generate` parallelize internally, so comparing
//! them across feature configurations uses saved baselines:
//!
//!   cargo bench -p capseg -- --save-baseline parallel
//!   cargo bench -p capseg --no-default-features -- --baseline parallel
//!
//! On a single-core host both paths should measure the same; the suite
//! exists to quantify the seam on real multi-core hardware.

use criterion::{criterion_group, criterion_main, Criterion};

use capseg::data::{synth_generate, SegSample, SynthParams};
use capseg::losses::{LossConfig, LossKind};
use capseg::metrics::hd95;
use capseg::model::{multiscale_loss_with_grads, Model, ModelConfig};
use capseg::{par, Mask};

fn bench_model() -> ModelConfig {
    ModelConfig {
        input_size: 32,
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        stem_channels: vec![8, 16],
        supervision_scales: vec![2, 4],
        scale_weights: vec![1.0, 1.0, 1.0],
    }
}

fn sample_gradient(model: &Model, sample: &SegSample, loss_cfg: &LossConfig) -> f64 {
    let (pred, trace) = model.forward_trace(&sample.image).unwrap();
    let (loss, head_grads) = multiscale_loss_with_grads(
        &pred,
        &sample.expert_mask,
        &sample.nonexpert_mask,
        LossKind::AdaptiveFocal,
        loss_cfg,
        model.cfg(),
    )
    .unwrap();
    let grads = model.backward(&trace, &head_grads);
    loss + grads.data()[0]
}

fn batch_gradient(c: &mut Criterion) {
    let model = Model::new(bench_model(), 1).unwrap();
    let samples = synth_generate(16, 32, &SynthParams::default(), 9).unwrap();
    let loss_cfg = LossConfig::default();

    let mut group = c.benchmark_group("batch_gradient_16x32px");
    group.sample_size(10);
    group.bench_function("parallel_seam", |b| {
        b.iter(|| {
            par::map(&samples, |s| sample_gradient(&model, s, &loss_cfg))
                .iter()
                .sum::<f64>()
        })
    });
    group.bench_function("sequential_seam", |b| {
        b.iter(|| {
            par::map_seq(&samples, |s| sample_gradient(&model, s, &loss_cfg))
                .iter()
                .sum::<f64>()
        })
    });
    group.finish();
}

fn boundary_distance(c: &mut Criterion) {
    let disc = |cy: f64, cx: f64, radius: f64| {
        Mask::from_fn(192, 192, move |(r, c)| {
            let dy = r as f64 - cy;
            let dx = c as f64 - cx;
            (dy * dy + dx * dx).sqrt() < radius
        })
    };
    let truth = disc(96.0, 96.0, 60.0);
    let pred = disc(100.0, 92.0, 55.0);

    let mut group = c.benchmark_group("hd95_192px_blobs");
    group.sample_size(20);
    group.bench_function("hd95", |b| {
        b.iter(|| hd95(&truth, &pred, (1.0, 1.0)).unwrap())
    });
    group.finish();
}

fn synthetic_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth_generate_16x64px");
    group.sample_size(10);
    group.bench_function("generate", |b| {
        b.iter(|| synth_generate(16, 64, &SynthParams::default(), 9).unwrap())
    });
    group.finish();
}

criterion_group!(benches, batch_gradient, boundary_distance, synthetic_generation);
criterion_main!(benches);
