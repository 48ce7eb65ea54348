//! Sequential versus rayon execution of the hot paths: a generator training
//! step (conv forward/backward) and batch heatmap encoding/decoding.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use structpose::autograd::Graph;
use structpose::config::TrainConfig;
use structpose::data::PoseDataset;
use structpose::exec::{self, Mode};
use structpose::generator::{build_generator, generator_mse_loss};
use structpose::synthdata::{generate_dataset, SkeletonSpec, SynthConfig};
use structpose::training::{decode_batch, predict_heatmaps};

const MODES: [(Mode, &str); 2] = [(Mode::Sequential, "sequential"), (Mode::Parallel, "parallel")];

fn fixture(n: usize) -> (TrainConfig, PoseDataset) {
    let spec = SkeletonSpec::mpii16();
    let synth = SynthConfig::default();
    let cfg = TrainConfig {
        input_size: 32,
        ..Default::default()
    };
    let samples = generate_dataset(&spec, &synth, n, 0).expect("synthetic data");
    let ds = PoseDataset::from_samples(&samples, &synth, &cfg, &spec).expect("dataset");
    (cfg, ds)
}

fn generator_step(c: &mut Criterion) {
    let (cfg, ds) = fixture(16);
    let model = build_generator::<f32>(&cfg).unwrap();
    let batch = ds.plain_batch(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut group = c.benchmark_group("generator_step_b16");
    group.sample_size(10);
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, true);
                let x = g.constant(batch.images.clone());
                let outs = model.forward(&mut g, &p, x).unwrap();
                let loss = generator_mse_loss(&mut g, &outs, &batch.pose, Some(&batch.occ), &batch.mask).unwrap();
                let grads = g.backward(loss).unwrap();
                model.params.collect_grads(&p, &grads)
            });
        });
    }
    group.finish();
    exec::set_mode(Mode::Parallel);
}

fn predict_and_decode(c: &mut Criterion) {
    let (cfg, ds) = fixture(64);
    let model = build_generator::<f32>(&cfg).unwrap();
    let mut group = c.benchmark_group("predict_decode_64");
    group.sample_size(10);
    for (mode, name) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_mode(mode);
            b.iter(|| {
                let hm = predict_heatmaps(&model, &ds).unwrap();
                decode_batch(&hm, cfg.joints, ds.grid)
            });
        });
    }
    group.finish();
    exec::set_mode(Mode::Parallel);
}

criterion_group!(benches, generator_step, predict_and_decode);
criterion_main!(benches);
