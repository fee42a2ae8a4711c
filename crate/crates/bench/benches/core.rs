use std::hint::black_box;

use ccsfg_bench::fixture;
use ccsfg_core::evaluation::{evaluate, score, RetrievalSet};
use ccsfg_core::numerics::rng::{normal_tensor, seeded};
use ccsfg_core::synthdata::{generate_dataset, DataConfig, Sample};
use ccsfg_core::trainer::{joint_forward, train_step, TrainConfig};
use criterion::{BenchmarkId, Criterion, Throughput};

fn tape(c: &mut Criterion) {
    let mut group = c.benchmark_group("joint");
    for (name, cfg) in [
        ("ccsfg", TrainConfig::default()),
        (
            "encoder-only",
            TrainConfig {
                joint: false,
                ifn: false,
                ..TrainConfig::default()
            },
        ),
    ] {
        let f = fixture(cfg);
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| joint_forward(&f.model.nets, f.model.ifn.as_ref(), &f.batch, &f.cfg, &f.noise).unwrap())
        });
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            b.iter(|| {
                let fwd = joint_forward(&f.model.nets, f.model.ifn.as_ref(), &f.batch, &f.cfg, &f.noise).unwrap();
                fwd.tape.backward(fwd.total).unwrap()
            })
        });
        group.bench_function(BenchmarkId::new("train_step", name), |b| {
            let mut model = f.model.clone();
            b.iter(|| train_step(&mut model, &f.batch, &f.cfg, &f.noise, f.cfg.lr).unwrap())
        });
    }
    group.finish();
}

fn retrieval_set(n: usize, ids: u32, cams: u16, seed: u64) -> RetrievalSet {
    let features = normal_tensor(&mut seeded(seed), n, 32, 1.0);
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            x: Vec::new(),
            y: i as u32 % ids,
            c: (i / ids as usize) as u16 % cams,
        })
        .collect();
    RetrievalSet::new(features, &samples)
}

fn scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("score");
    for gallery in [160usize, 1000] {
        let q = retrieval_set(40, 20, 4, 1);
        let g = retrieval_set(gallery, 20, 4, 2);
        group.throughput(Throughput::Elements((q.len() * g.len()) as u64));
        group.bench_function(BenchmarkId::from_parameter(gallery), |b| {
            b.iter(|| score(&q, &g).unwrap())
        });
    }
    group.finish();

    let f = fixture(TrainConfig::default());
    c.bench_function("evaluate/default", |b| b.iter(|| evaluate(&f.model, &f.data).unwrap()));
}

fn data(c: &mut Criterion) {
    c.bench_function("generate_dataset/default", |b| {
        b.iter(|| generate_dataset(black_box(&DataConfig::default()), 0).unwrap())
    });
}

criterion::criterion_group!(benches, tape, scoring, data);
criterion::criterion_main!(benches);
