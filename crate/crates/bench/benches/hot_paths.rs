//! Hot paths of a training run: encoder passes (feature extraction), the
//! Hessian-vector product behind every spectral snapshot, and the SAM step.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use corlab_core::diagnostics::{spectral_estimate, EstimatorConfig};
use corlab_core::harness::{random_instance, CORIT_EPSILON};
use corlab_core::model::{encode_corit, encode_plain, EncoderConfig, FrozenEncoder};
use corlab_core::objective::{LogisticObjective, Objective};
use corlab_core::optim::{sam_step, BatchSampler};
use corlab_core::regions::grid_partition;
use corlab_core::rng::SeedTree;
use corlab_core::synth::{counterpart, generate, CounterpartOp, Split, TaskSpec};

/// Deterministic features in [-1, 1) without pulling in a sampler.
fn features(n: usize, d: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    };
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| next()).collect()).collect();
    let y = (0..n).map(|i| (i % 2) as u8).collect();
    (x, y)
}

fn encoder(c: &mut Criterion) {
    let task = TaskSpec { n_train: 1, ..TaskSpec::default() };
    let enc = FrozenEncoder::new(EncoderConfig::default()).unwrap();
    let sample = generate(&task, Split::Train).unwrap().samples.remove(0);
    let other = counterpart(&sample, &CounterpartOp::for_task(&task, 1.0)).unwrap();
    let regions = grid_partition(task.n_tokens).unwrap();
    let mut g = c.benchmark_group("encoder");
    g.bench_function("plain_forward", |b| b.iter(|| encode_plain(&enc, black_box(&sample.tokens)).unwrap()));
    g.bench_function("corit_paired_forward", |b| {
        b.iter(|| encode_corit(&enc, black_box(&sample.tokens), &other.tokens, &regions, 0.1, CORIT_EPSILON).unwrap())
    });
    g.finish();
}

fn hvp(c: &mut Criterion) {
    let mut g = c.benchmark_group("hvp");
    for d in [33usize, 257] {
        let (x, y) = features(400, d - 1);
        let obj = LogisticObjective::new(x, y).unwrap();
        let w: Vec<f64> = (0..d).map(|k| 0.01 * k as f64).collect();
        let v: Vec<f64> = (0..d).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let all = obj.all();
        g.bench_with_input(BenchmarkId::new("logistic", d), &d, |b, _| {
            b.iter(|| obj.hvp(black_box(&w), &all, &v).unwrap())
        });
    }
    let inst = random_instance(SeedTree::new(1).child("bench")).unwrap();
    let all = inst.objective.all();
    let v = vec![1.0; inst.weights.len()];
    g.bench_function("softmax_tape", |b| b.iter(|| inst.objective.hvp(black_box(&inst.weights), &all, &v).unwrap()));
    g.finish();
}

fn sam(c: &mut Criterion) {
    let mut g = c.benchmark_group("sam_step");
    for d in [33usize, 257] {
        let (x, y) = features(400, d - 1);
        let obj = LogisticObjective::new(x, y).unwrap();
        let mut sampler = BatchSampler::new(obj.len(), 20, 0).unwrap();
        let mut w = vec![0.0; d];
        let mut step = 0;
        g.bench_with_input(BenchmarkId::new("logistic", d), &d, |b, _| {
            b.iter(|| {
                let batch = sampler.next_batch();
                step += 1;
                sam_step(&obj, &mut w, &batch, 0.05, 1e-3, step, None).unwrap()
            })
        });
    }
    g.finish();
}

fn spectral(c: &mut Criterion) {
    let (x, y) = features(400, 32);
    let obj = LogisticObjective::new(x, y).unwrap();
    let w: Vec<f64> = (0..33).map(|k| 0.02 * k as f64 - 0.3).collect();
    let all = obj.all();
    let cfg = EstimatorConfig::default();
    c.bench_function("spectral_estimate/logistic_33", |b| {
        b.iter(|| spectral_estimate(&obj, black_box(&w), &all, 20, 0, &cfg).unwrap())
    });
}

criterion_group!(benches, encoder, hvp, sam, spectral);
criterion_main!(benches);
