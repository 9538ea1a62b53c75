use proptest::prelude::*;

use super::*;
use crate::harness::compute_auc;
use crate::model::{encode_corit, EncoderConfig, FrozenEncoder, SemanticBias};
use crate::objective::{LogisticObjective, Objective};
use crate::optim::{train, SamConfig};
use crate::regions::grid_partition;

fn features(ds: &Dataset, f: RawFeatures) -> Vec<Vec<f64>> {
    ds.samples.iter().map(|s| f.apply(s)).collect()
}

/// Train a logistic probe with plain SGD and return its test AUC.
fn probe_auc(spec: &TaskSpec, f: RawFeatures, steps: usize, lr: f64) -> f64 {
    let train_ds = generate(spec, Split::Train).unwrap();
    let test_ds = generate(spec, Split::Test).unwrap();
    let obj = LogisticObjective::new(features(&train_ds, f), train_ds.labels()).unwrap();
    let mut w = vec![0.0; obj.dim()];
    let cfg = SamConfig {
        rho: 0.0,
        learning_rate: lr,
        batch_size: 20,
        steps,
        seed: spec.seed,
    };
    train(&obj, &mut w, &cfg, &obj.all(), |_| false, |_, _| Ok(true)).unwrap();
    let test = LogisticObjective::new(features(&test_ds, f), test_ds.labels()).unwrap();
    compute_auc(&test.scores(&w), &test_ds.labels()).unwrap()
}

#[test]
fn zero_signal_is_chance_for_every_seed() {
    for seed in 0..20 {
        let spec = TaskSpec {
            semantic_amp: 0.0,
            artifact_amp: 0.0,
            n_test: 4000,
            seed,
            ..TaskSpec::default()
        };
        let auc = probe_auc(&spec, RawFeatures::MeanPool, 200, 0.1);
        assert!((0.45..=0.55).contains(&auc), "seed {seed}: {auc}");
    }
}

#[test]
fn strong_semantic_signal_is_learned_quickly() {
    let spec = TaskSpec {
        semantic_amp: 2.0,
        artifact_amp: 0.0,
        noise_sigma: 1.0,
        seed: 3,
        ..TaskSpec::default()
    };
    let auc = probe_auc(&spec, RawFeatures::MeanPool, 200, 0.1);
    assert!(auc > 0.95, "{auc}");
}

#[test]
fn generation_is_byte_identical() {
    let spec = TaskSpec {
        semantic_amp: 0.5,
        content_sigma: 0.3,
        seed: 17,
        n_train: 30,
        n_test: 10,
        ..TaskSpec::default()
    };
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_dataset(&generate(&spec, Split::Train).unwrap(), &mut a).unwrap();
    write_dataset(&generate(&spec, Split::Train).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
    let back = read_dataset(a.as_slice()).unwrap();
    assert_eq!(back, generate(&spec, Split::Train).unwrap());
    // Train and test draw from different streams.
    let test = generate(&spec, Split::Test).unwrap();
    assert_ne!(test.samples[0], back.samples[0]);
}

#[test]
fn sample_is_a_function_of_its_index() {
    let spec = TaskSpec { n_train: 50, ..TaskSpec::default() };
    let ds = generate(&spec, Split::Train).unwrap();
    let pats = task_patterns(&spec).unwrap();
    assert_eq!(sample_at(&spec, &pats, Split::Train, 37), ds.samples[37]);
}

#[test]
fn dump_csv_layout() {
    let spec = TaskSpec { n_tokens: 9, dim: 4, artifact_channels: vec![3], n_train: 2, n_test: 2, ..TaskSpec::default() };
    let ds = generate(&spec, Split::Train).unwrap();
    let mut out = Vec::new();
    dump_csv(&ds, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample,label,token,c0,c1,c2,c3");
    assert_eq!(lines.len(), 1 + 2 * 9);
    assert!(lines[10].starts_with("1,1,0,"));
}

#[test]
fn spec_validation() {
    let bad = TaskSpec { artifact_channels: vec![], ..TaskSpec::default() };
    assert!(bad.validate().is_err());
    let ok = TaskSpec { artifact_channels: vec![], artifact_amp: 0.0, ..TaskSpec::default() };
    assert!(ok.validate().is_ok());
    let bad = TaskSpec { noise_sigma: 0.0, ..TaskSpec::default() };
    assert!(bad.validate().is_err());
    let bad = TaskSpec { n_tokens: 15, ..TaskSpec::default() };
    assert!(bad.validate().is_err());
}

#[test]
fn artifact_pattern_is_confined() {
    let spec = TaskSpec::default();
    let pats = task_patterns(&spec).unwrap();
    let region = grid_region(spec.n_tokens, spec.artifact_region).unwrap();
    let mut energy = 0.0;
    for i in 0..spec.n_tokens {
        for c in 0..spec.dim {
            let v = pats.artifact[i * spec.dim + c];
            if !region.contains(&i) || !spec.artifact_channels.contains(&c) {
                assert_eq!(v, 0.0);
            }
            energy += v * v;
        }
    }
    assert!((energy - 1.0).abs() < 1e-12);
    for &c in &spec.artifact_channels {
        assert_eq!(pats.semantic[c], 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn classes_are_balanced(n_train in 1usize..60, n_test in 1usize..60, seed in 0u64..1000) {
        let spec = TaskSpec { n_train, n_test, seed, n_tokens: 9, dim: 6, artifact_channels: vec![4, 5], ..TaskSpec::default() };
        for split in [Split::Train, Split::Test] {
            let ds = generate(&spec, split).unwrap();
            let fake = ds.labels().iter().filter(|&&y| y == 1).count();
            prop_assert!(fake.abs_diff(ds.len() - fake) <= 1);
        }
    }

    #[test]
    fn counterpart_is_deterministic(seed in 0u64..1000, amp in 0.1f64..3.0) {
        let spec = TaskSpec { seed, n_train: 3, ..TaskSpec::default() };
        let s = &generate(&spec, Split::Train).unwrap().samples[1];
        let op = CounterpartOp::for_task(&spec, amp);
        prop_assert_eq!(counterpart(s, &op).unwrap(), counterpart(s, &op).unwrap());
    }
}

#[test]
fn zero_amplitude_counterpart_is_the_sample() {
    let spec = TaskSpec { n_train: 2, ..TaskSpec::default() };
    let s = &generate(&spec, Split::Train).unwrap().samples[0];
    let c = counterpart(s, &CounterpartOp::for_task(&spec, 0.0)).unwrap();
    assert_eq!(&c, s);
}

#[test]
fn single_token_single_channel_counterpart() {
    let s = Sample { tokens: Tensor::zeros(&[9, 4]), label: 0 };
    // The 3×3 foreground is the single center token 4.
    let op = CounterpartOp { perturb_amp: 1.0, target_channels: vec![2], target_region: RegionLabel::Foreground, seed: 1 };
    let c = counterpart(&s, &op).unwrap();
    let dv = crate::regions::compute_cgp(&c.tokens, &s.tokens).unwrap();
    for i in 0..9 {
        for ch in 0..4 {
            let want = if i == 4 && ch == 2 { 1.0 } else { 0.0 };
            assert_eq!(dv.data()[i * 4 + ch].abs(), want);
        }
    }
    let bad = CounterpartOp { target_channels: vec![4], ..op };
    assert!(counterpart(&s, &bad).is_err());
}

#[test]
fn default_counterpart_matches_external_pattern_addition() {
    let spec = TaskSpec { n_train: 4, seed: 8, ..TaskSpec::default() };
    let s = &generate(&spec, Split::Train).unwrap().samples[3];
    let op = CounterpartOp::for_task(&spec, 0.7);
    let region = grid_region(spec.n_tokens, spec.artifact_region).unwrap();
    let pat = structured_pattern(
        spec.n_tokens,
        spec.dim,
        &spec.artifact_channels,
        &region,
        SeedTree::new(op.seed).child("counterpart"),
    );
    let c = counterpart(s, &op).unwrap();
    for ((cv, sv), p) in c.tokens.data().iter().zip(s.tokens.data()).zip(&pat) {
        assert_eq!(*cv, sv + 0.7 * p);
    }
}

fn head_at_init(spec: &TaskSpec, f: RawFeatures) -> Vec<f64> {
    let dim = match f {
        RawFeatures::MeanPool => spec.dim,
        RawFeatures::Flatten => spec.n_tokens * spec.dim,
    };
    vec![0.0; dim + 1]
}

#[test]
fn expected_gsnr_of_zero_signal_is_small() {
    let spec = TaskSpec { semantic_amp: 0.0, artifact_amp: 0.0, ..TaskSpec::default() };
    let f = RawFeatures::Flatten;
    let g = expected_gsnr(&spec, f, &head_at_init(&spec, f), 20, GSNR_MC_SAMPLES).unwrap();
    assert!(g < 0.01, "{g}");
}

#[test]
fn expected_gsnr_scales_with_amplitude_squared() {
    let f = RawFeatures::Flatten;
    let at = |a: f64| {
        let spec = TaskSpec { semantic_amp: 0.0, artifact_amp: a, ..TaskSpec::default() };
        expected_gsnr(&spec, f, &head_at_init(&spec, f), 20, GSNR_MC_SAMPLES).unwrap()
    };
    let ratio = at(4.0) / at(2.0);
    assert!((ratio - 4.0).abs() <= 0.3 * 4.0, "{ratio}");
    let family: Vec<f64> = [0.25, 0.5, 1.0, 2.0].iter().map(|&a| at(a)).collect();
    assert!(family.windows(2).all(|p| p[0] < p[1]), "{family:?}");
}

#[test]
fn expected_gsnr_is_monotone_in_both_amplitudes() {
    let f = RawFeatures::Flatten;
    let amps = [0.0, 0.5, 1.0, 2.0];
    for seed in 0..5 {
        let grid: Vec<Vec<f64>> = amps
            .iter()
            .map(|&s| {
                amps.iter()
                    .map(|&a| {
                        let spec = TaskSpec { semantic_amp: s, artifact_amp: a, seed, ..TaskSpec::default() };
                        expected_gsnr(&spec, f, &head_at_init(&spec, f), 20, 2000).unwrap()
                    })
                    .collect()
            })
            .collect();
        for i in 0..4 {
            for j in 0..4 {
                if i + 1 < 4 {
                    assert!(grid[i + 1][j] >= grid[i][j], "seed {seed} semantic step at ({i},{j}): {grid:?}");
                }
                if j + 1 < 4 {
                    assert!(grid[i][j + 1] >= grid[i][j], "seed {seed} artifact step at ({i},{j}): {grid:?}");
                }
            }
        }
    }
}

#[test]
fn semantic_bias_attenuates_artifact_discrepancy_with_depth() {
    let spec = TaskSpec { semantic_amp: 0.0, artifact_amp: 1.0, n_train: 8, seed: 2, ..TaskSpec::default() };
    let enc = FrozenEncoder::new(EncoderConfig {
        semantic_bias: Some(SemanticBias { channels: spec.artifact_channels.clone(), strength: 0.5 }),
        ..EncoderConfig::default()
    })
    .unwrap();
    let regions = grid_partition(spec.n_tokens).unwrap();
    let op = CounterpartOp::for_task(&spec, 1.0);
    let ds = generate(&spec, Split::Train).unwrap();
    let d = spec.dim;
    for s in &ds.samples {
        let c = counterpart(s, &op).unwrap();
        let tr = encode_corit(&enc, &s.tokens, &c.tokens, &regions, 1.0, 1e-6).unwrap();
        let energy: Vec<f64> = tr
            .cgp
            .iter()
            .map(|g| {
                (0..spec.n_tokens)
                    .flat_map(|i| spec.artifact_channels.iter().map(move |&ch| i * d + ch))
                    .map(|k| g.data()[k].powi(2))
                    .sum()
            })
            .collect();
        assert!(energy.last().unwrap() < energy.first().unwrap(), "{energy:?}");
    }
}
