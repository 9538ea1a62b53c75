use proptest::prelude::*;

use super::*;
use crate::model::EncoderConfig;
use crate::objective::{LogisticObjective, Objective};
use crate::optim::{sgd_step, BatchSampler};
use crate::synth::TaskSpec;

/// Dim-8 encoder and task: cheap enough for end-to-end runs in unit tests.
fn small(semantic_amp: f64, artifact_amp: f64, n_train: usize) -> RunConfig {
    RunConfig {
        task: TaskSpec {
            dim: 8,
            artifact_channels: vec![6, 7],
            semantic_amp,
            artifact_amp,
            n_train,
            n_test: 200,
            ..TaskSpec::default()
        },
        encoder: EncoderConfig { dim: 8, heads: 2, ..EncoderConfig::default() },
        ..RunConfig::default()
    }
}

#[test]
fn config_json_round_trip_is_exact() {
    let mut cfg = small(0.3, 1.7, 50);
    cfg.head = HeadMode::Corit;
    cfg.optimizer.rho = 0.1 + 0.2;
    cfg.optimizer.learning_rate = 1.0 / 3.0;
    cfg.output_dir = Some("runs/x".into());
    let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.to_json().unwrap(), cfg.to_json().unwrap());
    let def = RunConfig::default();
    assert_eq!(RunConfig::from_json(&def.to_json().unwrap()).unwrap(), def);
    assert_eq!((def.alpha, def.l_mid, def.diagnostics_every), (0.1, 4, 10));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn config_round_trip_any_floats(rho in 0.0f64..10.0, lr in 1e-9f64..1.0, alpha in 0.0f64..5.0, seed in any::<u64>()) {
        let mut cfg = small(0.0, 1.0, 40).with_seed(seed).with_rho(rho);
        cfg.optimizer.learning_rate = lr;
        cfg.alpha = alpha;
        prop_assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
    }
}

#[test]
fn config_validation() {
    let mut bad = small(0.0, 1.0, 40);
    bad.encoder.dim = 16;
    assert!(bad.validate().is_err());
    let bad = RunConfig { diagnostics_every: 0, ..small(0.0, 1.0, 40) };
    assert!(bad.validate().is_err());
    let bad = RunConfig { head: HeadMode::Corit, l_mid: 6, ..small(0.0, 1.0, 40) };
    assert!(bad.validate().is_err());
    let mut bad = small(0.0, 1.0, 10);
    bad.optimizer.batch_size = 20;
    assert!(bad.validate().is_err());
    assert!(RunConfig::from_json("{\"task\": 3}").is_err());
}

#[test]
fn standardized_features_use_training_statistics() {
    let mut fs = FeatureSet {
        train: vec![vec![1.0, 5.0], vec![3.0, 5.0]],
        train_labels: vec![0, 1],
        test: vec![vec![2.0, 7.0]],
        test_labels: vec![1],
    };
    fs.standardize();
    assert_eq!(fs.train, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
    assert_eq!(fs.test, vec![vec![0.0, 2.0]]);
}

fn quick(mut cfg: RunConfig, rho: f64, steps: usize) -> RunConfig {
    cfg.optimizer.rho = rho;
    cfg.optimizer.steps = steps;
    cfg.optimizer.learning_rate = 0.01;
    cfg
}

#[test]
fn runs_are_deterministic_and_outputs_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for k in 0..2 {
        let mut cfg = quick(small(0.5, 1.0, 80), 0.05, 120);
        cfg.output_dir = Some(dir.path().join(format!("run{k}")));
        outs.push(run_train(&cfg).unwrap());
    }
    assert_eq!(outs[0], outs[1]);
    for f in ["metrics.csv", "steps.csv", "diagnostics.jsonl", "summary.json", "head.json", "config.json"] {
        let a = std::fs::read(dir.path().join("run0").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("run1").join(f)).unwrap();
        assert!(!a.is_empty(), "{f}");
        assert_eq!(a, b, "{f}");
    }
    let metrics = std::fs::read_to_string(dir.path().join("run0/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,loss,train_auc_window,grad_norm,gsnr\n"));
    assert!(!metrics.contains('\r'));
    assert_eq!(metrics.lines().count(), 121);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run0/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    let diag = std::fs::read_to_string(dir.path().join("run0/diagnostics.jsonl")).unwrap();
    assert_eq!(diag.lines().count(), 12);
}

#[test]
fn rho_zero_run_matches_sgd() {
    let cfg = quick(small(0.5, 1.0, 80), 0.0, 90);
    let fs = extract_features(&cfg).unwrap();
    let out = run_on_features(&cfg, &fs).unwrap();
    let obj = LogisticObjective::new(fs.train.clone(), fs.train_labels.clone()).unwrap();
    let mut w = vec![0.0; obj.dim()];
    let mut sampler = BatchSampler::new(obj.len(), cfg.optimizer.batch_size, cfg.optimizer.seed).unwrap();
    for _ in 0..90 {
        sgd_step(&obj, &mut w, &sampler.next_batch(), cfg.optimizer.learning_rate).unwrap();
    }
    let got: Vec<u64> = out.head.to_flat().iter().map(|v| v.to_bits()).collect();
    let want: Vec<u64> = w.iter().map(|v| v.to_bits()).collect();
    assert_eq!(got, want);
}

#[test]
fn high_signal_task_is_learned_under_sam() {
    let cfg = quick(small(2.0, 0.0, 400), 0.05, 600);
    let out = run_train(&cfg).unwrap();
    assert!(out.final_test_auc > 0.95, "{}", out.final_test_auc);
    assert!(!out.collapsed);
    assert!(out.cor.is_some() && out.gsnr_trace.is_some());
}

#[test]
fn near_zero_signal_task_is_at_chance() {
    let cfg = quick(small(0.0, 0.05, 400), 0.05, 600);
    let out = run_train(&cfg).unwrap();
    assert!((0.45..=0.60).contains(&out.final_test_auc), "{}", out.final_test_auc);
}

#[test]
fn non_finite_state_marks_the_run_failed() {
    let mut cfg = quick(small(0.5, 1.0, 60), 0.05, 40);
    cfg.optimizer.learning_rate = f64::MAX;
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let out = run_train(&cfg).unwrap();
    let f = out.failure.clone().expect("run must fail");
    assert_eq!(f.last_valid_step, f.step.checked_sub(1));
    assert_eq!(out.records.len(), f.step);
    assert!(out.collapsed);
    assert!(out.head.to_flat().iter().all(|v| v.is_finite()));
    let s: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(s.failure, Some(f));
}

#[test]
fn train_auc_window_pools_recent_batches() {
    let cfg = quick(small(2.0, 0.0, 100), 0.0, 30);
    let out = run_train(&cfg).unwrap();
    // Weights start at zero: every first-step logit ties.
    assert_eq!(out.metrics[0].train_auc_window, Some(0.5));
    assert!(out.metrics.last().unwrap().train_auc_window.unwrap() > 0.9);
    assert!(out.metrics.iter().all(|m| (m.step % 10 == 0) == m.gsnr.is_some()));
}

#[test]
fn wide_heads_match_dense_spectra() {
    let mut rng = crate::rng::SeedTree::new(4).rng();
    let feats: Vec<Vec<f64>> = (0..120)
        .map(|_| (0..80).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect())
        .collect();
    let labels = (0..120).map(|i| (i % 2) as u8).collect();
    let obj = LogisticObjective::new(feats, labels).unwrap();
    let w: Vec<f64> = (0..obj.dim()).map(|k| 0.01 * k as f64).collect();
    let cfg = RunConfig::default().estimator;
    let fast = probe_spectral_estimate(&obj, &w, &obj.all(), 20, 0, &cfg).unwrap();
    let exact_cfg = crate::diagnostics::EstimatorConfig { trace_mode: crate::diagnostics::TraceMode::Exact, ..cfg };
    let exact = crate::diagnostics::spectral_estimate(&obj, &w, &obj.all(), 20, 0, &exact_cfg).unwrap();
    assert!((fast.lambda_max - exact.lambda_max).abs() <= 1e-6 * exact.lambda_max);
    assert!((fast.trace_h - exact.trace_h).abs() <= 1e-10 * exact.trace_h);
    assert_eq!(fast.grad_norm_sq, exact.grad_norm_sq);
}

#[test]
fn zero_signal_sweep_collapses_everywhere() {
    let exp = ProbeExperiment::new(small(0.0, 0.0, 1000)).unwrap();
    let r = sweep_rho(&exp, &[0.0, 0.05, 0.5], &SweepConfig::default()).unwrap();
    assert!(r.entries.iter().all(|e| e.collapsed), "{:?}", r.entries);
    assert_eq!(r.bracket, CorBracket::AllCollapsed);
    assert_eq!(r.empirical_cor, 0.0);
}

#[test]
fn surrogate_sweep_brackets_the_analytic_radius() {
    let q = QuadraticSurrogate::new(&[2.0, 1.0, 0.5], 40, 0.05, 0.3, 10, 200, 1).unwrap();
    let analytic = q.analytic_cor().unwrap();
    assert!((analytic - 0.3).abs() < 1e-12);
    let r = sweep_rho(&q, &[0.05, 0.1, 0.2, 0.4, 0.8], &SweepConfig::default()).unwrap();
    assert_eq!(r.bracket, CorBracket::Bracketed);
    assert!(r.empirical_cor >= analytic / 2.0 && r.empirical_cor <= 2.0 * analytic, "{}", r.empirical_cor);
    let (lo, hi) = r.boundary.unwrap();
    assert!(hi - lo <= 1e-3 * hi);
    assert!(lo <= r.empirical_cor && r.empirical_cor <= hi);
    let largest_ok = r.entries.iter().filter(|e| !e.collapsed).map(|e| e.rho).fold(f64::MIN, f64::max);
    let smallest_bad = r.entries.iter().filter(|e| e.collapsed).map(|e| e.rho).fold(f64::MAX, f64::min);
    assert!(largest_ok <= r.empirical_cor && r.empirical_cor <= smallest_bad);
    assert!(r.monotonicity_violations.is_empty());
    assert_eq!(r.theoretical_cor, analytic);
}

#[test]
fn noiseless_surrogate_collapses_exactly_at_the_bound() {
    // Full batches, no scatter: one step lands at distance ρ from the minimizer.
    let q = QuadraticSurrogate::new(&[4.0, 1.0], 8, 0.0, 0.25, 8, 20, 0).unwrap();
    assert!(!q.probe(0.2499, 0).unwrap().collapsed);
    assert!(q.probe(0.2501, 0).unwrap().collapsed);
}

#[test]
fn sweep_rejects_bad_radius_lists() {
    let q = QuadraticSurrogate::new(&[1.0], 4, 0.0, 1.0, 4, 5, 0).unwrap();
    let cfg = SweepConfig::default();
    assert!(sweep_rho(&q, &[0.1, 0.2], &cfg).is_err());
    assert!(sweep_rho(&q, &[0.1, 0.3, 0.2], &cfg).is_err());
    let r = sweep_rho(&q, &[0.01, 0.02, 0.03], &cfg).unwrap();
    assert_eq!((r.bracket, r.empirical_cor), (CorBracket::NoneCollapsed, 0.03));
}

#[test]
fn sweeps_do_not_depend_on_the_thread_count() {
    let q = QuadraticSurrogate::new(&[2.0, 1.0, 0.5], 40, 0.05, 0.3, 10, 100, 3).unwrap();
    let rhos = [0.05, 0.1, 0.2, 0.4, 0.8];
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sweep_rho(&q, &rhos, &SweepConfig::default()).unwrap())
    };
    // NaN AUC fields rule out `==`; compare the serialized form.
    let a = serde_json::to_string(&run(1)).unwrap();
    assert_eq!(a, serde_json::to_string(&run(3)).unwrap());
}

#[test]
fn theorem_campaign_passes_on_random_instances() {
    let r = verify_theorem_campaign(20, 9).unwrap();
    assert!(r.all_passed(), "{:?}", r.failed);
    assert!(r.max_rel_gap < THEOREM_GAP_TOL);
    assert!(r.min_well_posed_value >= -1e-9);
    assert!(r.instances.iter().all(|i| i.params <= MAX_INSTANCE_PARAMS));
    assert_eq!(r, verify_theorem_campaign(20, 9).unwrap());
}

#[test]
fn zero_residual_instance_has_unit_misspecification() {
    let inst = zero_residual_instance().unwrap();
    let res = verify_instance(0, &inst);
    assert_eq!(res.estimate.unwrap().trace_xi, 0.0);
    assert_eq!(res.decomposition.unwrap().misspec, 1.0);
    assert!(res.passed);
}

#[test]
fn high_agreement_instance_approaches_the_geometric_term() {
    let inst = high_agreement_instance(1e-3).unwrap();
    let res = verify_instance(0, &inst);
    let (est, d) = (res.estimate.unwrap(), res.decomposition.unwrap());
    assert!(est.gsnr() > 1e4, "{}", est.gsnr());
    assert!(d.statistical > 1.0 - 1e-4);
    let geometric_only = est.kappa_s / est.trace_h.sqrt();
    assert!((d.lhs / geometric_only - 1.0).abs() < 1e-3, "{} vs {}", d.lhs, geometric_only);
    assert!(res.passed);
}

#[test]
fn comparison_reports_both_heads() {
    let mut cfg = quick(small(0.0, 2.0, 60), 0.05, 40);
    let dir = tempfile::tempdir().unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let r = corit_vs_baseline(&cfg, None).unwrap();
    assert_eq!(r.plain.head, HeadMode::PlainProbe);
    assert_eq!(r.corit.head, HeadMode::Corit);
    assert!(r.plain.theoretical_cor.is_finite() && r.corit.theoretical_cor.is_finite());
    assert_eq!(r.corit_exceeds_plain, r.corit.theoretical_cor > r.plain.theoretical_cor);
    assert!(dir.path().join("plain/summary.json").exists() && dir.path().join("corit/summary.json").exists());
}
