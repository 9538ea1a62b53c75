use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::linalg::SymMatrix;
use crate::objective::{LogisticObjective, QuadraticObjective};

fn half_square(lambda: f64) -> QuadraticObjective {
    QuadraticObjective::new(SymMatrix::diag(&[lambda]), vec![vec![0.0]]).unwrap()
}

fn logistic(seed: u64, n: usize) -> LogisticObjective {
    let mut rng = SeedTree::new(seed).rng();
    let feats: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..4)
                .map(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z + if i % 2 == 1 && k == 0 { 1.0 } else { 0.0 }
                })
                .collect()
        })
        .collect();
    LogisticObjective::new(feats, (0..n).map(|i| (i % 2) as u8).collect()).unwrap()
}

#[test]
fn sgd_on_half_square() {
    let q = half_square(1.0);
    let mut w = vec![1.0];
    sgd_step(&q, &mut w, &[0], 0.1).unwrap();
    assert_eq!(w, vec![0.9]);
    let mut w = vec![0.0];
    sgd_step(&q, &mut w, &[0], 0.1).unwrap();
    assert_eq!(w, vec![0.0]);
    assert!(sgd_step(&q, &mut w, &[], 0.1).is_err());
}

#[test]
fn sgd_uses_the_batch_average() {
    let q = QuadraticObjective::new(SymMatrix::identity(2), vec![vec![1.0, 2.0], vec![3.0, -2.0]]).unwrap();
    let mut w = vec![0.5, 0.5];
    sgd_step(&q, &mut w, &[0, 1], 0.2).unwrap();
    // Per-sample gradients (−0.5, −1.5) and (−2.5, 2.5): mean (−1.5, 0.5).
    let want = [0.5 - 0.2 * -1.5, 0.5 - 0.2 * 0.5];
    assert_eq!(w, want);
}

#[test]
fn sam_closed_form_quadratics() {
    let mut w = vec![1.0];
    let r = sam_step(&half_square(1.0), &mut w, &[0], 0.5, 0.1, 0, None).unwrap();
    assert_eq!(r.grad_norm, 1.0);
    assert!((w[0] - 0.85).abs() < 1e-15);
    let mut w = vec![1.0];
    let r = sam_step(&half_square(2.0), &mut w, &[0], 0.25, 0.1, 0, None).unwrap();
    assert_eq!(r.grad_norm, 2.0);
    assert!((w[0] - 0.75).abs() < 1e-15);
}

#[test]
fn zero_gradient_means_zero_perturbation() {
    let q = half_square(3.0);
    let mut w = vec![0.0];
    sam_step(&q, &mut w, &[0], 0.5, 0.1, 0, None).unwrap();
    assert_eq!(w, vec![0.0]);
}

#[test]
fn sam_step_records_population_terms() {
    let q = QuadraticObjective::new(SymMatrix::identity(1), vec![vec![-1.0], vec![1.0]]).unwrap();
    let mut w = vec![0.1];
    let r = sam_step(&q, &mut w, &[0], 0.0, 0.1, 7, Some(&[0, 1])).unwrap();
    assert_eq!(r.step, 7);
    assert!((r.pop_grad_norm.unwrap() - 0.1).abs() < 1e-15);
    assert!((r.inner_product.unwrap() - 0.1 * 1.1).abs() < 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn rho_zero_reproduces_sgd_bit_for_bit(seed in 0u64..10_000, batch in 1usize..9) {
        let obj = logistic(seed, 24);
        let cfg = SamConfig { rho: 0.0, learning_rate: 0.05, batch_size: batch, steps: 60, seed };
        let mut w_sam = vec![0.0; obj.dim()];
        train(&obj, &mut w_sam, &cfg, &obj.all(), |_| false, |_, _| Ok(true)).unwrap();
        let mut w_sgd = vec![0.0; obj.dim()];
        let mut sampler = BatchSampler::new(obj.len(), batch, seed).unwrap();
        for _ in 0..60 {
            sgd_step(&obj, &mut w_sgd, &sampler.next_batch(), 0.05).unwrap();
        }
        prop_assert_eq!(
            w_sam.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            w_sgd.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn perturbation_has_norm_rho(
        w in proptest::collection::vec(-3.0f64..3.0, 3),
        rho in 0.001f64..2.0,
    ) {
        prop_assume!(w.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        // Identity Hessian centered at 0: g̃ − g = ε exactly.
        let q = QuadraticObjective::new(SymMatrix::identity(3), vec![vec![0.0; 3]]).unwrap();
        let gt = perturbed_gradient(&q, &w, &[0], &w, rho).unwrap();
        let eps: Vec<f64> = gt.iter().zip(&w).map(|(a, b)| a - b).collect();
        prop_assert!((norm(&eps) - rho).abs() < 1e-12);
    }
}

#[test]
fn sampler_draws_without_replacement_and_drops_the_remainder() {
    let mut s = BatchSampler::new(10, 3, 5).unwrap();
    for _epoch in 0..4 {
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
    assert!(BatchSampler::new(3, 4, 0).is_err());
}

#[test]
fn probe_without_perturbation_is_unbiased() {
    let obj = logistic(3, 60);
    let w = vec![0.1, -0.2, 0.05, 0.3, 0.0];
    let p = stability_probe(&obj, &w, &obj.all(), 0.0, 5, 400, 1).unwrap();
    assert!((p.mean - p.grad_norm_sq).abs() <= 3.0 * p.std_error, "{p:?}");
}

#[test]
fn probe_on_two_sample_problem() {
    let q = QuadraticObjective::new(SymMatrix::identity(1), vec![vec![-1.0], vec![1.0]]).unwrap();
    let w = [0.1];
    let grads = q.per_sample_grads(&w, &[0, 1]).unwrap();
    assert!((grads[0][0] - 1.1).abs() < 1e-15 && (grads[1][0] + 0.9).abs() < 1e-15);
    for rho in [0.05, 0.3, 2.0] {
        let p = stability_probe(&q, &w, &[0, 1], rho, 1, 2000, 11).unwrap();
        assert!((p.mean - 0.01).abs() <= 3.0 * p.std_error, "rho {rho}: {p:?}");
        // Exhaustive over both single-sample batches.
        let exact: f64 = [0usize, 1]
            .iter()
            .map(|&i| {
                let g = q.loss_grad(&w, &[i]).unwrap().1;
                0.1 * perturbed_gradient(&q, &w, &[i], &g, rho).unwrap()[0]
            })
            .sum::<f64>()
            / 2.0;
        assert!((exact - 0.01).abs() < 1e-15);
        // Positive whether or not ρ is under the sufficient bound 0.1.
        assert!(exact > 0.0);
    }
    assert!(stability_probe(&q, &w, &[0, 1], 0.1, 1, 1, 0).is_err());
}

#[test]
fn probe_rejects_single_class_data() {
    let obj = LogisticObjective::new(vec![vec![1.0], vec![2.0], vec![0.5]], vec![1, 1, 1]).unwrap();
    assert!(stability_probe(&obj, &[0.0, 0.0], &obj.all(), 0.1, 1, 4, 0).is_err());
}

fn noisy_quadratic(seed: u64) -> (QuadraticObjective, f64) {
    let mut rng = SeedTree::new(seed).rng();
    let diag: Vec<f64> = (0..3).map(|_| rng.gen_range(0.2..3.0)).collect();
    let lmax = diag.iter().cloned().fold(0.0, f64::max);
    let centers = (0..20)
        .map(|_| (0..3).map(|_| 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect())
        .collect();
    (QuadraticObjective::new(SymMatrix::diag(&diag), centers).unwrap(), lmax)
}

#[test]
fn sufficient_radius_keeps_probe_positive() {
    let seeds = 100;
    let mut positive = 0;
    for seed in 0..seeds {
        let (q, lmax) = noisy_quadratic(seed);
        let mut rng = SeedTree::new(seed).child("w").rng();
        let w: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (_, g) = q.loss_grad(&w, &q.all()).unwrap();
        let rho = 0.9 * norm(&g) / lmax;
        let p = stability_probe(&q, &w, &q.all(), rho, 4, 200, seed).unwrap();
        if p.mean > 0.0 {
            positive += 1;
        }
    }
    assert!(positive >= 99, "{positive}/{seeds}");
}

/// Windows where the probe is positive and the radius sits under the
/// sufficient bound `‖∇L‖/λmax` at every step; full-data batches remove
/// sampling noise from the dynamics.
#[test]
fn stable_windows_descend_on_convex_quadratics() {
    for seed in 0..10 {
        let (q, lmax) = noisy_quadratic(seed);
        let idx = q.all();
        let (rho, lr) = (0.05, 0.5 / lmax);
        let mut w = vec![40.0, -40.0, 40.0];
        let mut loss = Vec::new();
        let mut stable = Vec::new();
        for step in 0..80 {
            let (l, g) = q.loss_grad(&w, &idx).unwrap();
            loss.push(l);
            let p = stability_probe(&q, &w, &idx, rho, 4, 200, step as u64).unwrap();
            stable.push(p.mean > 0.0 && rho < norm(&g) / lmax);
            sam_step(&q, &mut w, &idx, rho, lr, step, None).unwrap();
        }
        let mut checked = 0;
        for t in 0..loss.len() - 10 {
            if stable[t..t + 10].iter().all(|&p| p) {
                checked += 1;
                for s in t..t + 10 {
                    assert!(loss[s + 1] <= loss[s], "seed {seed} step {s}");
                }
            }
        }
        assert!(checked > 0);
    }
}

#[test]
fn step_records_csv() {
    let recs = [
        StepRecord { step: 0, loss: 0.5, grad_norm: 1.0, pop_grad_norm: Some(0.25), inner_product: Some(0.1), rho: 0.07, failed: false },
        StepRecord { step: 1, loss: 0.4, grad_norm: 0.9, pop_grad_norm: None, inner_product: None, rho: 0.07, failed: false },
    ];
    let mut out = Vec::new();
    write_step_records(&recs, &mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,loss,grad_norm,pop_grad_norm,inner_product,rho");
    assert_eq!(lines[1], "0,0.5,1.0,0.25,0.1,0.07");
    assert_eq!(lines[2], "1,0.4,0.9,,,0.07");
}

#[test]
fn non_finite_gradients_are_reported_with_the_stage() {
    let q = half_square(1.0);
    let mut w = vec![f64::INFINITY];
    let err = sam_step(&q, &mut w, &[0], 0.1, 0.1, 3, None).unwrap_err();
    assert!(matches!(err, Error::NonFiniteStep { step: 3, .. }), "{err}");
}
