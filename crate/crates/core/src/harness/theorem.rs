use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    spectral_estimate, verify_decomposition, DecompositionReport, EstimatorConfig, SpectralEstimate, TraceMode,
    WELL_POSED_TOL,
};
use crate::error::Result;
use crate::objective::SoftmaxRegression;
use crate::rng::SeedTree;

/// Largest relative gap between the two sides that still passes.
pub const THEOREM_GAP_TOL: f64 = 1e-6;
/// Parameter budget of campaign instances.
pub const MAX_INSTANCE_PARAMS: usize = 50;

/// A softmax-regression problem together with the point it is evaluated at.
#[derive(Debug, Clone)]
pub struct TheoremInstance {
    pub objective: SoftmaxRegression,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub samples: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub params: usize,
    pub estimate: Option<SpectralEstimate>,
    pub decomposition: Option<DecompositionReport>,
    /// `1 + TrΞ/TrH`.
    pub well_posed_value: Option<f64>,
    pub passed: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub seed: u64,
    pub instances: Vec<InstanceResult>,
    pub passed: usize,
    pub failed: Vec<usize>,
    pub max_rel_gap: f64,
    pub min_well_posed_value: f64,
}

impl TheoremReport {
    pub fn all_passed(&self) -> bool {
        self.failed.is_empty()
    }
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Random instance with `(d + 1)·C ≤ 50` parameters, 4 to 16 samples and
/// Gaussian weights.
pub fn random_instance(tree: SeedTree) -> Result<TheoremInstance> {
    let mut rng = tree.rng();
    let classes = rng.gen_range(2..=4usize);
    let d = rng.gen_range(1..=MAX_INSTANCE_PARAMS / classes - 1);
    let m = rng.gen_range(4..=16usize);
    let inputs: Vec<Vec<f64>> = (0..m).map(|_| (0..d).map(|_| normal(&mut rng)).collect()).collect();
    let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
    let objective = SoftmaxRegression::new(inputs, labels, classes)?;
    let scale = rng.gen_range(0.1..1.5);
    let weights = (0..crate::objective::Objective::dim(&objective)).map(|_| scale * normal(&mut rng)).collect();
    Ok(TheoremInstance { objective, weights })
}

/// Two classes, one input, dyadic inputs at `W = 0`: every quantity is exact
/// in binary floating point and the misspecification residual vanishes.
pub fn zero_residual_instance() -> Result<TheoremInstance> {
    let objective = SoftmaxRegression::new(vec![vec![1.0], vec![-0.5], vec![0.25], vec![2.0]], vec![0, 1, 1, 0], 2)?;
    Ok(TheoremInstance { objective, weights: vec![0.0; 4] })
}

/// Every sample shares one label and nearly the same input, evaluated at
/// uniform predictions: per-sample gradients agree, so the GSNR is large and
/// the statistical factor approaches 1.
pub fn high_agreement_instance(spread: f64) -> Result<TheoremInstance> {
    let base = [0.8, -0.3, 0.5];
    let inputs: Vec<Vec<f64>> = (0..8)
        .map(|i| base.iter().enumerate().map(|(j, b)| b + spread * (((i * 3 + j) % 5) as f64 - 2.0)).collect())
        .collect();
    let objective = SoftmaxRegression::new(inputs, vec![1; 8], 3)?;
    Ok(TheoremInstance { objective, weights: vec![0.0; 12] })
}

/// Exact dense estimate over all samples with single-sample batches.
pub fn exact_estimate(inst: &TheoremInstance) -> Result<SpectralEstimate> {
    let cfg = EstimatorConfig { trace_mode: TraceMode::Exact, ..EstimatorConfig::default() };
    let obj = &inst.objective;
    spectral_estimate(obj, &inst.weights, &crate::objective::Objective::all(obj), 1, 0, &cfg)
}

pub fn verify_instance(index: usize, inst: &TheoremInstance) -> InstanceResult {
    verify_instance_with(index, inst, THEOREM_GAP_TOL)
}

/// [`verify_instance`] with a caller-chosen gap tolerance.
pub fn verify_instance_with(index: usize, inst: &TheoremInstance, gap_tol: f64) -> InstanceResult {
    let obj = &inst.objective;
    let mut r = InstanceResult {
        index,
        samples: obj.inputs.len(),
        input_dim: obj.input_dim(),
        classes: obj.classes,
        params: crate::objective::Objective::dim(obj),
        estimate: None,
        decomposition: None,
        well_posed_value: None,
        passed: false,
        error: None,
    };
    let est = match exact_estimate(inst) {
        Ok(e) => e,
        Err(e) => {
            r.error = Some(e.to_string());
            return r;
        }
    };
    r.estimate = Some(est);
    if est.trace_h > 0.0 {
        r.well_posed_value = Some(1.0 + est.trace_xi / est.trace_h);
    }
    match verify_decomposition(&est) {
        Ok(d) => {
            r.passed = d.rel_gap < gap_tol && r.well_posed_value.map_or(true, |v| v >= -WELL_POSED_TOL);
            r.decomposition = Some(d);
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    r
}

/// Verify the decomposition on `n` random instances in parallel. The report
/// is independent of the thread count.
pub fn verify_theorem_campaign(n: usize, seed: u64) -> Result<TheoremReport> {
    verify_theorem_campaign_with(n, seed, THEOREM_GAP_TOL)
}

pub fn verify_theorem_campaign_with(n: usize, seed: u64, gap_tol: f64) -> Result<TheoremReport> {
    if !(gap_tol >= 0.0) {
        return Err(crate::Error::Invalid("gap tolerance must be >= 0".into()));
    }
    if n == 0 {
        return Err(crate::Error::Invalid("campaign needs at least one instance".into()));
    }
    let tree = SeedTree::new(seed).child("theorem");
    let instances: Vec<InstanceResult> = (0..n)
        .into_par_iter()
        .map(|i| random_instance(tree.index(i as u64)).map(|inst| verify_instance_with(i, &inst, gap_tol)))
        .collect::<Result<_>>()?;
    let failed: Vec<usize> = instances.iter().filter(|r| !r.passed).map(|r| r.index).collect();
    for i in &failed {
        log::warn!("theorem instance {i} failed: {:?}", instances[*i]);
    }
    Ok(TheoremReport {
        seed,
        passed: n - failed.len(),
        max_rel_gap: instances.iter().filter_map(|r| r.decomposition.map(|d| d.rel_gap)).fold(0.0, f64::max),
        min_well_posed_value: instances.iter().filter_map(|r| r.well_posed_value).fold(f64::INFINITY, f64::min),
        failed,
        instances,
    })
}
