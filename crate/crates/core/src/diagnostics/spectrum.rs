//! Matrix-free curvature estimates driven by a Hessian-vector oracle.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::rng::SeedTree;

/// Parameter dimension at or below which dense exact mode is used.
pub const DENSE_MAX_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub max_iters: usize,
    /// Relative tolerance on successive Rayleigh quotients.
    pub tol: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        PowerConfig {
            max_iters: 200,
            tol: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    pub lambda: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    /// `‖Hv − λv‖` at the returned unit vector.
    pub residual: f64,
    /// Shift `σ` the final run was performed with (`H + σI`).
    pub shift: f64,
    /// Rayleigh quotients of `H` at every iterate of the final run.
    pub history: Vec<f64>,
}

struct Run {
    mu: f64,
    v: Vec<f64>,
    iters: usize,
    residual: f64,
    converged: bool,
    radius: f64,
    history: Vec<f64>,
}

fn power_run<F>(hvp: &mut F, dim: usize, shift: f64, cfg: &PowerConfig) -> Result<Run>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut rng = SeedTree::new(cfg.seed).child("power").rng();
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut prev = f64::NAN;
    let mut radius = 0.0f64;
    let mut history = Vec::new();
    for it in 1..=cfg.max_iters {
        let hv = hvp(&v)?;
        if hv.len() != dim || hv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Invalid("hvp oracle returned a malformed vector".into()));
        }
        let raw = dot(&v, &hv);
        history.push(raw);
        radius = radius.max(norm(&hv));
        let av: Vec<f64> = hv.iter().zip(&v).map(|(h, x)| h + shift * x).collect();
        let mu = raw + shift;
        let residual = av.iter().zip(&v).map(|(a, x)| (a - mu * x).powi(2)).sum::<f64>().sqrt();
        let scale = mu.abs().max(f64::MIN_POSITIVE);
        let settled = (mu - prev).abs() <= cfg.tol * scale;
        if residual <= f64::EPSILON * 16.0 * scale.max(radius) || (settled && residual <= cfg.tol.sqrt() * scale) {
            return Ok(Run { mu: raw, v, iters: it, residual, converged: true, radius, history });
        }
        prev = mu;
        let n = norm(&av);
        if n == 0.0 {
            // v is in the null space of H + σI.
            return Ok(Run { mu: raw, v, iters: it, residual, converged: true, radius, history });
        }
        v = av.into_iter().map(|x| x / n).collect();
    }
    let hv = hvp(&v)?;
    let mu = dot(&v, &hv);
    let residual = hv.iter().zip(&v).map(|(h, x)| (h - mu * x).powi(2)).sum::<f64>().sqrt();
    Ok(Run {
        mu,
        v,
        iters: cfg.max_iters,
        residual,
        converged: false,
        radius: radius.max(norm(&hv)),
        history,
    })
}

/// Largest eigenvalue of a symmetric operator by power iteration.
///
/// The unshifted run finds the eigenvalue of largest magnitude. When that is
/// negative, or the run stalls between `±λ`, the iteration is repeated on
/// `H + σI` with `σ` the observed spectral radius, which makes the top of the
/// spectrum dominant.
pub fn lambda_max<F>(mut hvp: F, dim: usize, cfg: &PowerConfig) -> Result<PowerResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 || cfg.max_iters == 0 || !(cfg.tol > 0.0) {
        return Err(Error::Invalid("lambda_max needs dim >= 1, iters >= 1 and tol > 0".into()));
    }
    let first = power_run(&mut hvp, dim, 0.0, cfg)?;
    if first.converged && first.mu >= 0.0 {
        return Ok(PowerResult {
            lambda: first.mu,
            vector: first.v,
            iterations: first.iters,
            residual: first.residual,
            shift: 0.0,
            history: first.history,
        });
    }
    let shift = if first.converged { first.mu.abs() } else { first.radius };
    let second = power_run(&mut hvp, dim, shift, cfg)?;
    if !second.converged {
        return Err(Error::NonConvergence {
            iters: first.iters + second.iters,
            rayleigh: second.mu,
            residual: second.residual,
        });
    }
    Ok(PowerResult {
        lambda: second.mu,
        vector: second.v,
        iterations: first.iters + second.iters,
        residual: second.residual,
        shift,
        history: second.history,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TraceMode {
    /// Exact when `dim ≤ DENSE_MAX_DIM`, Hutchinson otherwise.
    #[default]
    Auto,
    Exact,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Standard error of the mean; 0 in exact mode.
    pub std_error: f64,
    pub probes: usize,
    pub exact: bool,
}

/// `Tr(H)` from Hessian-vector products: the sum of `eᵢᵀHeᵢ` in exact mode,
/// the Hutchinson estimator with Rademacher probes otherwise.
pub fn hessian_trace<F>(mut hvp: F, dim: usize, probes: usize, mode: TraceMode, seed: u64) -> Result<TraceEstimate>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 {
        return Err(Error::Invalid("hessian_trace needs dim >= 1".into()));
    }
    let exact = match mode {
        TraceMode::Exact => true,
        TraceMode::Stochastic => false,
        TraceMode::Auto => dim <= DENSE_MAX_DIM,
    };
    if exact {
        let mut tr = 0.0;
        let mut e = vec![0.0; dim];
        for i in 0..dim {
            e[i] = 1.0;
            tr += hvp(&e)?[i];
            e[i] = 0.0;
        }
        return Ok(TraceEstimate {
            mean: tr,
            std_error: 0.0,
            probes: dim,
            exact: true,
        });
    }
    if probes == 0 {
        return Err(Error::Invalid("hessian_trace needs probes >= 1".into()));
    }
    let mut rng = SeedTree::new(seed).child("hutchinson").rng();
    let mut samples = Vec::with_capacity(probes);
    for _ in 0..probes {
        let z: Vec<f64> = (0..dim).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        samples.push(dot(&z, &hvp(&z)?));
    }
    let mean = samples.iter().sum::<f64>() / probes as f64;
    let std_error = if probes > 1 {
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (probes - 1) as f64;
        (var / probes as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(TraceEstimate {
        mean,
        std_error,
        probes,
        exact: false,
    })
}
