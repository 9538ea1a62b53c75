//! Stability measurements along a training trajectory: gradient
//! signal-to-noise, Hessian spectrum and trace, the misspecification residual,
//! the three-factor decomposition of the critical radius, phase segmentation
//! and loss-landscape slices.
//!
//! Every estimate is a pure function of a parameter snapshot and a sample set.
//! `trace_cov` always denotes the trace covariance of the *mini-batch*
//! gradient, i.e. the population per-sample trace divided by the batch size.

mod cor;
mod decomposition;
mod gsnr;
mod landscape;
mod spectrum;

pub use cor::{
    cor_trajectory, moving_average, phase_detect, CorPoint, CorReport, GsnrTrace, COLLAPSE_THRESHOLD, DECAY_RUN,
    LOG_FLOOR, RISE_RUN, RISE_SLOPE, SMOOTH_WINDOW,
};
pub use decomposition::{
    misspecification_trace, statistical_term, verify_decomposition, DecompositionReport, GAP_FLOOR, WELL_POSED_TOL,
};
pub use gsnr::{gradient_moments, gsnr, ratio as gsnr_ratio};
pub use landscape::{landscape_directions, landscape_sample, LandscapeGrid};
pub use spectrum::{hessian_trace, lambda_max, PowerConfig, PowerResult, TraceEstimate, TraceMode, DENSE_MAX_DIM};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::jacobi_eigenvalues;
use crate::objective::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralEstimate {
    pub step: usize,
    pub lambda_max: f64,
    pub trace_h: f64,
    /// `trace_h / lambda_max`, NaN when `lambda_max ≤ 0`.
    pub kappa_s: f64,
    pub trace_cov: f64,
    pub grad_norm_sq: f64,
    pub trace_xi: f64,
    /// All quantities assembled densely rather than estimated.
    pub exact: bool,
}

impl SpectralEstimate {
    /// Derive `κ_s` and `TrΞ` from the measured quantities.
    pub fn from_parts(step: usize, lambda_max: f64, trace_h: f64, trace_cov: f64, grad_norm_sq: f64) -> Result<Self> {
        if trace_cov < 0.0 || grad_norm_sq < 0.0 {
            return Err(Error::Invalid("trace_cov and grad_norm_sq must be >= 0".into()));
        }
        Ok(SpectralEstimate {
            step,
            lambda_max,
            trace_h,
            kappa_s: if lambda_max > 0.0 { trace_h / lambda_max } else { f64::NAN },
            trace_cov,
            grad_norm_sq,
            trace_xi: misspecification_trace(trace_cov, grad_norm_sq, trace_h)?,
            exact: false,
        })
    }

    pub fn gsnr(&self) -> f64 {
        gsnr::ratio(self.grad_norm_sq, self.trace_cov)
    }

    /// `‖∇L‖/λmax`, NaN when `λmax ≤ 0`.
    pub fn cor_bound(&self) -> f64 {
        if self.lambda_max > 0.0 {
            self.grad_norm_sq.sqrt() / self.lambda_max
        } else {
            f64::NAN
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub trace_mode: TraceMode,
    pub probes: usize,
    pub power: PowerConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            trace_mode: TraceMode::Auto,
            probes: 100,
            power: PowerConfig::default(),
        }
    }
}

/// Full spectral snapshot of `obj` at `w` over the samples `idx`, treating
/// them as the population a mini-batch of `batch_size` is drawn from. Dense
/// exact mode applies when `P ≤ DENSE_MAX_DIM` unless stochastic mode is forced.
pub fn spectral_estimate(
    obj: &dyn Objective,
    w: &[f64],
    idx: &[usize],
    batch_size: usize,
    step: usize,
    cfg: &EstimatorConfig,
) -> Result<SpectralEstimate> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let grads = obj.per_sample_grads(w, idx)?;
    let (mean, tr_pop) = gradient_moments(&grads)?;
    let grad_norm_sq: f64 = mean.iter().map(|v| v * v).sum();
    let trace_cov = tr_pop / batch_size as f64;
    let dense = match cfg.trace_mode {
        TraceMode::Exact => true,
        TraceMode::Stochastic => false,
        TraceMode::Auto => obj.dim() <= DENSE_MAX_DIM,
    };
    let (lambda, trace_h) = if dense {
        let h = obj.hessian(w, idx)?;
        let ev = jacobi_eigenvalues(&h);
        (*ev.last().expect("dim >= 1"), h.trace())
    } else {
        let power = lambda_max(|v| obj.hvp(w, idx, v), obj.dim(), &cfg.power)?;
        let tr = hessian_trace(|v| obj.hvp(w, idx, v), obj.dim(), cfg.probes, TraceMode::Stochastic, cfg.power.seed)?;
        (power.lambda, tr.mean)
    };
    let mut est = SpectralEstimate::from_parts(step, lambda, trace_h, trace_cov, grad_norm_sq)?;
    est.exact = dense;
    Ok(est)
}

/// One line of `diagnostics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSnapshot {
    pub step: usize,
    #[serde(with = "json_float")]
    pub gsnr: f64,
    #[serde(with = "json_float")]
    pub lambda_max: f64,
    #[serde(with = "json_float")]
    pub trace_h: f64,
    #[serde(with = "json_float")]
    pub kappa_s: f64,
    #[serde(with = "json_float")]
    pub trace_cov: f64,
    #[serde(with = "json_float")]
    pub grad_norm_sq: f64,
    #[serde(with = "json_float")]
    pub trace_xi: f64,
    #[serde(with = "json_float")]
    pub cor_bound: f64,
    pub decomposition: Option<DecompositionReport>,
}

impl DiagnosticSnapshot {
    /// The decomposition is omitted when it is undefined (`λmax ≤ 0` or `TrH ≤ 0`).
    pub fn from_estimate(est: &SpectralEstimate) -> Self {
        DiagnosticSnapshot {
            step: est.step,
            gsnr: est.gsnr(),
            lambda_max: est.lambda_max,
            trace_h: est.trace_h,
            kappa_s: est.kappa_s,
            trace_cov: est.trace_cov,
            grad_norm_sq: est.grad_norm_sq,
            trace_xi: est.trace_xi,
            cor_bound: est.cor_bound(),
            decomposition: verify_decomposition(est).ok(),
        }
    }
}

/// JSON has no infinities: `±∞` are written as the strings `"inf"`/`"-inf"`
/// and NaN as `null`.
pub mod json_float {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_none()
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
        Null(()),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            Some(Repr::Num(v)) => Ok(v),
            Some(Repr::Tag(t)) if t == "inf" => Ok(f64::INFINITY),
            Some(Repr::Tag(t)) if t == "-inf" => Ok(f64::NEG_INFINITY),
            Some(Repr::Tag(t)) => Err(serde::de::Error::custom(format!("unknown float tag {t:?}"))),
            Some(Repr::Null(())) | None => Ok(f64::NAN),
        }
    }
}
