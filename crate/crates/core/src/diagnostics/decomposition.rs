use serde::{Deserialize, Serialize};

use super::gsnr::ratio;
use super::SpectralEstimate;
use crate::error::{Error, Result};

/// Tolerance of the well-posedness check `1 + TrΞ/TrH ≥ −tol`.
pub const WELL_POSED_TOL: f64 = 1e-9;

/// Floor on the LHS in the relative gap.
pub const GAP_FLOOR: f64 = 1e-12;

/// `TrΞ = TrCov + ‖∇L‖² − TrH`, rejecting inputs whose misspecification
/// radicand `1 + TrΞ/TrH` would be negative.
pub fn misspecification_trace(trace_cov: f64, grad_norm_sq: f64, trace_h: f64) -> Result<f64> {
    if !(trace_cov.is_finite() && grad_norm_sq.is_finite() && trace_h.is_finite()) {
        return Err(Error::Invalid("misspecification inputs must be finite".into()));
    }
    let xi = trace_cov + grad_norm_sq - trace_h;
    if trace_h > 0.0 {
        let value = 1.0 + xi / trace_h;
        if value < -WELL_POSED_TOL {
            return Err(Error::WellPosedness { value });
        }
    }
    Ok(xi)
}

/// `f(s) = √(s/(1+s))`, with `f(∞) = 1`.
pub fn statistical_term(s: f64) -> Result<f64> {
    if s.is_nan() || s < 0.0 {
        return Err(Error::Invalid(format!("statistical term needs s >= 0, got {s}")));
    }
    if s.is_infinite() {
        return Ok(1.0);
    }
    Ok((s / (1.0 + s)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    /// `κ_s/√TrH`.
    pub geometric: f64,
    /// `√(1 + TrΞ/TrH)`.
    pub misspec: f64,
    /// `f(GSNR)`.
    pub statistical: f64,
    /// `‖∇L‖/λmax`, computed directly.
    pub lhs: f64,
    /// Product of the three factors.
    pub rhs: f64,
    pub rel_gap: f64,
}

/// Evaluate both sides of the stability decomposition independently.
pub fn verify_decomposition(est: &SpectralEstimate) -> Result<DecompositionReport> {
    if !(est.lambda_max > 0.0) || !(est.trace_h > 0.0) {
        return Err(Error::Invalid(format!(
            "decomposition needs lambda_max > 0 and trace_h > 0 (got {}, {})",
            est.lambda_max, est.trace_h
        )));
    }
    let radicand = 1.0 + est.trace_xi / est.trace_h;
    if radicand < -WELL_POSED_TOL {
        return Err(Error::WellPosedness { value: radicand });
    }
    let geometric = est.kappa_s / est.trace_h.sqrt();
    let misspec = radicand.max(0.0).sqrt();
    let statistical = statistical_term(ratio(est.grad_norm_sq, est.trace_cov))?;
    let lhs = est.grad_norm_sq.sqrt() / est.lambda_max;
    let rhs = geometric * misspec * statistical;
    let rel_gap = (lhs - rhs).abs() / lhs.max(GAP_FLOOR);
    Ok(DecompositionReport {
        geometric,
        misspec,
        statistical,
        lhs,
        rhs,
        rel_gap,
    })
}
