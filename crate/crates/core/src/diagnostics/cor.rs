//! Critical-radius trajectories and GSNR phase segmentation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radii below this mark the collapse zone.
pub const COLLAPSE_THRESHOLD: f64 = 0.05;

/// One instrumented optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorPoint {
    pub step: usize,
    pub grad_norm: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorReport {
    /// `(step, ‖∇L_t‖/λmax(H_t))` for every admissible step.
    pub bounds: Vec<(usize, f64)>,
    pub rho_critical: f64,
    pub argmin_step: usize,
    pub collapsed: bool,
    /// Steps dropped because `λmax ≤ 0`.
    pub excluded: Vec<usize>,
}

pub fn cor_trajectory(points: &[CorPoint]) -> Result<CorReport> {
    if points.is_empty() {
        return Err(Error::Invalid("cor_trajectory needs at least one step".into()));
    }
    let mut bounds = Vec::with_capacity(points.len());
    let mut excluded = Vec::new();
    for p in points {
        if !(p.lambda_max > 0.0) {
            log::warn!("step {}: lambda_max {} <= 0, excluded from COR", p.step, p.lambda_max);
            excluded.push(p.step);
            continue;
        }
        if !p.grad_norm.is_finite() || p.grad_norm < 0.0 || !p.lambda_max.is_finite() {
            return Err(Error::Invalid(format!("step {}: malformed COR inputs", p.step)));
        }
        bounds.push((p.step, p.grad_norm / p.lambda_max));
    }
    let (argmin_step, rho_critical) = bounds
        .iter()
        .copied()
        .reduce(|best, cur| if cur.1 < best.1 { cur } else { best })
        .ok_or_else(|| Error::Invalid("every step has lambda_max <= 0".into()))?;
    Ok(CorReport {
        bounds,
        rho_critical,
        argmin_step,
        collapsed: rho_critical < COLLAPSE_THRESHOLD,
        excluded,
    })
}

pub const SMOOTH_WINDOW: usize = 5;
pub const RISE_SLOPE: f64 = 0.05;
pub const RISE_RUN: usize = 3;
pub const DECAY_RUN: usize = 5;
/// Floor applied before taking logs so that GSNR = 0 stays finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsnrTrace {
    pub values: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// First index of the sharp-rise phase; phase (i) is `[0, rise_start)`.
    pub rise_start: Option<usize>,
    /// First index of the decay phase.
    pub decay_start: Option<usize>,
    /// Bottleneck index into `values`.
    pub t_star: usize,
    pub gsnr_t_star: f64,
    /// No rise detected: the whole run stayed in the low plateau.
    pub collapsed: bool,
}

/// Centered moving average, window shrinking at the ends.
pub fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(v.len());
            v[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

fn first_argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Segment a GSNR trajectory into plateau, rise and decay, and locate the
/// bottleneck step in the plateau. `cor_bounds`, aligned with `values`, picks
/// `t*` when given; otherwise the GSNR minimum is used.
pub fn phase_detect(values: &[f64], cor_bounds: Option<&[f64]>) -> Result<GsnrTrace> {
    if values.len() < 10 {
        return Err(Error::Invalid("phase_detect needs at least 10 steps".into()));
    }
    if values.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(Error::Invalid("GSNR values must be >= 0".into()));
    }
    if let Some(b) = cor_bounds {
        if b.len() != values.len() {
            return Err(Error::Invalid("cor_bounds must align with the GSNR trace".into()));
        }
    }
    // +∞ entries are clamped so the smoothed log-slope stays defined.
    let finite_max = values.iter().copied().filter(|v| v.is_finite()).fold(LOG_FLOOR, f64::max);
    let clamped: Vec<f64> = values.iter().map(|v| v.min(finite_max * 1e3)).collect();
    let smoothed = moving_average(&clamped, SMOOTH_WINDOW);
    let logs: Vec<f64> = smoothed.iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
    let slope: Vec<f64> = (0..logs.len()).map(|t| if t == 0 { 0.0 } else { logs[t] - logs[t - 1] }).collect();

    let run_from = |from: usize, len: usize, pred: &dyn Fn(f64) -> bool| -> Option<usize> {
        (from..slope.len()).find(|&t| t + len <= slope.len() && slope[t..t + len].iter().all(|&s| pred(s)))
    };
    // Slope at t is the change into t, so t is the first raised step.
    let rise_start = run_from(1, RISE_RUN, &|s| s > RISE_SLOPE);
    let decay_start = rise_start.and_then(|r| run_from(r + 1, DECAY_RUN, &|s| s < 0.0));

    let pick = |lo: usize, hi: usize| -> usize {
        let src: Vec<f64> = match cor_bounds {
            Some(b) => b[lo..hi].to_vec(),
            None => values[lo..hi].to_vec(),
        };
        lo + first_argmin(&src)
    };
    let (t_star, collapsed) = match rise_start {
        None => (pick(0, values.len()), true),
        Some(0) => (0, false),
        Some(r) => (pick(0, r), false),
    };
    Ok(GsnrTrace {
        values: values.to_vec(),
        smoothed,
        rise_start,
        decay_start,
        t_star,
        gsnr_t_star: values[t_star],
        collapsed,
    })
}
