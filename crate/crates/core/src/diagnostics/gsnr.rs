use crate::error::{Error, Result};

/// Mean gradient and population trace-covariance (divide by `M`) of a set of
/// per-sample gradients.
pub fn gradient_moments(grads: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    let m = grads.len();
    if m == 0 {
        return Err(Error::Invalid("no per-sample gradients".into()));
    }
    let p = grads[0].len();
    if grads.iter().any(|g| g.len() != p) {
        return Err(Error::Invalid("ragged per-sample gradients".into()));
    }
    let mut mean = vec![0.0; p];
    for g in grads {
        for (a, &v) in mean.iter_mut().zip(g) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    // Two-pass centered sum keeps the trace exact for identical rows.
    let tr: f64 = grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(v, a)| (v - a) * (v - a)).sum::<f64>())
        .sum::<f64>()
        / m as f64;
    Ok((mean, tr))
}

/// Gradient signal-to-noise ratio `‖ḡ‖² / (TrCov/B)`. Returns `+∞` when the
/// gradients agree exactly but are nonzero, and `0` when the mean vanishes.
pub fn gsnr(per_sample_grads: &[Vec<f64>], batch_size: usize) -> Result<f64> {
    if per_sample_grads.len() < 2 {
        return Err(Error::Invalid("gsnr needs at least two per-sample gradients".into()));
    }
    if batch_size == 0 {
        return Err(Error::Invalid("batch_size must be positive".into()));
    }
    let (mean, tr_cov) = gradient_moments(per_sample_grads)?;
    let signal: f64 = mean.iter().map(|v| v * v).sum();
    Ok(ratio(signal, tr_cov / batch_size as f64))
}

/// `signal / noise` with the GSNR sentinels.
pub fn ratio(signal: f64, noise: f64) -> f64 {
    if signal == 0.0 {
        0.0
    } else if noise <= f64::EPSILON * f64::EPSILON * signal {
        f64::INFINITY
    } else {
        signal / noise
    }
}
