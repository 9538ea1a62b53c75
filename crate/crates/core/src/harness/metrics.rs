use crate::error::{Error, Result};

/// Average ranks (1-based) with ties sharing the mean of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// ROC AUC as the Mann–Whitney statistic `(R₊ − n₊(n₊+1)/2) / (n₊n₋)`.
pub fn compute_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("AUC needs both classes".into()));
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((r_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// `(perturbed − raw)/raw`.
pub fn relative_auc(raw: f64, perturbed: f64) -> Result<f64> {
    if raw <= 0.0 || !raw.is_finite() {
        return Err(Error::Invalid(format!("relative AUC needs raw > 0, got {raw}")));
    }
    Ok((perturbed - raw) / raw)
}

/// Least-squares line `y = a + b·x`; returns `(slope, intercept, r²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("linear fit needs >= 2 aligned points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Invalid("linear fit needs distinct x".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, my - slope * mx, r2))
}

/// Spearman rank correlation (Pearson correlation of average ranks).
/// Undefined, and an error, when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("spearman needs >= 2 aligned points".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    if rx.iter().all(|&r| r == rx[0]) || ry.iter().all(|&r| r == ry[0]) {
        return Err(Error::Invalid("spearman is undefined for a constant input".into()));
    }
    let (_, _, r2) = linear_fit(&rx, &ry)?;
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(r2.sqrt().copysign(cov))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(compute_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(compute_auc(&[0.3; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
        assert_eq!(compute_auc(&[0.1, 0.7, 0.3, 0.9], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(compute_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting() {
        let scores = [0.3, 0.1, 0.3, 0.9, 0.5, 0.5, 0.2, 0.3, 0.8, 0.1];
        let labels = [1, 0, 0, 1, 0, 1, 1, 0, 1, 0];
        let a = compute_auc(&scores, &labels).unwrap();
        assert!((a - brute_force_auc(&scores, &labels)).abs() < 1e-15);
    }

    #[test]
    fn relative_auc_examples() {
        assert!((relative_auc(0.9, 0.81).unwrap() + 0.1).abs() < 1e-12);
        assert_eq!(relative_auc(0.7, 0.7).unwrap(), 0.0);
        assert!((relative_auc(0.8, 0.88).unwrap() - 0.1).abs() < 1e-12);
        assert!(relative_auc(0.0, 0.5).is_err());
    }

    #[test]
    fn regression_helpers() {
        let (s, a, r2) = linear_fit(&[0.0, 1.0, 2.0], &[1.0, 3.0, 5.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-15 && (a - 1.0).abs() < 1e-15 && (r2 - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0, 3.0], &[0.5, 0.5, 0.5]).is_err());
        assert!(spearman(&[7.0, 7.0], &[1.0, 2.0]).is_err());
    }
}
