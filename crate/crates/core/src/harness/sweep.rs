use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::features::{extract_features, FeatureSet};
use super::run::run_on_features;
use crate::diagnostics::json_float;
use crate::error::{Error, Result};
use crate::linalg::{norm, SymMatrix};
use crate::objective::{Objective, QuadraticObjective};
use crate::optim::{sam_step, BatchSampler};

/// Outcome of one seeded training run at a fixed radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOutcome {
    pub train_auc: f64,
    pub test_auc: f64,
    pub collapsed: bool,
}

/// A family of training runs indexed by radius and seed.
pub trait Experiment: Sync {
    fn probe(&self, rho: f64, seed: u64) -> Result<ProbeOutcome>;

    /// `‖∇L_t‖/λmax` minimum of the reference trajectory, when defined.
    fn theoretical_cor(&self) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    /// Every probed radius is run once per seed; collapse is the majority vote.
    pub seeds: Vec<u64>,
    /// Bisection stops once `hi − lo ≤ resolution·hi`.
    pub resolution: f64,
    pub max_bisections: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { seeds: vec![0, 1, 2], resolution: 1e-3, max_bisections: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub rho: f64,
    /// Means over seeds; NaN when the experiment has no AUC.
    #[serde(with = "json_float")]
    pub train_auc: f64,
    #[serde(with = "json_float")]
    pub test_auc: f64,
    pub collapsed: bool,
    pub collapsed_votes: usize,
    pub runs: usize,
    /// Radius added by bisection rather than taken from the list.
    pub refined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorBracket {
    /// A collapsed radius sits above a non-collapsed one; bisection applied.
    Bracketed,
    /// Even the smallest radius collapsed; `empirical_cor` is that radius.
    AllCollapsed,
    /// No radius collapsed; `empirical_cor` is the largest radius.
    NoneCollapsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    pub empirical_cor: f64,
    pub bracket: CorBracket,
    /// Largest non-collapsed and smallest collapsed radius of the boundary pair.
    pub boundary: Option<(f64, f64)>,
    #[serde(with = "json_float")]
    pub theoretical_cor: f64,
    /// Non-collapsed list radii above the first collapsed one: reported, not smoothed.
    pub monotonicity_violations: Vec<f64>,
}

fn probe_entry(exp: &dyn Experiment, rho: f64, seeds: &[u64], refined: bool) -> Result<SweepEntry> {
    let outs: Vec<ProbeOutcome> = seeds.par_iter().map(|&s| exp.probe(rho, s)).collect::<Result<_>>()?;
    Ok(summarize(rho, &outs, refined))
}

fn summarize(rho: f64, outs: &[ProbeOutcome], refined: bool) -> SweepEntry {
    let n = outs.len() as f64;
    let votes = outs.iter().filter(|o| o.collapsed).count();
    SweepEntry {
        rho,
        train_auc: outs.iter().map(|o| o.train_auc).sum::<f64>() / n,
        test_auc: outs.iter().map(|o| o.test_auc).sum::<f64>() / n,
        collapsed: 2 * votes > outs.len(),
        collapsed_votes: votes,
        runs: outs.len(),
        refined,
    }
}

/// Train at every radius of `rhos` (ascending, ≥ 3 values), then refine the
/// first collapse boundary by bisection.
pub fn sweep_rho(exp: &dyn Experiment, rhos: &[f64], cfg: &SweepConfig) -> Result<SweepResult> {
    if rhos.len() < 3 {
        return Err(Error::Invalid("sweep needs at least 3 radii".into()));
    }
    if rhos.windows(2).any(|p| !(p[0] < p[1])) || !(rhos[0] >= 0.0) {
        return Err(Error::Invalid("radii must be >= 0 and strictly ascending".into()));
    }
    if cfg.seeds.is_empty() || !(cfg.resolution > 0.0) {
        return Err(Error::Invalid("sweep needs seeds and a positive resolution".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..rhos.len()).flat_map(|i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let outs: Vec<ProbeOutcome> = jobs.par_iter().map(|&(i, s)| exp.probe(rhos[i], s)).collect::<Result<_>>()?;
    let k = cfg.seeds.len();
    let mut entries: Vec<SweepEntry> =
        rhos.iter().enumerate().map(|(i, &r)| summarize(r, &outs[i * k..(i + 1) * k], false)).collect();

    let theoretical_cor = exp.theoretical_cor()?.unwrap_or(f64::NAN);
    let first = entries.iter().position(|e| e.collapsed);
    let (bracket, empirical_cor, boundary, violations) = match first {
        None => (CorBracket::NoneCollapsed, *rhos.last().expect("nonempty"), None, vec![]),
        Some(0) => {
            let v = entries.iter().filter(|e| !e.collapsed).map(|e| e.rho).collect();
            (CorBracket::AllCollapsed, rhos[0], None, v)
        }
        Some(i) => {
            let violations: Vec<f64> = entries[i..].iter().filter(|e| !e.collapsed).map(|e| e.rho).collect();
            if !violations.is_empty() {
                log::warn!("collapse is not monotone in rho: {violations:?} recovered after {}", rhos[i]);
            }
            let (mut lo, mut hi) = (rhos[i - 1], rhos[i]);
            for _ in 0..cfg.max_bisections {
                if hi - lo <= cfg.resolution * hi {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let e = probe_entry(exp, mid, &cfg.seeds, true)?;
                if e.collapsed {
                    hi = mid;
                } else {
                    lo = mid;
                }
                entries.push(e);
            }
            (CorBracket::Bracketed, 0.5 * (lo + hi), Some((lo, hi)), violations)
        }
    };
    entries.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    Ok(SweepResult {
        entries,
        empirical_cor,
        bracket,
        boundary,
        theoretical_cor,
        monotonicity_violations: violations,
    })
}

/// The probe task of a [`RunConfig`]. Features are extracted once: the task
/// and encoder are fixed and the seed only drives the batch order.
pub struct ProbeExperiment {
    pub config: RunConfig,
    pub features: FeatureSet,
}

impl ProbeExperiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        let features = extract_features(&config)?;
        Ok(ProbeExperiment { config, features })
    }

    fn config_for(&self, rho: f64, seed: u64) -> RunConfig {
        let mut c = self.config.clone().with_rho(rho);
        c.optimizer.seed = seed;
        c.output_dir = None;
        c
    }
}

impl Experiment for ProbeExperiment {
    fn probe(&self, rho: f64, seed: u64) -> Result<ProbeOutcome> {
        let mut c = self.config_for(rho, seed);
        // Collapse is judged from AUCs alone; one snapshot keeps sweeps cheap.
        c.diagnostics_every = c.optimizer.steps;
        let out = run_on_features(&c, &self.features)?;
        Ok(ProbeOutcome {
            train_auc: out.final_train_auc,
            test_auc: out.final_test_auc,
            collapsed: out.collapsed,
        })
    }

    /// From the plain-SGD trajectory under the configured optimizer seed.
    fn theoretical_cor(&self) -> Result<Option<f64>> {
        let c = self.config_for(0.0, self.config.optimizer.seed);
        Ok(run_on_features(&c, &self.features)?.theoretical_cor())
    }
}

/// Noisy convex quadratic started along its top eigenvector, trained with
/// step `1/λmax`. Collapse means the excess loss over the last 10% of steps
/// never drops below its initial value; the analytic critical radius is
/// `‖∇L(w₀)‖/λmax`.
pub struct QuadraticSurrogate {
    pub objective: QuadraticObjective,
    pub start: Vec<f64>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    minimizer: Vec<f64>,
}

impl QuadraticSurrogate {
    /// `eigenvalues` (descending first entry is the top one), samples whose
    /// centers scatter by `noise` around the origin, start at distance
    /// `offset` from the minimizer along the top eigenvector.
    pub fn new(
        eigenvalues: &[f64],
        n_samples: usize,
        noise: f64,
        offset: f64,
        batch_size: usize,
        steps: usize,
        seed: u64,
    ) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        if eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Invalid("surrogate eigenvalues must be positive".into()));
        }
        let d = eigenvalues.len();
        let top = (0..d).max_by(|&a, &b| eigenvalues[a].total_cmp(&eigenvalues[b])).ok_or_else(|| {
            Error::Invalid("surrogate needs at least one eigenvalue".into())
        })?;
        let mut rng = crate::rng::SeedTree::new(seed).child("surrogate").rng();
        let centers: Vec<Vec<f64>> = (0..n_samples)
            .map(|_| (0..d).map(|_| noise * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect())
            .collect();
        let objective = QuadraticObjective::new(SymMatrix::diag(eigenvalues), centers)?;
        let minimizer: Vec<f64> =
            (0..d).map(|k| objective.centers.iter().map(|c| c[k]).sum::<f64>() / n_samples as f64).collect();
        let mut start = minimizer.clone();
        start[top] += offset;
        Ok(QuadraticSurrogate {
            objective,
            start,
            learning_rate: 1.0 / eigenvalues[top],
            batch_size,
            steps,
            minimizer,
        })
    }

    pub fn analytic_cor(&self) -> Result<f64> {
        let (_, g) = self.objective.loss_grad(&self.start, &self.objective.all())?;
        let lmax = (0..self.start.len()).map(|k| self.objective.a.get(k, k)).fold(f64::MIN, f64::max);
        Ok(norm(&g) / lmax)
    }

    fn excess(&self, w: &[f64]) -> Result<f64> {
        let all = self.objective.all();
        Ok(self.objective.loss(w, &all)? - self.objective.loss(&self.minimizer, &all)?)
    }
}

impl Experiment for QuadraticSurrogate {
    fn probe(&self, rho: f64, seed: u64) -> Result<ProbeOutcome> {
        let mut w = self.start.clone();
        let initial = self.excess(&w)?;
        let mut sampler = BatchSampler::new(self.objective.len(), self.batch_size, seed)?;
        let tail = (self.steps / 10).max(1);
        let mut tail_min = f64::INFINITY;
        for step in 0..self.steps {
            sam_step(&self.objective, &mut w, &sampler.next_batch(), rho, self.learning_rate, step, None)?;
            if step + tail >= self.steps {
                tail_min = tail_min.min(self.excess(&w)?);
            }
        }
        Ok(ProbeOutcome {
            train_auc: f64::NAN,
            test_auc: f64::NAN,
            collapsed: tail_min >= initial,
        })
    }

    fn theoretical_cor(&self) -> Result<Option<f64>> {
        self.analytic_cor().map(Some)
    }
}
