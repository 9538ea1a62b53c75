use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{HeadMode, RunConfig};
use super::features::{extract_features, FeatureSet};
use super::metrics::compute_auc;
use crate::diagnostics::{
    cor_trajectory, gradient_moments, json_float, lambda_max, phase_detect, spectral_estimate, CorPoint, CorReport,
    DiagnosticSnapshot, EstimatorConfig, GsnrTrace, SpectralEstimate, TraceMode, DENSE_MAX_DIM,
};
use crate::error::{Error, Result};
use crate::linalg::jacobi_eigenvalues;
use crate::model::ProbeHead;
use crate::objective::{LogisticObjective, Objective};
use crate::optim::{sam_step, write_step_records, BatchSampler, StepRecord};

/// Train AUC below this, sustained over the tail of the run, marks collapse.
pub const COLLAPSE_AUC: f64 = 0.55;
/// Fraction of the step budget whose train AUC decides collapse.
pub const TAIL_FRACTION: f64 = 0.1;
/// Batches pooled into `train_auc_window`.
pub const AUC_WINDOW_BATCHES: usize = 10;
pub const SCHEMA_VERSION: u32 = 1;

/// One row of the per-step metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    /// AUC of the pre-update logits over the last [`AUC_WINDOW_BATCHES`]
    /// batches; `None` while the window holds a single class.
    pub train_auc_window: Option<f64>,
    pub grad_norm: f64,
    /// Population GSNR, measured at diagnostic steps only.
    pub gsnr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub step: usize,
    pub last_valid_step: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub head_mode: HeadMode,
    pub rho: f64,
    pub steps_budget: usize,
    pub records: Vec<StepRecord>,
    pub metrics: Vec<StepMetric>,
    pub snapshots: Vec<DiagnosticSnapshot>,
    /// Last valid parameters.
    pub head: ProbeHead,
    pub final_train_auc: f64,
    pub final_test_auc: f64,
    /// Full training-set AUC at every step of the tail window.
    pub tail_train_auc: Vec<f64>,
    pub collapsed: bool,
    pub failure: Option<RunFailure>,
    pub cor: Option<CorReport>,
    pub gsnr_trace: Option<GsnrTrace>,
}

impl RunOutcome {
    /// Trajectory minimum of `‖∇L_t‖/λmax` over the diagnostic steps.
    pub fn theoretical_cor(&self) -> Option<f64> {
        self.cor.as_ref().map(|c| c.rho_critical)
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            schema_version: SCHEMA_VERSION,
            head: self.head_mode,
            rho: self.rho,
            steps_budget: self.steps_budget,
            steps_completed: self.records.len(),
            final_train_auc: self.final_train_auc,
            final_test_auc: self.final_test_auc,
            collapsed: self.collapsed,
            failure: self.failure.clone(),
            theoretical_cor: self.theoretical_cor().unwrap_or(f64::NAN),
            cor_argmin_step: self.cor.as_ref().map(|c| c.argmin_step),
            t_star_step: self.gsnr_trace.as_ref().map(|g| self.snapshots[g.t_star].step),
            gsnr_t_star: self.gsnr_trace.as_ref().map_or(f64::NAN, |g| g.gsnr_t_star),
            rise_step: self.gsnr_trace.as_ref().and_then(|g| g.rise_start).map(|i| self.snapshots[i].step),
            decay_step: self.gsnr_trace.as_ref().and_then(|g| g.decay_start).map(|i| self.snapshots[i].step),
        }
    }
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub head: HeadMode,
    pub rho: f64,
    pub steps_budget: usize,
    pub steps_completed: usize,
    #[serde(with = "json_float")]
    pub final_train_auc: f64,
    #[serde(with = "json_float")]
    pub final_test_auc: f64,
    pub collapsed: bool,
    pub failure: Option<RunFailure>,
    #[serde(with = "json_float")]
    pub theoretical_cor: f64,
    pub cor_argmin_step: Option<usize>,
    pub t_star_step: Option<usize>,
    #[serde(with = "json_float")]
    pub gsnr_t_star: f64,
    pub rise_step: Option<usize>,
    pub decay_step: Option<usize>,
}

/// Spectral snapshot of the probe objective. Wide heads assemble the
/// closed-form Hessian once: exact trace, power iteration on the assembled
/// matrix, dense eigensolve if the iteration stalls.
pub fn probe_spectral_estimate(
    obj: &LogisticObjective,
    w: &[f64],
    idx: &[usize],
    batch_size: usize,
    step: usize,
    cfg: &EstimatorConfig,
) -> Result<SpectralEstimate> {
    if obj.dim() <= DENSE_MAX_DIM || cfg.trace_mode != TraceMode::Auto {
        return spectral_estimate(obj, w, idx, batch_size, step, cfg);
    }
    let grads = obj.per_sample_grads(w, idx)?;
    let (mean, tr_pop) = gradient_moments(&grads)?;
    let h = obj.dense_hessian(w, idx)?;
    let lambda = match lambda_max(|v| Ok(h.matvec(v)), h.dim(), &cfg.power) {
        Ok(p) => p.lambda,
        Err(Error::NonConvergence { .. }) => *jacobi_eigenvalues(&h).last().expect("dim >= 1"),
        Err(e) => return Err(e),
    };
    let gn2 = mean.iter().map(|v| v * v).sum();
    SpectralEstimate::from_parts(step, lambda, h.trace(), tr_pop / batch_size as f64, gn2)
}

/// Extract features and train.
pub fn run_train(cfg: &RunConfig) -> Result<RunOutcome> {
    let features = extract_features(cfg)?;
    let out = run_on_features(cfg, &features)?;
    if let Some(dir) = &cfg.output_dir {
        write_run_outputs(dir, cfg, &out)?;
    }
    Ok(out)
}

fn auc_or_nan(scores: &[f64], labels: &[u8]) -> f64 {
    compute_auc(scores, labels).unwrap_or(f64::NAN)
}

/// Train the probe of `cfg` on precomputed features. Numerical failures end
/// the run early and mark it failed; the outcome then describes the last
/// valid parameters.
pub fn run_on_features(cfg: &RunConfig, fs: &FeatureSet) -> Result<RunOutcome> {
    cfg.validate()?;
    let opt = cfg.optimizer;
    let obj = LogisticObjective::new(fs.train.clone(), fs.train_labels.clone())?;
    let test = LogisticObjective::new(fs.test.clone(), fs.test_labels.clone())?;
    let all = obj.all();
    let mut w = vec![0.0; obj.dim()];
    let mut sampler = BatchSampler::new(obj.len(), opt.batch_size, opt.seed)?;
    let tail_start = opt.steps - ((opt.steps as f64 * TAIL_FRACTION).ceil() as usize).clamp(1, opt.steps);

    let mut records = Vec::with_capacity(opt.steps);
    let mut metrics = Vec::with_capacity(opt.steps);
    let mut snapshots = Vec::new();
    let mut tail_train_auc = Vec::new();
    let mut window: std::collections::VecDeque<(Vec<f64>, Vec<u8>)> = Default::default();
    let mut failure = None;

    for step in 0..opt.steps {
        let batch = sampler.next_batch();
        let diag = step % cfg.diagnostics_every == 0;
        let gsnr = if diag {
            match probe_spectral_estimate(&obj, &w, &all, opt.batch_size, step, &cfg.estimator) {
                Ok(est) => {
                    let snap = DiagnosticSnapshot::from_estimate(&est);
                    let g = snap.gsnr;
                    snapshots.push(snap);
                    Some(g)
                }
                Err(e) => {
                    log::warn!("step {step}: diagnostics failed: {e}");
                    None
                }
            }
        } else {
            None
        };
        let pre: Vec<f64> = batch.iter().map(|&i| crate::linalg::dot(&w, &with_bias(&fs.train[i]))).collect();
        let prev = w.clone();
        let rec = match sam_step(&obj, &mut w, &batch, opt.rho, opt.learning_rate, step, diag.then_some(&all[..])) {
            Ok(r) => r,
            Err(e @ (Error::NonFiniteStep { .. } | Error::NonFinite { .. })) => {
                w = prev;
                failure = Some(RunFailure {
                    step,
                    last_valid_step: step.checked_sub(1),
                    message: e.to_string(),
                });
                break;
            }
            Err(e) => return Err(e),
        };
        window.push_back((pre, batch.iter().map(|&i| fs.train_labels[i]).collect()));
        if window.len() > AUC_WINDOW_BATCHES {
            window.pop_front();
        }
        let (ws, wl): (Vec<f64>, Vec<u8>) =
            window.iter().flat_map(|(s, l)| s.iter().copied().zip(l.iter().copied())).unzip();
        let auc_window = compute_auc(&ws, &wl).ok();
        if step >= tail_start {
            tail_train_auc.push(auc_or_nan(&obj.scores(&w), &fs.train_labels));
        }
        records.push(rec);
        metrics.push(StepMetric {
            step,
            loss: rec.loss,
            train_auc_window: auc_window,
            grad_norm: rec.grad_norm,
            gsnr,
        });
    }

    let final_train_auc = auc_or_nan(&obj.scores(&w), &fs.train_labels);
    let final_test_auc = auc_or_nan(&test.scores(&w), &fs.test_labels);
    // A failed run never completed its budget and counts as collapsed.
    let collapsed = failure.is_some() || tail_train_auc.iter().all(|&a| !(a >= COLLAPSE_AUC));

    let points: Vec<CorPoint> = snapshots
        .iter()
        .map(|s| CorPoint { step: s.step, grad_norm: s.grad_norm_sq.sqrt(), lambda_max: s.lambda_max })
        .collect();
    let cor = if points.is_empty() { None } else { cor_trajectory(&points).ok() };
    let gsnr_trace = if snapshots.len() >= 10 {
        let values: Vec<f64> = snapshots.iter().map(|s| s.gsnr).collect();
        let bounds: Vec<f64> =
            snapshots.iter().map(|s| if s.cor_bound.is_nan() { f64::INFINITY } else { s.cor_bound }).collect();
        phase_detect(&values, Some(&bounds)).ok()
    } else {
        None
    };

    Ok(RunOutcome {
        head_mode: cfg.head,
        rho: opt.rho,
        steps_budget: opt.steps,
        records,
        metrics,
        snapshots,
        head: ProbeHead::from_flat(&w),
        final_train_auc,
        final_test_auc,
        tail_train_auc,
        collapsed,
        failure,
        cor,
        gsnr_trace,
    })
}

fn with_bias(x: &[f64]) -> Vec<f64> {
    let mut r = x.to_vec();
    r.push(1.0);
    r
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// CSV with columns `step, loss, train_auc_window, grad_norm, gsnr`.
pub fn write_step_metrics<W: Write>(metrics: &[StepMetric], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "train_auc_window", "grad_norm", "gsnr"])?;
    for m in metrics {
        w.write_record([
            m.step.to_string(),
            format!("{:?}", m.loss),
            opt_cell(m.train_auc_window),
            format!("{:?}", m.grad_norm),
            opt_cell(m.gsnr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json_lines<W: Write, T: Serialize>(items: &[T], mut out: W) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

/// `metrics.csv`, `steps.csv`, `diagnostics.jsonl`, `summary.json`,
/// `head.json` and the resolved `config.json`.
pub fn write_run_outputs(dir: &Path, cfg: &RunConfig, out: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_step_metrics(&out.metrics, BufWriter::new(File::create(dir.join("metrics.csv"))?))?;
    write_step_records(&out.records, BufWriter::new(File::create(dir.join("steps.csv"))?))?;
    let mut diag = BufWriter::new(File::create(dir.join("diagnostics.jsonl"))?);
    write_json_lines(&out.snapshots, &mut diag)?;
    diag.flush()?;
    write_json(&dir.join("summary.json"), &out.summary())?;
    write_json(&dir.join("head.json"), &out.head)?;
    // Drop the output directory so the file does not depend on where it was written.
    let resolved = RunConfig { output_dir: None, ..cfg.clone() };
    write_json(&dir.join("config.json"), &resolved)?;
    Ok(())
}
