//! Plain SGD and sharpness-aware minimization over an [`Objective`], and the
//! probe of `E[⟨∇L, g̃⟩]` that decides whether SAM still descends.
//!
//! No momentum, no weight decay, constant learning rate: the only difference
//! between the two optimizers is the perturbation radius `ρ`.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::objective::Objective;
use crate::rng::{Rng, SeedTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub rho: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamConfig {
    fn default() -> Self {
        SamConfig {
            rho: 0.07,
            learning_rate: 1e-3,
            batch_size: 20,
            steps: 1000,
            seed: 0,
        }
    }
}

impl SamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(Error::Invalid("rho must be finite and >= 0".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Invalid("learning_rate must be finite and > 0".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Invalid("batch_size and steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mini-batch loss at `w_t`.
    pub loss: f64,
    /// `‖g_t‖`.
    pub grad_norm: f64,
    /// `‖∇L_t‖` on the population, at instrumented steps.
    pub pop_grad_norm: Option<f64>,
    /// Single-batch estimate of `⟨∇L_t, g̃_t⟩`, at instrumented steps.
    pub inner_product: Option<f64>,
    pub rho: f64,
    pub failed: bool,
}

fn check_batch(batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    Ok(())
}

fn finite_or(step: usize, stage: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteStep { step, stage })
    }
}

/// `w ← w − lr·g`; returns the batch loss and gradient at the old `w`.
pub fn sgd_step(obj: &dyn Objective, w: &mut [f64], batch: &[usize], lr: f64) -> Result<(f64, Vec<f64>)> {
    check_batch(batch)?;
    let (loss, g) = obj.loss_grad(w, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteStep { step: 0, stage: "loss" });
    }
    finite_or(0, "gradient", &g)?;
    for (wi, gi) in w.iter_mut().zip(&g) {
        *wi -= lr * gi;
    }
    Ok((loss, g))
}

/// SAM ascent direction `g̃ = ∇L_B(w + ρ·g/‖g‖)` on the same batch. Returns
/// `g` itself when `ρ = 0` or `‖g‖ = 0`.
pub fn perturbed_gradient(obj: &dyn Objective, w: &[f64], batch: &[usize], g: &[f64], rho: f64) -> Result<Vec<f64>> {
    let gn = norm(g);
    if rho == 0.0 || gn == 0.0 {
        return Ok(g.to_vec());
    }
    let scale = rho / gn;
    let wp: Vec<f64> = w.iter().zip(g).map(|(a, b)| a + scale * b).collect();
    Ok(obj.loss_grad(&wp, batch)?.1)
}

/// One SAM update. With `pop` given, `‖∇L_t‖` and `⟨∇L_t, g̃_t⟩` are measured
/// on those samples before the update.
pub fn sam_step(
    obj: &dyn Objective,
    w: &mut [f64],
    batch: &[usize],
    rho: f64,
    lr: f64,
    step: usize,
    pop: Option<&[usize]>,
) -> Result<StepRecord> {
    check_batch(batch)?;
    let (loss, g) = obj.loss_grad(w, batch)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteStep { step, stage: "loss" });
    }
    finite_or(step, "gradient", &g)?;
    let gt = perturbed_gradient(obj, w, batch, &g, rho)?;
    finite_or(step, "perturbed gradient", &gt)?;
    let (pop_grad_norm, inner_product) = match pop {
        Some(idx) => {
            let (_, full) = obj.loss_grad(w, idx)?;
            (Some(norm(&full)), Some(dot(&full, &gt)))
        }
        None => (None, None),
    };
    for (wi, gi) in w.iter_mut().zip(&gt) {
        *wi -= lr * gi;
    }
    finite_or(step, "update", w)?;
    Ok(StepRecord {
        step,
        loss,
        grad_norm: norm(&g),
        pop_grad_norm,
        inner_product,
        rho,
        failed: false,
    })
}

/// Epoch-wise sampling without replacement; the remainder of each epoch that
/// does not fill a batch is dropped.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    perm: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: Rng,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::Invalid(format!("batch size {batch} incompatible with {n} samples")));
        }
        let mut s = BatchSampler {
            perm: (0..n).collect(),
            pos: 0,
            batch,
            rng: SeedTree::new(seed).child("batches").rng(),
        };
        s.perm.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.perm.len() {
            self.perm.sort_unstable();
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

/// Run `cfg.steps` SAM updates from `w`. `instrument(step)` selects the steps
/// that measure population quantities on `pop`; `on_step` sees every record
/// with the parameters after the update and may stop the run by returning
/// `false`.
pub fn train(
    obj: &dyn Objective,
    w: &mut [f64],
    cfg: &SamConfig,
    pop: &[usize],
    instrument: impl Fn(usize) -> bool,
    mut on_step: impl FnMut(&StepRecord, &[f64]) -> Result<bool>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    let mut sampler = BatchSampler::new(obj.len(), cfg.batch_size, cfg.seed)?;
    let mut records = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let p = if instrument(step) { Some(pop) } else { None };
        let rec = sam_step(obj, w, &batch, cfg.rho, cfg.learning_rate, step, p)?;
        records.push(rec);
        if !on_step(&rec, w)? {
            break;
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEstimate {
    /// Mean of `⟨∇L, g̃⟩` over the sampled batches.
    pub mean: f64,
    pub std_error: f64,
    /// `‖∇L‖²` on the full data.
    pub grad_norm_sq: f64,
    pub n_batches: usize,
}

/// Monte-Carlo estimate of `E[⟨∇L, g̃⟩]`: `∇L` on all of `idx`, `g̃` on
/// `n_batches` independent uniform batches of `batch_size` drawn without
/// replacement from `idx`.
pub fn stability_probe(
    obj: &dyn Objective,
    w: &[f64],
    idx: &[usize],
    rho: f64,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<ProbeEstimate> {
    if n_batches < 2 {
        return Err(Error::Invalid("stability_probe needs n_batches >= 2".into()));
    }
    if batch_size == 0 || batch_size > idx.len() {
        return Err(Error::Invalid("batch size incompatible with the probe data".into()));
    }
    if let Some(labels) = obj.labels() {
        let first = labels[idx[0]];
        if idx.iter().all(|&i| labels[i] == first) {
            return Err(Error::Invalid("degenerate probe data: a single class".into()));
        }
    }
    let (_, full) = obj.loss_grad(w, idx)?;
    let tree = SeedTree::new(seed).child("probe");
    let samples: Vec<f64> = (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = tree.index(b as u64).rng();
            let batch: Vec<usize> = idx.choose_multiple(&mut rng, batch_size).copied().collect();
            let (_, g) = obj.loss_grad(w, &batch)?;
            let gt = perturbed_gradient(obj, w, &batch, &g, rho)?;
            Ok(dot(&full, &gt))
        })
        .collect::<Result<_>>()?;
    let mean = samples.iter().sum::<f64>() / n_batches as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
    Ok(ProbeEstimate {
        mean,
        std_error: (var / n_batches as f64).sqrt(),
        grad_norm_sq: dot(&full, &full),
        n_batches,
    })
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

/// CSV with columns `step, loss, grad_norm, pop_grad_norm, inner_product, rho`;
/// unmeasured cells are empty.
pub fn write_step_records<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "grad_norm", "pop_grad_norm", "inner_product", "rho"])?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            format!("{:?}", r.loss),
            format!("{:?}", r.grad_norm),
            opt_cell(r.pop_grad_norm),
            opt_cell(r.inner_product),
            format!("{:?}", r.rho),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
