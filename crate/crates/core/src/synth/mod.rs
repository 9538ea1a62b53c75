//! Synthetic token datasets with separately controllable semantic and
//! artifact signal, and the counterpart operator that stands in for
//! self-blending.
//!
//! Fake samples carry `semantic_amp·u` on every token (`u` a unit vector over
//! the non-artifact channels) plus `artifact_amp·A`, where `A` is a unit-norm
//! pattern supported on the artifact channels of the artifact-region tokens.
//! Every token gets i.i.d. Gaussian noise. An optional per-sample content
//! offset on the semantic channels, shared by all tokens of a sample and
//! independent of the label, models label-irrelevant semantic variation.

mod io;

pub use io::{dump_csv, read_dataset, write_dataset};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::regions::{grid_region, RegionLabel};
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub n_tokens: usize,
    pub dim: usize,
    pub semantic_amp: f64,
    pub artifact_amp: f64,
    /// 0-based channel indices.
    pub artifact_channels: Vec<usize>,
    pub artifact_region: RegionLabel,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Standard deviation of the label-independent content offset.
    #[serde(default)]
    pub content_sigma: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_tokens: 16,
            dim: 32,
            semantic_amp: 0.0,
            artifact_amp: 1.0,
            artifact_channels: (24..32).collect(),
            artifact_region: RegionLabel::Foreground,
            noise_sigma: 1.0,
            n_train: 400,
            n_test: 400,
            seed: 0,
            content_sigma: 0.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tokens == 0 || self.dim == 0 || self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Invalid("task extents must be positive".into()));
        }
        if !(self.noise_sigma > 0.0) || self.semantic_amp < 0.0 || self.artifact_amp < 0.0 || self.content_sigma < 0.0 {
            return Err(Error::Invalid("task amplitudes must be >= 0 and noise_sigma > 0".into()));
        }
        if self.artifact_amp > 0.0 && self.artifact_channels.is_empty() {
            return Err(Error::Invalid("artifact_channels must be nonempty when artifact_amp > 0".into()));
        }
        if self.artifact_channels.iter().any(|&c| c >= self.dim) {
            return Err(Error::Invalid("artifact channel out of range".into()));
        }
        if self.artifact_channels.len() == self.dim && (self.semantic_amp > 0.0 || self.content_sigma > 0.0) {
            return Err(Error::Invalid("no semantic channels left".into()));
        }
        grid_region(self.n_tokens, self.artifact_region)?;
        Ok(())
    }

    pub fn semantic_channels(&self) -> Vec<usize> {
        (0..self.dim).filter(|c| !self.artifact_channels.contains(c)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `N × D`.
    pub tokens: Tensor,
    /// 0 = real, 1 = fake.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Seeded unit-norm pattern on `channels` of the `region` tokens, zero elsewhere.
pub fn structured_pattern(n: usize, d: usize, channels: &[usize], region: &[usize], tree: SeedTree) -> Vec<f64> {
    let mut rng = tree.rng();
    let mut p = vec![0.0; n * d];
    for &i in region {
        for &c in channels {
            p[i * d + c] = normal(&mut rng);
        }
    }
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        p.iter_mut().for_each(|v| *v /= norm);
    }
    p
}

/// The fixed patterns a task draws its signal from.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskPatterns {
    /// Per-token unit vector over the semantic channels (length `D`).
    pub semantic: Vec<f64>,
    /// Unit-norm `N × D` artifact pattern.
    pub artifact: Vec<f64>,
}

pub fn task_patterns(spec: &TaskSpec) -> Result<TaskPatterns> {
    let root = SeedTree::new(spec.seed).child("patterns");
    let sem_ch = spec.semantic_channels();
    let mut semantic = structured_pattern(1, spec.dim, &sem_ch, &[0], root.child("semantic"));
    if sem_ch.is_empty() {
        semantic = vec![0.0; spec.dim];
    }
    let region = grid_region(spec.n_tokens, spec.artifact_region)?;
    let artifact = structured_pattern(spec.n_tokens, spec.dim, &spec.artifact_channels, &region, root.child("artifact"));
    Ok(TaskPatterns { semantic, artifact })
}

/// Sample `index` of `split`, a pure function of `(spec, split, index)`.
pub fn sample_at(spec: &TaskSpec, patterns: &TaskPatterns, split: Split, index: usize) -> Sample {
    let (n, d) = (spec.n_tokens, spec.dim);
    let label = (index % 2) as u8;
    let mut rng = SeedTree::new(spec.seed).child(split.label()).index(index as u64).rng();
    let mut tokens: Vec<f64> = (0..n * d).map(|_| spec.noise_sigma * normal(&mut rng)).collect();
    if spec.content_sigma > 0.0 {
        let sem = spec.semantic_channels();
        let offset: Vec<f64> = sem.iter().map(|_| spec.content_sigma * normal(&mut rng)).collect();
        for i in 0..n {
            for (&c, &o) in sem.iter().zip(&offset) {
                tokens[i * d + c] += o;
            }
        }
    }
    if label == 1 {
        for i in 0..n {
            for c in 0..d {
                tokens[i * d + c] += spec.semantic_amp * patterns.semantic[c];
            }
        }
        for (t, &a) in tokens.iter_mut().zip(&patterns.artifact) {
            *t += spec.artifact_amp * a;
        }
    }
    Sample {
        tokens: Tensor::matrix(n, d, tokens).expect("positive extents"),
        label,
    }
}

/// Balanced dataset: even indices are real, odd indices fake.
pub fn generate(spec: &TaskSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let patterns = task_patterns(spec)?;
    let count = match split {
        Split::Train => spec.n_train,
        Split::Test => spec.n_test,
    };
    Ok(Dataset {
        spec: spec.clone(),
        split,
        samples: (0..count).map(|i| sample_at(spec, &patterns, split, i)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterpartOp {
    pub perturb_amp: f64,
    /// 0-based channel indices.
    pub target_channels: Vec<usize>,
    pub target_region: RegionLabel,
    pub seed: u64,
}

impl CounterpartOp {
    /// Perturbs the artifact channels of the task's artifact region.
    pub fn for_task(spec: &TaskSpec, perturb_amp: f64) -> Self {
        CounterpartOp {
            perturb_amp,
            target_channels: spec.artifact_channels.clone(),
            target_region: spec.artifact_region,
            seed: spec.seed ^ 0x5b1,
        }
    }

    pub fn pattern(&self, n: usize, d: usize) -> Result<Vec<f64>> {
        if self.target_channels.iter().any(|&c| c >= d) {
            return Err(Error::Invalid("counterpart channel out of range".into()));
        }
        let region = grid_region(n, self.target_region)?;
        Ok(structured_pattern(
            n,
            d,
            &self.target_channels,
            &region,
            SeedTree::new(self.seed).child("counterpart"),
        ))
    }
}

/// Add `perturb_amp·pattern` to the sample; the label is kept.
pub fn counterpart(sample: &Sample, op: &CounterpartOp) -> Result<Sample> {
    let (n, d) = sample.tokens.dims2();
    let p = op.pattern(n, d)?;
    let mut tokens = sample.tokens.clone();
    for (t, &v) in tokens.data_mut().iter_mut().zip(&p) {
        *t += op.perturb_amp * v;
    }
    Ok(Sample {
        tokens,
        label: sample.label,
    })
}

/// Feature maps for probes that read raw tokens directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawFeatures {
    /// Average over tokens (length `D`).
    MeanPool,
    /// All tokens concatenated (length `N·D`).
    Flatten,
}

impl RawFeatures {
    pub fn apply(self, s: &Sample) -> Vec<f64> {
        match self {
            RawFeatures::Flatten => s.tokens.data().to_vec(),
            RawFeatures::MeanPool => {
                let (n, d) = s.tokens.dims2();
                let mut f = vec![0.0; d];
                for i in 0..n {
                    for (a, &v) in f.iter_mut().zip(s.tokens.row(i)) {
                        *a += v / n as f64;
                    }
                }
                f
            }
        }
    }
}

/// Monte-Carlo sample count used by [`expected_gsnr`].
pub const GSNR_MC_SAMPLES: usize = 10_000;

/// GSNR of the logistic probe's per-sample gradients at `head` (flat
/// `[weight.., bias]`), estimated on `n_mc` fresh samples with mini-batch size
/// `batch_size`.
pub fn expected_gsnr(spec: &TaskSpec, features: RawFeatures, head: &[f64], batch_size: usize, n_mc: usize) -> Result<f64> {
    spec.validate()?;
    let patterns = task_patterns(spec)?;
    let mc_spec = TaskSpec {
        seed: spec.seed ^ 0x6d63,
        ..spec.clone()
    };
    let grads: Vec<Vec<f64>> = (0..n_mc)
        .map(|i| {
            let s = sample_at(&mc_spec, &patterns, Split::Train, i);
            let mut x = features.apply(&s);
            x.push(1.0);
            if x.len() != head.len() {
                return Err(Error::Shape {
                    context: "expected_gsnr head".into(),
                    expected: vec![x.len()],
                    got: vec![head.len()],
                });
            }
            let z: f64 = x.iter().zip(head).map(|(a, b)| a * b).sum();
            let r = crate::autodiff::sigmoid(z) - f64::from(s.label);
            Ok(x.into_iter().map(|v| r * v).collect())
        })
        .collect::<Result<_>>()?;
    crate::diagnostics::gsnr(&grads, batch_size)
}

#[cfg(test)]
mod tests;
