use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::{EstimatorConfig, PowerConfig, TraceMode};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::optim::SamConfig;
use crate::regions::POOL_EPSILON;
use crate::synth::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Logistic probe on the final-layer class token.
    PlainProbe,
    /// Logistic probe on fused class and region tokens of the injected stream.
    Corit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub encoder: EncoderConfig,
    pub head: HeadMode,
    pub optimizer: SamConfig,
    /// Full spectral snapshot every this many optimizer steps.
    pub diagnostics_every: usize,
    pub alpha: f64,
    pub l_mid: usize,
    /// Amplitude of the counterpart perturbation used by the injected stream.
    #[serde(default = "default_counterpart_amp")]
    pub counterpart_amp: f64,
    /// z-score probe features with training-split statistics.
    #[serde(default = "default_standardize")]
    pub standardize: bool,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_counterpart_amp() -> f64 {
    1.0
}

fn default_standardize() -> bool {
    true
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: TaskSpec::default(),
            encoder: EncoderConfig::default(),
            head: HeadMode::PlainProbe,
            optimizer: SamConfig::default(),
            diagnostics_every: 10,
            alpha: 0.1,
            l_mid: 4,
            counterpart_amp: default_counterpart_amp(),
            standardize: true,
            estimator: EstimatorConfig {
                trace_mode: TraceMode::Auto,
                probes: 100,
                power: PowerConfig {
                    max_iters: 500,
                    ..PowerConfig::default()
                },
            },
            output_dir: None,
        }
    }
}

/// Pooling epsilon of the injected stream.
pub const CORIT_EPSILON: f64 = POOL_EPSILON;

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.encoder.validate()?;
        self.optimizer.validate()?;
        if self.task.n_tokens != self.encoder.visual_tokens || self.task.dim != self.encoder.dim {
            return Err(Error::Invalid(format!(
                "task tokens {}x{} do not match encoder {}x{}",
                self.task.n_tokens, self.task.dim, self.encoder.visual_tokens, self.encoder.dim
            )));
        }
        if self.diagnostics_every == 0 {
            return Err(Error::Invalid("diagnostics_every must be positive".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Invalid("alpha must be >= 0".into()));
        }
        if self.head == HeadMode::Corit && !(1 <= self.l_mid && self.l_mid < self.encoder.layers) {
            return Err(Error::Invalid(format!("l_mid {} must lie in [1, {})", self.l_mid, self.encoder.layers)));
        }
        if self.optimizer.batch_size > self.task.n_train {
            return Err(Error::Invalid("batch_size exceeds n_train".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Override the data and optimizer seeds. The frozen encoder keeps its
    /// own seed: it plays the part of a fixed pretrained backbone.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.task.seed = seed;
        self.optimizer.seed = seed;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.optimizer.rho = rho;
        self
    }
}
