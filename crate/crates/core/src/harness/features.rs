use rayon::prelude::*;

use super::config::{HeadMode, RunConfig, CORIT_EPSILON};
use crate::error::{Error, Result};
use crate::model::{encode_corit, encode_plain, hri_fuse, CoritTrace, FrozenEncoder};
use crate::regions::{grid_partition, RegionSpec};
use crate::synth::{counterpart, generate, CounterpartOp, Dataset, Sample, Split};

/// Frozen-encoder features of both splits; the encoder never changes during
/// probing so they are computed once per configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub train: Vec<Vec<f64>>,
    pub train_labels: Vec<u8>,
    pub test: Vec<Vec<f64>>,
    pub test_labels: Vec<u8>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.train.first().map_or(0, Vec::len)
    }

    /// Shift and scale every coordinate to zero mean and unit variance over
    /// the training split; test features reuse the training statistics.
    /// Constant coordinates are only centered.
    pub fn standardize(&mut self) {
        let n = self.train.len() as f64;
        for j in 0..self.dim() {
            let mean = self.train.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = self.train.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for r in self.train.iter_mut().chain(self.test.iter_mut()) {
                r[j] = (r[j] - mean) / scale;
            }
        }
    }
}

pub struct FeatureExtractor {
    head: HeadMode,
    encoder: FrozenEncoder,
    regions: Vec<RegionSpec>,
    op: CounterpartOp,
    alpha: f64,
    l_mid: usize,
}

impl FeatureExtractor {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let encoder = FrozenEncoder::new(cfg.encoder.clone())?;
        let regions = grid_partition(cfg.task.n_tokens)?;
        if cfg.head == HeadMode::Corit && regions.len() != cfg.encoder.region_count {
            return Err(Error::Invalid(format!(
                "encoder expects {} region tokens, partition has {}",
                cfg.encoder.region_count,
                regions.len()
            )));
        }
        Ok(FeatureExtractor {
            head: cfg.head,
            encoder,
            regions,
            op: CounterpartOp::for_task(&cfg.task, cfg.counterpart_amp),
            alpha: cfg.alpha,
            l_mid: cfg.l_mid,
        })
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    /// Paired pass of the injected stream for one sample; available in
    /// CoRIT mode only.
    pub fn corit_trace(&self, s: &Sample) -> Result<CoritTrace> {
        if self.head != HeadMode::Corit {
            return Err(Error::Invalid("region masks exist only for the corit head".into()));
        }
        let c = counterpart(s, &self.op)?;
        encode_corit(&self.encoder, &s.tokens, &c.tokens, &self.regions, self.alpha, CORIT_EPSILON)
    }

    /// Final-layer class token for the plain probe; HRI fusion of the
    /// original stream of the paired pass for the CoRIT head.
    pub fn extract(&self, s: &Sample) -> Result<Vec<f64>> {
        let layers = self.encoder.config().layers;
        match self.head {
            HeadMode::PlainProbe => {
                let states = encode_plain(&self.encoder, &s.tokens)?;
                Ok(states[layers].cls.clone())
            }
            HeadMode::Corit => hri_fuse(&self.corit_trace(s)?.orig, self.l_mid, layers),
        }
    }

    /// Order-preserving parallel map; each sample is independent, so the
    /// result does not depend on the thread count.
    pub fn extract_all(&self, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
        ds.samples.par_iter().map(|s| self.extract(s)).collect()
    }
}

pub fn extract_features(cfg: &RunConfig) -> Result<FeatureSet> {
    let fx = FeatureExtractor::new(cfg)?;
    let train = generate(&cfg.task, Split::Train)?;
    let test = generate(&cfg.task, Split::Test)?;
    let mut fs = FeatureSet {
        train: fx.extract_all(&train)?,
        train_labels: train.labels(),
        test: fx.extract_all(&test)?,
        test_labels: test.labels(),
    };
    if cfg.standardize {
        fs.standardize();
    }
    Ok(fs)
}
