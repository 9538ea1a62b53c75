//! The JSON document read by `--config`: either a bare run configuration or
//! an object whose `run` key holds one, next to optional sections for the
//! sweep, landscape and theorem subcommands.

use std::path::Path;

use corlab_core::harness::{RunConfig, SweepConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub landscape: LandscapeSection,
    #[serde(default)]
    pub theorem: TheoremSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub rhos: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default = "default_max_bisections")]
    pub max_bisections: usize,
}

fn default_seeds() -> Vec<u64> {
    SweepConfig::default().seeds
}

fn default_resolution() -> f64 {
    SweepConfig::default().resolution
}

fn default_max_bisections() -> usize {
    SweepConfig::default().max_bisections
}

impl SweepSection {
    pub fn with_rhos(rhos: Vec<f64>) -> Self {
        SweepSection {
            rhos,
            seeds: default_seeds(),
            resolution: default_resolution(),
            max_bisections: default_max_bisections(),
        }
    }

    pub fn config(&self) -> SweepConfig {
        SweepConfig {
            seeds: self.seeds.clone(),
            resolution: self.resolution,
            max_bisections: self.max_bisections,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSection {
    pub half_width: f64,
    /// Odd number of grid points per axis.
    pub resolution: usize,
    pub seed: u64,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        LandscapeSection { half_width: 1.0, resolution: 21, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremSection {
    pub instances: usize,
    pub seed: u64,
}

impl Default for TheoremSection {
    fn default() -> Self {
        TheoremSection { instances: 100, seed: 0 }
    }
}

impl Document {
    pub fn parse(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let wrapped = value.as_object().is_some_and(|o| o.contains_key("run"));
        if wrapped {
            serde_json::from_value(value).map_err(|e| e.to_string())
        } else {
            let run: RunConfig = serde_json::from_value(value).map_err(|e| e.to_string())?;
            Ok(Document {
                run,
                sweep: None,
                landscape: LandscapeSection::default(),
                theorem: TheoremSection::default(),
            })
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text)
    }
}
