use serde::{Deserialize, Serialize};

use super::config::{HeadMode, RunConfig};
use super::run::run_train;
use super::sweep::{sweep_rho, CorBracket, ProbeExperiment, SweepConfig};
use crate::diagnostics::json_float;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub head: HeadMode,
    /// Trajectory minimum of `‖∇L_t‖/λmax` for the configured run.
    #[serde(with = "json_float")]
    pub theoretical_cor: f64,
    pub empirical_cor: Option<f64>,
    pub empirical_bracket: Option<CorBracket>,
    #[serde(with = "json_float")]
    pub final_train_auc: f64,
    #[serde(with = "json_float")]
    pub final_test_auc: f64,
    pub collapsed: bool,
    #[serde(with = "json_float")]
    pub gsnr_t_star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema_version: u32,
    pub plain: HeadReport,
    pub corit: HeadReport,
    pub corit_exceeds_plain: bool,
}

fn head_report(cfg: &RunConfig, sweep: Option<(&[f64], &SweepConfig)>) -> Result<HeadReport> {
    let out = run_train(cfg)?;
    let (empirical_cor, empirical_bracket) = match sweep {
        Some((rhos, sc)) => {
            let r = sweep_rho(&ProbeExperiment::new(cfg.clone())?, rhos, sc)?;
            (Some(r.empirical_cor), Some(r.bracket))
        }
        None => (None, None),
    };
    Ok(HeadReport {
        head: cfg.head,
        theoretical_cor: out.theoretical_cor().unwrap_or(f64::NAN),
        empirical_cor,
        empirical_bracket,
        final_train_auc: out.final_train_auc,
        final_test_auc: out.final_test_auc,
        collapsed: out.collapsed,
        gsnr_t_star: out.gsnr_trace.as_ref().map_or(f64::NAN, |g| g.gsnr_t_star),
    })
}

/// Run the plain probe and the CoRIT head on the same task, encoder and
/// optimizer. With `sweep`, each head also gets an empirical COR. Run outputs
/// go to `plain/` and `corit/` under the base output directory.
pub fn corit_vs_baseline(base: &RunConfig, sweep: Option<(&[f64], &SweepConfig)>) -> Result<CompareReport> {
    let with = |head: HeadMode, sub: &str| RunConfig {
        head,
        output_dir: base.output_dir.as_ref().map(|d| d.join(sub)),
        ..base.clone()
    };
    let plain = head_report(&with(HeadMode::PlainProbe, "plain"), sweep)?;
    let corit = head_report(&with(HeadMode::Corit, "corit"), sweep)?;
    Ok(CompareReport {
        schema_version: super::run::SCHEMA_VERSION,
        corit_exceeds_plain: corit.theoretical_cor > plain.theoretical_cor,
        plain,
        corit,
    })
}
