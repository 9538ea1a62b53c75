//! Experiment orchestration: training runs, radius sweeps, theorem
//! campaigns and head comparisons, with their file outputs.

mod compare;
mod config;
mod features;
mod metrics;
mod run;
mod sweep;
mod theorem;

pub use compare::{corit_vs_baseline, CompareReport, HeadReport};
pub use config::{HeadMode, RunConfig, CORIT_EPSILON};
pub use features::{extract_features, FeatureExtractor, FeatureSet};
pub use metrics::{average_ranks, compute_auc, linear_fit, relative_auc, spearman};
pub use run::{
    probe_spectral_estimate, run_on_features, run_train, write_json, write_json_lines, write_run_outputs,
    write_step_metrics, RunFailure, RunOutcome, RunSummary, StepMetric, AUC_WINDOW_BATCHES, COLLAPSE_AUC,
    SCHEMA_VERSION, TAIL_FRACTION,
};
pub use sweep::{
    sweep_rho, CorBracket, Experiment, ProbeExperiment, ProbeOutcome, QuadraticSurrogate, SweepConfig, SweepEntry,
    SweepResult,
};
pub use theorem::{
    exact_estimate, high_agreement_instance, random_instance, verify_instance, verify_instance_with,
    verify_theorem_campaign, verify_theorem_campaign_with,
    zero_residual_instance, InstanceResult, TheoremInstance, TheoremReport, MAX_INSTANCE_PARAMS, THEOREM_GAP_TOL,
};

#[cfg(test)]
mod tests;
