//! `corlab`: train probes, sweep the SAM radius, inspect diagnostics and
//! loss landscapes, verify the decomposition identity and compare heads.
//!
//! Exit codes: 0 success, 1 I/O or internal error, 2 configuration error,
//! 3 numerical failure, 4 failed theorem verification.

mod document;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corlab_core::diagnostics::landscape_sample;
use corlab_core::harness::{
    corit_vs_baseline, extract_features, run_on_features, sweep_rho, verify_theorem_campaign_with, write_json,
    write_run_outputs, FeatureExtractor, HeadMode, ProbeExperiment, RunConfig, RunOutcome, SweepResult,
    THEOREM_GAP_TOL,
};
use corlab_core::objective::{LogisticObjective, Objective};
use corlab_core::regions::write_masks_csv;
use corlab_core::synth::{dump_csv, generate, write_dataset, Split};
use corlab_core::Error;
use serde::Serialize;

use document::{Document, SweepSection};

#[derive(Parser, Debug)]
#[command(name = "corlab", version, about = "Optimization-collapse laboratory for SAM-trained probes")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Global {
    /// JSON document: a run configuration, or `{"run": …, "sweep": …}`.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Data and optimizer seed (campaign seed for `verify-theorem`).
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// SAM radius override.
    #[arg(long, global = true, value_name = "R")]
    rho: Option<f64>,
    /// Only errors on stderr, nothing on stdout.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one probe and write its metrics, diagnostics and summary.
    Train,
    /// Train across radii, then bisect the first collapse boundary.
    SweepRho {
        /// Comma-separated ascending radii; overrides `sweep.rhos`.
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
    },
    /// Train and report the COR trajectory, GSNR phases and region masks.
    Diagnose,
    /// Train, then sample the loss on a plane through the final head.
    Landscape,
    /// Check the Hessian-covariance identity on random softmax regressions.
    VerifyTheorem {
        #[arg(long)]
        instances: Option<usize>,
        /// Largest relative gap that still passes.
        #[arg(long, default_value_t = THEOREM_GAP_TOL)]
        gap_tol: f64,
    },
    /// Run the plain probe and the CoRIT head on the same configuration.
    Compare,
    /// Write a generated split as CSV, optionally also in the binary format.
    DumpCsv {
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        #[arg(long)]
        binary: bool,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SplitArg {
    Train,
    Test,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Numerical(String),
    Theorem(String),
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Config(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Theorem(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Numerical(m) | Failure::Theorem(m) | Failure::Other(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Invalid(_) | Error::Json(_) => Failure::Config(m),
            Error::NonFinite { .. }
            | Error::NonFiniteStep { .. }
            | Error::NonFiniteActivation { .. }
            | Error::NonConvergence { .. }
            | Error::WellPosedness { .. } => Failure::Numerical(m),
            _ => Failure::Other(m),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Other(e.to_string())
    }
}

type CliResult<T> = Result<T, Failure>;

struct Ctx {
    global: Global,
}

impl Ctx {
    fn document(&self) -> CliResult<Document> {
        let path = self
            .global
            .config
            .as_deref()
            .ok_or_else(|| Failure::Config("this subcommand needs --config PATH".into()))?;
        let mut doc = Document::load(path).map_err(Failure::Config)?;
        if let Some(seed) = self.global.seed {
            doc.run = doc.run.with_seed(seed);
        }
        if let Some(rho) = self.global.rho {
            doc.run = doc.run.with_rho(rho);
        }
        if let Some(out) = &self.global.out {
            doc.run.output_dir = Some(out.clone());
        }
        doc.run.validate()?;
        Ok(doc)
    }

    fn out_dir(&self, run: &RunConfig) -> Option<PathBuf> {
        self.global.out.clone().or_else(|| run.output_dir.clone())
    }

    fn emit<T: Serialize>(&self, value: &T) -> CliResult<()> {
        if !self.global.quiet {
            let mut stdout = io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, value).map_err(Error::from)?;
            writeln!(stdout)?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(write_json(path, value)?)
}

/// A run that stopped on a non-finite state still wrote its outputs; the
/// exit code reports it.
fn check_run(out: &RunOutcome) -> CliResult<()> {
    match &out.failure {
        Some(f) => Err(Failure::Numerical(format!("run failed at step {}: {}", f.step, f.message))),
        None => Ok(()),
    }
}

fn train(ctx: &Ctx) -> CliResult<()> {
    let doc = ctx.document()?;
    let out = corlab_core::harness::run_train(&doc.run)?;
    ctx.emit(&out.summary())?;
    check_run(&out)
}

fn write_sweep_csv(path: &Path, r: &SweepResult) -> CliResult<()> {
    let mut f = create(path)?;
    writeln!(f, "rho,train_auc,test_auc,collapsed,collapsed_votes,runs,refined")?;
    for e in &r.entries {
        writeln!(
            f,
            "{:?},{:?},{:?},{},{},{},{}",
            e.rho, e.train_auc, e.test_auc, e.collapsed, e.collapsed_votes, e.runs, e.refined
        )?;
    }
    f.flush()?;
    Ok(())
}

fn sweep(ctx: &Ctx, rhos: Option<Vec<f64>>) -> CliResult<()> {
    let doc = ctx.document()?;
    let section = match (rhos, doc.sweep.clone()) {
        (Some(rhos), Some(s)) => SweepSection { rhos, ..s },
        (Some(rhos), None) => SweepSection::with_rhos(rhos),
        (None, Some(s)) => s,
        (None, None) => return Err(Failure::Config("sweep-rho needs radii: sweep.rhos or --rhos".into())),
    };
    let exp = ProbeExperiment::new(doc.run.clone())?;
    let result = sweep_rho(&exp, &section.rhos, &section.config())?;
    if let Some(dir) = ctx.out_dir(&doc.run) {
        save_json(&dir.join("sweep.json"), &result)?;
        write_sweep_csv(&dir.join("sweep.csv"), &result)?;
    }
    ctx.emit(&result)
}

#[derive(Serialize)]
struct DiagnoseReport<'a> {
    schema_version: u32,
    summary: corlab_core::harness::RunSummary,
    cor: &'a Option<corlab_core::diagnostics::CorReport>,
    gsnr_trace: &'a Option<corlab_core::diagnostics::GsnrTrace>,
    snapshots: &'a [corlab_core::diagnostics::DiagnosticSnapshot],
}

fn diagnose(ctx: &Ctx) -> CliResult<()> {
    let doc = ctx.document()?;
    let out = corlab_core::harness::run_train(&doc.run)?;
    let report = DiagnoseReport {
        schema_version: corlab_core::harness::SCHEMA_VERSION,
        summary: out.summary(),
        cor: &out.cor,
        gsnr_trace: &out.gsnr_trace,
        snapshots: &out.snapshots,
    };
    if let Some(dir) = ctx.out_dir(&doc.run) {
        save_json(&dir.join("diagnose.json"), &report)?;
        if doc.run.head == HeadMode::Corit {
            // Masks of the first training sample, one grid per layer.
            let fx = FeatureExtractor::new(&doc.run)?;
            let ds = generate(&doc.run.task, Split::Train)?;
            let trace = fx.corit_trace(&ds.samples[0])?;
            let mut f = create(&dir.join("masks.csv"))?;
            write_masks_csv(&mut f, &trace.masks)?;
            f.flush()?;
        }
    }
    ctx.emit(&report)?;
    check_run(&out)
}

#[derive(Serialize)]
struct LandscapeReport {
    half_width: f64,
    resolution: usize,
    center_loss: f64,
    min_loss: f64,
    max_loss: f64,
    nonfinite_cells: usize,
}

fn landscape(ctx: &Ctx) -> CliResult<()> {
    let doc = ctx.document()?;
    let features = extract_features(&doc.run)?;
    let out = run_on_features(&doc.run, &features)?;
    let dir = ctx.out_dir(&doc.run);
    if let Some(d) = &dir {
        write_run_outputs(d, &doc.run, &out)?;
    }
    let obj = LogisticObjective::new(features.train, features.train_labels)?;
    let w = out.head.to_flat();
    let d = w.len() - 1;
    let ls = &doc.landscape;
    let grid = landscape_sample(&obj, &w, &obj.all(), &[(0, d), (d, 1)], ls.half_width, ls.resolution, ls.seed)?;
    if let Some(d) = &dir {
        let mut f = create(&d.join("landscape.csv"))?;
        grid.write_csv(&mut f)?;
        f.flush()?;
    }
    let finite = grid.loss.iter().copied().filter(|l| l.is_finite());
    let mid = grid.resolution() / 2;
    ctx.emit(&LandscapeReport {
        half_width: ls.half_width,
        resolution: ls.resolution,
        center_loss: grid.at(mid, mid),
        min_loss: finite.clone().fold(f64::INFINITY, f64::min),
        max_loss: finite.fold(f64::NEG_INFINITY, f64::max),
        nonfinite_cells: grid.nonfinite.len(),
    })?;
    check_run(&out)
}

fn verify_theorem(ctx: &Ctx, instances: Option<usize>, gap_tol: f64) -> CliResult<()> {
    let section = match &ctx.global.config {
        Some(_) => ctx.document()?.theorem,
        None => Default::default(),
    };
    let n = instances.unwrap_or(section.instances);
    let seed = ctx.global.seed.unwrap_or(section.seed);
    let report = verify_theorem_campaign_with(n, seed, gap_tol)?;
    if let Some(dir) = &ctx.global.out {
        save_json(&dir.join("theorem.json"), &report)?;
    }
    if !ctx.global.quiet {
        println!(
            "{}/{} instances passed; max relative gap {:e}; min well-posed value {}",
            report.passed,
            report.instances.len(),
            report.max_rel_gap,
            report.min_well_posed_value
        );
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Theorem(format!("instances {:?} failed verification", report.failed)))
    }
}

fn compare(ctx: &Ctx) -> CliResult<()> {
    let doc = ctx.document()?;
    let sweep = doc.sweep.as_ref().map(|s| (s.rhos.clone(), s.config()));
    let report = corit_vs_baseline(&doc.run, sweep.as_ref().map(|(r, c)| (r.as_slice(), c)))?;
    if let Some(dir) = ctx.out_dir(&doc.run) {
        save_json(&dir.join("compare.json"), &report)?;
    }
    ctx.emit(&report)
}

fn dump(ctx: &Ctx, split: SplitArg, binary: bool) -> CliResult<()> {
    let doc = ctx.document()?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let ds = generate(&doc.run.task, split)?;
    let name = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    match ctx.out_dir(&doc.run) {
        Some(dir) => {
            let mut f = create(&dir.join(format!("dataset_{name}.csv")))?;
            dump_csv(&ds, &mut f)?;
            f.flush()?;
            if binary {
                let mut b = create(&dir.join(format!("dataset_{name}.bin")))?;
                write_dataset(&ds, &mut b)?;
                b.flush()?;
            }
        }
        None if binary => return Err(Failure::Config("--binary needs an output directory".into())),
        None if !ctx.global.quiet => {
            let mut stdout = io::stdout().lock();
            dump_csv(&ds, &mut stdout)?;
        }
        None => {}
    }
    Ok(())
}

fn dispatch(cli: Cli) -> CliResult<()> {
    let ctx = Ctx { global: cli.global };
    match cli.command {
        Command::Train => train(&ctx),
        Command::SweepRho { rhos } => sweep(&ctx, rhos),
        Command::Diagnose => diagnose(&ctx),
        Command::Landscape => landscape(&ctx),
        Command::VerifyTheorem { instances, gap_tol } => verify_theorem(&ctx, instances, gap_tol),
        Command::Compare => compare(&ctx),
        Command::DumpCsv { split, binary } => dump(&ctx, split, binary),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
