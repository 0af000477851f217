//! `cfscm`: synthesize data, fit flow SCMs, harmonize, run ComBat and the
//! downstream evaluation from the command line.

mod commands;
mod error;
mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cfscm_core::eval::Task;
use cfscm_core::scm::XFlowKind;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cfscm", version = manifest::BUILD_ID, about = "Counterfactual harmonization with flow-based structural causal models")]
pub struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cmd {
    /// Generate a synthetic multi-site table, its noise sidecar and labels.
    Synth(SynthArgs),
    /// Fit a flow-based SCM by maximum likelihood.
    FitScm(FitArgs),
    /// Map every row to its counterfactual at a reference site.
    Harmonize(HarmonizeArgs),
    /// Fit ComBat and apply it.
    Combat(CombatArgs),
    /// Train the downstream MLP on feature variants and report per-site metrics.
    Eval(EvalArgs),
    /// Held-out log-likelihood of several models plus per-site histograms.
    DensityReport(DensityArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub preset: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    /// Feature count; each preset has its own default.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// affine, lspline or qspline.
    #[arg(long)]
    pub flow: XFlowKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Site count; defaults to the largest site id in the data plus one.
    #[arg(long)]
    pub n_sites: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// Print per-epoch loss to stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct HarmonizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Reference site every row is mapped to.
    #[arg(long)]
    pub ref_site: usize,
    #[arg(long, default_value_t = 32)]
    pub mc_samples: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON report; defaults to `<out>.report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct CombatArgs {
    /// Table the site effects are estimated on.
    #[arg(long)]
    pub data: PathBuf,
    /// Table to correct; defaults to `--data`.
    #[arg(long)]
    pub apply_to: Option<PathBuf>,
    #[arg(long)]
    pub n_sites: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Fitted parameters as JSON; defaults to `<out>.params.json`.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// age-regression or binary-classification.
    #[arg(long)]
    pub task: Task,
    /// Comma separated source site ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub source: Vec<usize>,
    /// Comma separated target site ids.
    #[arg(long, value_delimiter = ',', required = true)]
    pub target: Vec<usize>,
    /// `name=path`, repeatable. A `raw` variant is required.
    #[arg(long = "variant", required = true)]
    pub variants: Vec<String>,
    /// `subject_id,label` CSV; required for classification.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    /// CSV report; the JSON form goes to `<out>.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DensityArgs {
    /// Comma separated model files.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Seed for the model samples in the histograms.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the histogram JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Exit 2 unless every output matches the hash recorded in the manifest.
    #[arg(long)]
    pub check: bool,
}

fn parse(argv: &[OsString]) -> CliResult<Option<Cli>> {
    match Cli::try_parse_from(argv) {
        Ok(cli) => Ok(Some(cli)),
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                Ok(None)
            }
            _ => Err(CliError::usage(e.render().to_string())),
        },
    }
}

fn run(argv: Vec<OsString>) -> CliResult<()> {
    let Some(cli) = parse(&argv)? else {
        return Ok(());
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    commands::dispatch(cli.command, args)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.kind == error::Kind::Usage {
                eprintln!("{}", e.message.trim_end());
            }
            eprintln!("{}", e.report());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}
