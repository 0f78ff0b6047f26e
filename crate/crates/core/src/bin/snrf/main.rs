// SPDX-License-Identifier: MIT OR Apache-2.0

//! `snrf` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use snrf_core::merge::{MergeMethod, SvdOrder};
use snrf_core::neuron::NeuronId;
use snrf_core::profile::{ImpactMode, Selector};
use snrf_core::Error;

#[derive(Parser, Debug)]
#[command(name = "snrf", version, about = "Shared-neuron profiling, probing and low-rank merging for toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score every neuron per context and select the context-neuron set.
    Profile(ProfileArgs),
    /// Intersect two context-neuron sets and report overlap.
    Shared(SharedArgs),
    /// Full-model output deltas for a set versus random equal-budget sets.
    AblateEval(AblateArgs),
    /// Greedy decoding with one neuron amplified; token frequency report.
    Amplify(AmplifyArgs),
    /// Merge a source checkpoint into a target.
    Merge(MergeArgs),
    /// Sweep synthetic quadratic scenarios and check the merge bound.
    ValidateTheory(TheoryArgs),
    /// Write a seeded random checkpoint, or a perturbed copy of one.
    Init(InitArgs),
}

#[derive(Args, Debug)]
pub struct ProfileArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "layer-local")]
    pub mode: ImpactMode,
    #[arg(long, default_value_t = Selector::default())]
    pub select: Selector,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SharedArgs {
    #[arg(long)]
    pub set_a: PathBuf,
    #[arg(long)]
    pub set_b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Set to deactivate.
    #[arg(long, required_unless_present = "random_budget_from")]
    pub set: Option<PathBuf>,
    /// Draw random sets with the per-(layer, kind) budget of this set.
    #[arg(long)]
    pub random_budget_from: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AmplifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Neuron as LAYER:KIND:INDEX, e.g. 1:fwd.up:12.
    #[arg(long)]
    pub neuron: NeuronId,
    #[arg(long)]
    pub lambda: f64,
    #[arg(long, default_value_t = 32)]
    pub max_new: usize,
    /// `id<TAB>string` display names for tokens.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Keep only the K most frequent tokens in the report.
    #[arg(long)]
    pub top: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    /// Shared-neuron set (required for snrf).
    #[arg(long)]
    pub shared: Option<PathBuf>,
    #[arg(long, default_value = "snrf")]
    pub method: MergeMethod,
    /// Truncation rank (required for snrf).
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.0)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "full-then-mask")]
    pub svd_order: SvdOrder,
    /// Accept beta outside [0, 1].
    #[arg(long)]
    pub allow_beta_override: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TheoryArgs {
    #[arg(long, default_value_t = 500)]
    pub scenarios: usize,
    /// ROWSxCOLS.
    #[arg(long, default_value = "8x6")]
    pub dims: String,
    #[arg(long, default_value_t = 4)]
    pub s_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.5)]
    pub eta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub mu_s: f64,
    #[arg(long, default_value_t = 10.0)]
    pub mu_perp: f64,
    #[arg(long, default_value_t = 2)]
    pub rank: usize,
    /// Comma-separated step sizes.
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.5,1")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub d_model: usize,
    #[arg(long, default_value_t = 16)]
    pub d_inter: usize,
    #[arg(long, default_value_t = 32)]
    pub vocab: usize,
    /// Perturb this checkpoint instead of drawing fresh weights.
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1, requires = "base")]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("SNRF_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Error::Param(format!("SNRF_THREADS must be an integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Param(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Profile(a) => commands::profile(a),
        Command::Shared(a) => commands::shared(a),
        Command::AblateEval(a) => commands::ablate_eval(a),
        Command::Amplify(a) => commands::amplify(a),
        Command::Merge(a) => commands::merge(a),
        Command::ValidateTheory(a) => commands::validate_theory(a),
        Command::Init(a) => commands::init(a),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: param: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = match &e {
                Error::Param(m) => m.clone(),
                other => other.to_string(),
            };
            eprintln!("error: {}: {}", e.category(), one_line(&msg));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
