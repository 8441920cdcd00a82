//! `patience` command-line tool: knowledge-base validation, terminal
//! consultations, simulated cases, benchmarks, reports and the HTTP service.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patience_core::backend::BackendKind;
use patience_core::prob::SelectionMode;

#[derive(Debug, Parser)]
#[command(
    name = "patience",
    version,
    about = "Entropy-guided diagnostic dialogue engine (research use only)"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Knowledge base (JSON lines).
    #[arg(long, global = true)]
    pub kb: Option<PathBuf>,
    /// TOML config file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "scripted|remote")]
    pub backend: Option<BackendKind>,
    /// Directory of scripted-backend JSON files.
    #[arg(long, global = true)]
    pub script_bundle: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub max_turns: Option<usize>,
    /// Candidate questions per turn.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Simulated answers per candidate.
    #[arg(long, global = true)]
    pub l_max: Option<usize>,
    #[arg(long, global = true, value_name = "literal|eig")]
    pub selection_mode: Option<SelectionMode>,
    /// Disable the entropy, top-1 and uninformative stops.
    #[arg(long, global = true)]
    pub fixed_rounds: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a knowledge base and print record counts.
    Ingest,
    /// Interactive consultation in the terminal.
    Consult(ConsultArgs),
    /// Run one case against the simulated patient.
    Simulate(SimulateArgs),
    /// Run every case under each policy and write run.json and cases.csv.
    Bench(BenchArgs),
    /// Entropy curves, confidence table and summary from a benchmark run.
    Report(ReportArgs),
    /// HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ConsultArgs {
    /// Opening statement; read from the first input line when absent.
    #[arg(long)]
    pub opening: Option<String>,
    /// Write the final transcript here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Case id.
    #[arg(long = "case")]
    pub case_id: String,
    #[arg(long)]
    pub cases: Option<PathBuf>,
    /// Single policy: app|random|first|oneshot.
    #[arg(long, default_value = "app")]
    pub policy: String,
    /// Write the transcript here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub cases: Option<PathBuf>,
    /// Comma-separated: app,random,first,oneshot.
    #[arg(long)]
    pub policies: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// run.json from `bench`, or the directory containing it.
    #[arg(long)]
    pub run: PathBuf,
    /// Output directory; defaults to the run's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub addr: Option<String>,
    /// Directory for finished-session transcripts.
    #[arg(long)]
    pub transcripts: Option<PathBuf>,
    /// Static chat client to serve under /ui/.
    #[arg(long)]
    pub ui: Option<PathBuf>,
    /// Idle session lifetime in seconds.
    #[arg(long)]
    pub ttl_secs: Option<u64>,
    /// Allowed browser origin (repeatable); any origin when none given.
    #[arg(long = "cors-origin")]
    pub cors_origins: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
