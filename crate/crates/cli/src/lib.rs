//! Command-line front end: `analyze`, `query`, `evaluate`, `report` and the
//! local HTTP service behind `serve`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod commands;
pub mod serve;

pub use commands::{CliError, EvaluationRecord, PairScore};

#[derive(Debug, Parser)]
#[command(
    name = "framewise",
    version,
    about = "Detection-gated video description and incident search"
)]
pub struct Cli {
    /// Directory holding `runs/` and `evaluations/`.
    #[arg(long, global = true, env = "FRAMEWISE_DATA_ROOT", default_value = "framewise-data")]
    pub data_root: PathBuf,

    /// More log output on stderr (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample, gate, describe and summarise a video or frame directory.
    Analyze(AnalyzeArgs),
    /// Ask a stored run for incidents and print the table.
    Query(QueryArgs),
    /// Score generated text against reference captions.
    Evaluate(EvaluateArgs),
    /// Print a stored run's report.
    Report(ReportArgs),
    /// Serve runs, reports and frames over HTTP on localhost.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Video file to sample with ffmpeg.
    #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
    pub video: Option<PathBuf>,
    /// Directory of numbered stills (`000000.png`, `000001.png`, ...).
    #[arg(long)]
    pub frames: Option<PathBuf>,
    /// TOML pipeline configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run id; generated when absent. Existing runs are never overwritten.
    #[arg(long)]
    pub run_id: Option<String>,
    /// `mock:<fixture.json>`, `exec:<program>` or `http:<url>`.
    #[arg(long)]
    pub detector: String,
    /// Extra argument passed to an `exec:` detector before the image path.
    #[arg(long = "detector-arg", allow_hyphen_values = true)]
    pub detector_args: Vec<String>,
    #[command(flatten)]
    pub providers: ProviderArgs,
    /// Sampling rate, e.g. `1` or `1/2` (overrides the config).
    #[arg(long)]
    pub frame_rate: Option<String>,
    /// Concurrent describe calls (overrides `max_parallel_calls`).
    #[arg(long)]
    pub parallel: Option<usize>,
    /// per_frame, sequence or collage.
    #[arg(long)]
    pub submission_mode: Option<String>,
    /// indirect or direct.
    #[arg(long)]
    pub prompting_mode: Option<String>,
    /// Query asked after summarising (bound into the prompt in direct mode).
    #[arg(long)]
    pub query: Option<String>,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    /// Vision provider: `gemini:<model>`, `openai:<model>[@<url>]`, `mock:<fixture.json>` or `echo`.
    #[arg(long, default_value = "gemini:gemini-pro-vision")]
    pub vision_provider: String,
    /// Text provider, same forms as the vision provider.
    #[arg(long, default_value = "gemini:gemini-pro")]
    pub text_provider: String,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    pub run_id: String,
    pub query: String,
    /// Text provider, same forms as for `analyze`.
    #[arg(long, default_value = "gemini:gemini-pro")]
    pub text_provider: String,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// CSV with `generated,truth` columns.
    #[arg(long, conflicts_with_all = ["run", "truth"], required_unless_present = "run")]
    pub pairs: Option<PathBuf>,
    /// Score this run's summary against `--truth`.
    #[arg(long, requires = "truth")]
    pub run: Option<String>,
    /// Reference caption file for `--run`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Whitespace-separated word vectors (GloVe text format).
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = framewise::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub run_id: String,
    /// markdown, json or csv.
    #[arg(long, default_value = "markdown")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Text provider used by the query endpoint.
    #[arg(long, default_value = "gemini:gemini-pro")]
    pub text_provider: String,
}

/// Runs one command, writing results to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<(), CliError> {
    match cli.command {
        Command::Analyze(a) => commands::analyze(&cli.data_root, a, out),
        Command::Query(q) => commands::query(&cli.data_root, q, out),
        Command::Evaluate(e) => commands::evaluate(&cli.data_root, e, out),
        Command::Report(r) => commands::report(&cli.data_root, r, out),
        Command::Serve(s) => serve::run(&cli.data_root, s, out),
    }
}
