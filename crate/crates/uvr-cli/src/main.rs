//! `uvr`: build and query topic-image tables, train the joint embedding,
//! run gated attention fusion, audit gradients, and sweep retrieval knobs.
//!
//! stdout carries machine-readable output only (JSON lines or CSV); all
//! prose goes to stderr. Exit codes: 0 success, 1 command-line usage error,
//! 2 data or validation error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use uvr_core::Error;

mod commands;

#[derive(Parser)]
#[command(name = "uvr", version, about = "Topic-image retrieval and gated fusion toolkit")]
struct Cli {
    /// key=value config file; flags override it, it overrides defaults
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a topic-image lookup table from a caption corpus
    BuildTable(BuildTableArgs),
    /// Look up images for a text query against a table or embedding index
    Retrieve(RetrieveArgs),
    /// Train the joint text-image embedding and write the index
    TrainCmrm(TrainArgs),
    /// Fuse a text query with its retrieved image features
    Fuse(FuseArgs),
    /// Audit analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Sweep one retrieval or fusion knob on a synthetic corpus
    Sweep(SweepArgs),
}

#[derive(Args)]
struct BuildTableArgs {
    /// Caption corpus (JSONL); falls back to the config `corpus` path
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Stopword list, one word per line
    #[arg(long, value_name = "FILE")]
    stopwords: Option<PathBuf>,
    /// Output table file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Topic budget per caption
    #[arg(short, long)]
    w: Option<u32>,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Retrieval backend
    #[arg(long, value_parser = ["tilt", "cmrm"])]
    mode: String,
    /// Topic-image table (tilt mode)
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Embedding index (cmrm mode)
    #[arg(long, value_name = "FILE")]
    index: Option<PathBuf>,
    /// Query text
    #[arg(long)]
    text: String,
    /// Retrieval budget
    #[arg(short, long)]
    m: Option<usize>,
    /// Similarity threshold (cmrm mode)
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// Topic budget override (tilt mode)
    #[arg(short, long)]
    w: Option<u32>,
    /// Retrieval-side manipulation: none or random_mapping
    #[arg(long, value_name = "MODE")]
    ablate: Option<String>,
    /// Seed for the manipulation stream
    #[arg(long, value_name = "N")]
    ablate_seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Caption corpus (JSONL)
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Image feature file
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Stopword list applied while parsing the corpus
    #[arg(long, value_name = "FILE")]
    stopwords: Option<PathBuf>,
    /// Output index file
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    lr: Option<f64>,
    /// Triplet margin
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Joint embedding width
    #[arg(long)]
    d_e: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Hard-negative candidate scope
    #[arg(long, value_parser = ["batch", "global"])]
    mining: Option<String>,
    /// Hold out every k-th pair for the recall report (0: evaluate on all)
    #[arg(long)]
    holdout_every: Option<u32>,
    /// Recall cutoff reported after training
    #[arg(long)]
    recall_k: Option<usize>,
    /// Feature-side manipulation: none, shuffle, or random_init
    #[arg(long, value_name = "MODE")]
    ablate: Option<String>,
    /// Seed for the manipulation stream
    #[arg(long, value_name = "N")]
    ablate_seed: Option<u64>,
}

#[derive(Args)]
struct FuseArgs {
    /// Topic-image table to retrieve with
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
    /// Embedding index to retrieve with
    #[arg(long, value_name = "FILE")]
    index: Option<PathBuf>,
    /// Image feature file
    #[arg(long, value_name = "FILE")]
    features: Option<PathBuf>,
    /// Query text
    #[arg(long)]
    text: String,
    /// Second text; fuses both and stacks the outputs
    #[arg(long)]
    pair: Option<String>,
    /// key=value file for fusion hyperparameters (d, heads, d_ff, max_len, seed)
    #[arg(long, value_name = "FILE")]
    params: Option<PathBuf>,
    /// Clamp the gate to a constant in (0, 1) instead of the learned gate
    #[arg(long, value_name = "X")]
    fixed_lambda: Option<f64>,
    /// Retrieval budget
    #[arg(short, long)]
    m: Option<usize>,
    /// Similarity threshold (embedding retrieval)
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// Topic budget override (table retrieval)
    #[arg(short, long)]
    w: Option<u32>,
    /// Include the attention matrix in the output
    #[arg(long)]
    dump_alpha: bool,
    /// Include the gate matrix in the output
    #[arg(long)]
    dump_lambda: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Worst tolerated relative error per tensor
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct SweepArgs {
    /// Knob to sweep
    #[arg(long, value_parser = ["m", "delta", "lambda"])]
    param: String,
    /// Comma-separated grid values; negative entries are fine
    #[arg(long, allow_hyphen_values = true)]
    grid: String,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let result = match &cli.command {
        Command::BuildTable(args) => commands::build_table(&cli, args),
        Command::Retrieve(args) => commands::retrieve(&cli, args),
        Command::TrainCmrm(args) => commands::train_cmrm(&cli, args),
        Command::Fuse(args) => commands::fuse(&cli, args),
        Command::Gradcheck(args) => commands::gradcheck(&cli, args),
        Command::Sweep(args) => commands::sweep(&cli, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(match err {
                Error::Numeric(_) => 3,
                _ => 2,
            })
        }
    }
}
