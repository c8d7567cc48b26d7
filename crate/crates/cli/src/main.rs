use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dlm_core::Strategy;

mod commands;
mod error;
mod io;

const EXIT_CODES: &str = "\
Exit codes:
  0   success
  2   malformed input file (task, config, profile or script JSON)
  3   invalid configuration value
  4   decoding failed
  5   file system error
  64  usage error";

#[derive(Parser)]
#[command(name = "dlm", version, about = "Block-wise diffusion LM decoding harness", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode every task under one strategy.
    #[command(after_help = EXIT_CODES)]
    Run {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        common: DecodeArgs,
    },
    /// Decode every task under several strategies and tabulate speedups.
    #[command(after_help = EXIT_CODES)]
    Compare {
        /// Comma-separated, e.g. vanilla,fast,odb. Speedups are relative to earlier entries.
        #[arg(long, value_delimiter = ',', value_parser = parse_strategy, required = true)]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        common: DecodeArgs,
    },
    /// Per-step cost records and phase intensity summary.
    #[command(after_help = EXIT_CODES)]
    Roofline {
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<Strategy>,
        #[command(flatten)]
        common: DecodeArgs,
    },
    /// Write a seeded synthetic task file.
    #[command(after_help = EXIT_CODES)]
    GenTasks(GenTasksArgs),
    /// Print the attention mask of a block or speculative layout as a 0/1 grid.
    #[command(after_help = EXIT_CODES)]
    Mask(MaskArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModelKind {
    /// Seeded transformer.
    Toy,
    /// Scripted logits: a schedule file via --script, otherwise a synthetic
    /// script using each task's eos_offset.
    Scripted,
}

#[derive(Args, Clone, Debug)]
pub struct DecodeArgs {
    /// JSONL task file.
    #[arg(long)]
    pub tasks: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "toy")]
    pub model: ModelKind,
    /// Model config JSON; defaults to the built-in toy config.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Scripted schedule JSON for --model scripted.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// Run config JSON; flags below override its fields.
    #[arg(long)]
    pub run_config: Option<PathBuf>,
    /// Hardware profile JSON.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[arg(long)]
    pub gen_length: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub accept_threshold: Option<f64>,
    #[arg(long)]
    pub truncate_threshold: Option<f64>,
    #[arg(long)]
    pub stage2_min_decoded: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Vanilla only: tau-leaping steps per block.
    #[arg(long)]
    pub tau_steps: Option<usize>,
    /// Disable jump-share speculation for odb.
    #[arg(long)]
    pub no_speculation: bool,
    /// Worker threads for decoding tasks (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct GenTasksArgs {
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub min_prompt: usize,
    #[arg(long, default_value_t = 16)]
    pub max_prompt: usize,
    /// Base EOS response offset written into every task.
    #[arg(long)]
    pub eos_offset: Option<usize>,
    /// Random spread added to --eos-offset, uniform in [0, jitter].
    #[arg(long, default_value_t = 0)]
    pub eos_jitter: usize,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Output JSONL path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct MaskArgs {
    #[arg(long, default_value_t = 5)]
    pub block_size: usize,
    /// Cached positions before the block.
    #[arg(long, default_value_t = 5)]
    pub prefix_len: usize,
    /// Cached positions after the block.
    #[arg(long, default_value_t = 10)]
    pub suffix_len: usize,
    /// Speculation stage, 1 or 2.
    #[arg(long, default_value_t = 1)]
    pub stage: u8,
    /// Number of candidates; 0 gives the plain block layout.
    #[arg(long, default_value_t = 2)]
    pub candidates: usize,
    /// Decoded positions at the end of the block.
    #[arg(long, default_value_t = 0)]
    pub decoded: usize,
    /// Write the CSV grid here instead of stdout.
    #[arg(long)]
    pub dump_mask: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run { strategy, common } => commands::run(&common, strategy),
        Command::Compare { strategies, common } => commands::compare(&common, &strategies),
        Command::Roofline { strategy, common } => commands::roofline(&common, strategy),
        Command::GenTasks(args) => commands::gen_tasks(&args),
        Command::Mask(args) => commands::mask(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
