use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "psmamba", version, about = "Split state-space image restoration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum TaskArg {
    Denoise,
    Sr,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
pub enum AnalyzeMode {
    Adjacency,
    Decay,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a folder of PNG images.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        out: PathBuf,
        /// Training log (tab-separated); defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
    },
    /// Restore every PNG in a folder.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// PSNR/SSIM of predictions against ground truth, paired by file name.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Locality and decay diagnostics.
    Analyze {
        #[arg(long, value_enum)]
        mode: AnalyzeMode,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        /// Comma-separated split levels (adjacency mode).
        #[arg(long, default_value = "full,halves,quadrants,octants,sixteenths")]
        levels: String,
        /// Checkpoint whose block SSM is profiled (decay mode).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Parameter prefix of the block to profile.
        #[arg(long, default_value = "down.0.block.0")]
        block: String,
        /// Profile a single-state scalar model with this transition instead of a checkpoint.
        #[arg(long)]
        a: Option<f64>,
        #[arg(long, default_value_t = 4096)]
        l_full: usize,
        #[arg(long, default_value_t = 512)]
        l_patch: usize,
        /// Number of lags in the profile table.
        #[arg(long, default_value_t = 16)]
        lags: usize,
    },
    /// Write the seeded synthetic texture corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            data,
            task,
            out,
            log,
            resume,
            seed,
            deterministic,
        } => commands::train(commands::TrainArgs {
            config,
            data,
            task,
            out,
            log,
            resume,
            seed,
            deterministic,
        }),
        Command::Restore { ckpt, input, out, task } => commands::restore(&ckpt, &input, &out, task),
        Command::Eval { pred, gt } => commands::eval(&pred, &gt),
        Command::Analyze {
            mode,
            height,
            width,
            levels,
            ckpt,
            block,
            a,
            l_full,
            l_patch,
            lags,
        } => match mode {
            AnalyzeMode::Adjacency => commands::analyze_adjacency(height, width, &levels),
            AnalyzeMode::Decay => commands::analyze_decay(ckpt.as_deref(), &block, a, l_full, l_patch, lags),
        },
        Command::Synth { out, count, size, seed } => commands::synth(&out, count, size, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
