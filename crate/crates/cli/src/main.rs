mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mmq_core::pipeline::{QuantMethod, TaskKind};

use commands::{AnalyzeArgs, Outcome, QuantizeArgs};
use config::Config;

#[derive(Debug, Parser)]
#[command(name = "mmq", version, about = "Component-wise quantization lab for a toy multimodal pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GridMethod {
    Uniform,
    Gptq,
    Awq,
}

impl From<GridMethod> for QuantMethod {
    fn from(m: GridMethod) -> Self {
        match m {
            GridMethod::Uniform => QuantMethod::Uniform,
            GridMethod::Gptq => QuantMethod::Gptq,
            GridMethod::Awq => QuantMethod::Awq,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a quantization grid and write results CSV plus manifest.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: GridMethod,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the attribution surrogate and report component importances.
    Analyze {
        results: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        method: Option<QuantMethod>,
        #[arg(long, default_value = "toy")]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render score against bits-per-weight as SVG.
    Plot {
        results: PathBuf,
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize one selection and print the ledger and bits per weight.
    Quantize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        method: QuantMethod,
        #[arg(long)]
        bits: u8,
        /// `+`-separated, e.g. `vision+language`; all when omitted.
        #[arg(long)]
        components: Option<String>,
        #[arg(long)]
        groups: Option<String>,
        #[arg(long)]
        layer_types: Option<String>,
        /// Write the quantized weights in the binary weight format.
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

fn with_workers(config: &Config, f: impl FnOnce() -> Result<Outcome> + Send) -> Result<Outcome> {
    let workers = config.effective_workers()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("building worker pool")?;
    pool.install(f)
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Grid { config, method, out } => {
            let config = Config::load(&config)?;
            with_workers(&config, || commands::grid(&config, method.into(), out))
        }
        Command::Analyze { results, task, method, model, seed, out } => {
            commands::analyze(&AnalyzeArgs { results, task, method, model, seed, out })
        }
        Command::Plot { results, task, out } => commands::plot(&results, task, &out),
        Command::Quantize { config, method, bits, components, groups, layer_types, export } => {
            let config = Config::load(&config)?;
            let args = QuantizeArgs { method, bits, components, groups, layer_types, export };
            with_workers(&config, || commands::quantize(&config, &args))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::PartialFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
