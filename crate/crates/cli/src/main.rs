use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "cordic-ve", version, about = "Bit-accurate CORDIC vector engine simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate a model on a dataset and write results.json and cycles.csv.
    Run(RunArgs),
    /// Evaluate a model across one configuration axis and write sweep.csv.
    Sweep(SweepArgs),
    /// Emit the LIFO parameter image for a model, or check an existing one.
    Loadimg(LoadimgArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Model description (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Engine configuration (JSON); built-in defaults when absent.
    #[arg(long)]
    pub engine: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Seed for sample subsetting.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Evaluate a seeded random subset of this many samples.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// uniform-acc, uniform-approx, heuristic or file=PATH.
    #[arg(long, default_value = "uniform-acc")]
    pub modes: String,
    /// Calibration dataset for the heuristic (defaults to --dataset).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Sensitivity threshold in accuracy points for the heuristic.
    #[arg(long, default_value_t = cordic_ve_core::runner::DEFAULT_SENSITIVITY_THRESHOLD)]
    pub threshold: f64,
    /// Record the control-signal trace of the first sample into trace.csv.
    #[arg(long)]
    pub trace: bool,
    /// Cross-check parameters read back through the loader against the quantizer.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// iterations, precision or pes.
    #[arg(long)]
    pub sweep: String,
}

#[derive(Args, Debug)]
pub struct LoadimgArgs {
    /// Model description (JSON).
    #[arg(long)]
    pub model: PathBuf,
    /// Engine configuration (JSON) supplying layer defaults.
    #[arg(long)]
    pub engine: Option<PathBuf>,
    /// Output directory for params.img.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Check this existing image instead of emitting one.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Reload the image and round-trip it through the loader.
    #[arg(long)]
    pub verify: bool,
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
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(Failure::Config(anyhow::anyhow!("{first}")));
        }
    };
    let outcome = commands::init_threads().and_then(|()| match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Loadimg(a) => commands::loadimg(&a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (tag, code, err) = match f {
        Failure::Config(e) => ("config", 1, e),
        Failure::Runtime(e) => ("runtime", 2, e),
    };
    let line = format!("{err:#}").replace('\n', " ");
    eprintln!("error[{tag}]: {line}");
    ExitCode::from(code)
}
