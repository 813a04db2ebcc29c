//! `strattn` command-line tool.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 on numerical failure
//! (divergence or a tolerance breach).

mod commands;
mod export;
mod oracle;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use strattn::icl::Precision;

#[derive(Debug, Parser)]
#[command(name = "strattn", version, about = "Structured attention scoring: checks, cost tables and ICL runs")]
pub struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run only this seed instead of the config's seed list.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; runs over several seeds use one run per worker.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Arithmetic precision; only f64 is implemented.
    #[arg(long, global = true, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Root directory for run outputs.
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    /// Print tables as markdown instead of CSV.
    #[arg(long, global = true)]
    pub markdown: bool,
    /// Leave the wall-clock column out of metrics files.
    #[arg(long, global = true)]
    pub no_wall_clock: bool,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: strattn::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Materialize a structured matrix with seeded random factors.
    Materialize {
        #[arg(long)]
        spec: PathBuf,
        /// Second spec drawn from the same seed; reports the largest entry gap.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-12)]
        tolerance: f64,
    },
    /// Cost table for the config's `cost.queries`.
    Flops,
    /// Finite-difference check of a one-layer model's gradients.
    GradCheck {
        /// standard, mlr-attention, bilinear-mlr or bilinear-btt.
        #[arg(long)]
        kind: String,
        #[arg(long = "D")]
        dim: usize,
        #[arg(long = "T")]
        seq_len: usize,
        #[arg(long, default_value_t = 1)]
        heads: usize,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Train on in-context linear regression.
    TrainIcl,
    /// Evaluation error at `N` of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 2048)]
        prompts: usize,
    },
    /// Structured products and MLR-attention scores against dense oracles.
    OracleSuite {
        /// Random configurations per family.
        #[arg(long, default_value_t = 50)]
        configs: usize,
        #[arg(long, default_value_t = 1e-10)]
        tolerance: f64,
    },
    /// Metric curves of one or more runs as `x,y,series` CSV.
    Export {
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "step")]
        x: String,
        #[arg(long, default_value = "eval_error")]
        y: String,
        /// Add a column with the median of `y` across runs at each `x`.
        #[arg(long)]
        median: bool,
    },
}

/// Failure classes with their exit codes.
#[derive(Debug)]
pub enum Failure {
    Invalid(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<strattn::Error> for Failure {
    fn from(e: strattn::Error) -> Self {
        if e.is_validation() {
            Failure::Invalid(e.to_string())
        } else {
            Failure::Numerical(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

pub type CliResult<T> = Result<T, Failure>;

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(p) = cli.precision {
        p.check_supported()?;
    }
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::Invalid("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    match &cli.command {
        Command::Materialize {
            spec,
            compare,
            tolerance,
        } => commands::materialize(cli, spec, compare.as_deref(), *tolerance),
        Command::Flops => commands::flops(cli),
        Command::GradCheck {
            kind,
            dim,
            seq_len,
            heads,
            tolerance,
        } => commands::grad_check(cli, kind, *dim, *seq_len, *heads, *tolerance),
        Command::TrainIcl => commands::train_icl(cli),
        Command::Eval { checkpoint, prompts } => commands::eval(cli, checkpoint, *prompts),
        Command::OracleSuite { configs, tolerance } => oracle::run(cli, *configs, *tolerance),
        Command::Export { runs, x, y, median } => export::run(runs, x, y, *median),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
