use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use pnorm::driver::{SolveConfig, SparsifierKind};
use pnorm::generate::{InstanceKind, WeightProfile};
use pnorm_cli::commands::{
    apply_constants, run_generate, run_solve, run_sparsify, run_validate, GenerateArgs, SolveArgs, SparsifyArgs, ValidateArgs,
};
use pnorm_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "pnorm", version, about = "Smoothed p-norm solver, sparsifiers and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a reproducible random instance as JSON.
    Generate {
        #[arg(long, value_parser = parse_kind)]
        kind: InstanceKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long, default_value_t = 4.0)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Log-uniform weight range `lo:hi`.
        #[arg(long, default_value = "0.1:10", value_parser = parse_weights)]
        weights: WeightProfile,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the refinement driver and write a report.
    Solve {
        #[command(flatten)]
        common: Common,
        /// MWU trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        oracle: Switch,
    },
    /// Run a sparsifier and report its quality checks.
    Sparsify {
        #[command(flatten)]
        common: Common,
        /// `voltage`, `lewis`, `identity` or `flow` (the preprocessing pipeline).
        #[arg(long, alias = "kind")]
        sparsifier_kind: Option<String>,
        /// Random test vectors per check.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Run the invariant suite on an instance.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "on")]
        oracle: Switch,
        #[arg(long, default_value_t = 200)]
        samples: usize,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    input: PathBuf,
    /// Override the instance's p.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "identity")]
    sparsifier: String,
    /// Overrides such as `alpha=2,max_outer=100`.
    #[arg(long)]
    constants: Option<String>,
    /// Record wall-clock times (makes output depend on the machine).
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

fn parse_kind(s: &str) -> Result<InstanceKind, String> {
    s.parse().map_err(|e: pnorm::Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<WeightProfile, String> {
    s.parse().map_err(|e: pnorm::Error| e.to_string())
}

impl Common {
    fn config(&self, trace: bool) -> CliResult<SolveConfig> {
        let mut cfg = SolveConfig {
            epsilon: self.eps,
            seed: self.seed,
            sparsifier: self.sparsifier.parse()?,
            trace,
            timings: self.timings,
            ..SolveConfig::default()
        };
        apply_constants(&mut cfg, self.constants.as_deref().unwrap_or(""))?;
        Ok(cfg)
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("PNORM_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| CliError::Invalid(format!("PNORM_THREADS={v:?} is not a count")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| CliError::Solver(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    init_threads()?;
    match cli.command {
        Command::Generate { kind, n, m, p, seed, weights, output } => run_generate(&GenerateArgs { kind, n, m, p, seed, weights, output }),
        Command::Solve { common, trace, oracle } => run_solve(&SolveArgs {
            config: common.config(trace.is_some())?,
            input: common.input,
            p: common.p,
            oracle: matches!(oracle, Switch::On),
            trace,
            output: common.output,
        }),
        Command::Sparsify { common, sparsifier_kind, samples } => {
            let name = sparsifier_kind.unwrap_or_else(|| common.sparsifier.clone());
            let flow = name == "flow";
            let kind: SparsifierKind = if flow { SparsifierKind::Identity } else { name.parse()? };
            run_sparsify(&SparsifyArgs {
                config: common.config(false)?,
                input: common.input,
                kind,
                flow,
                p: common.p,
                samples,
                output: common.output,
            })
        }
        Command::Validate { common, oracle, samples } => run_validate(&ValidateArgs {
            config: common.config(false)?,
            input: common.input,
            p: common.p,
            oracle: matches!(oracle, Switch::On),
            samples,
            output: common.output,
        }),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pnorm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
