//! `drcf` binary: doubly robust estimation of conditional linear
//! functionals and the Monte Carlo experiments around it.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drcf::commands::{execute, exit_code};
use drcf::config::{parse_config_file, resolve, CommandName, KeyValue};

#[derive(Parser)]
#[command(
    name = "drcf",
    version,
    about = "Doubly robust conditional linear functionals: cross-fit estimation and Monte Carlo experiments",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file with dotted keys (flags override it)
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Cross-fit scheme: none | 2way | 3way
    #[arg(long)]
    scheme: Option<String>,
    /// Estimand: cov | trt | ctrl | cate
    #[arg(long)]
    estimand: Option<String>,
    /// RNG seed (replications use counter-based streams of it)
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: machine parallelism)
    #[arg(long)]
    threads: Option<usize>,
    /// Directory for output artifacts (default: current directory)
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Artifact format: csv | json
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset CSV with header x1,...,xd,a,y
    #[arg(long, value_name = "FILE")]
    input: Option<PathBuf>,
    /// Target points in original units, e.g. "0.3;0.7" (coordinates
    /// comma-separated, points semicolon-separated)
    #[arg(long)]
    targets: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Cross-fit estimates of a conditional functional on a dataset CSV
    Estimate(EstimateArgs),
    /// Monte Carlo bias/sd/rmse of one estimator configuration
    Simulate(CommonArgs),
    /// Own-observation and nuisance-coupling bias across split schemes
    #[command(name = "bias-decomp")]
    BiasDecomp(CommonArgs),
    /// RMSE convergence rates over a sample-size grid
    Rates(CommonArgs),
    /// Mean-zero moment checks, eigenvalue indicators, reproducing residuals
    Diagnostics(CommonArgs),
}

fn flag_pairs(common: &CommonArgs) -> Vec<KeyValue> {
    let mut pairs = Vec::new();
    let mut push = |key: &str, value: Option<String>| {
        if let Some(v) = value {
            pairs.push(KeyValue::new(key, v, format!("flag --{}", key.replace('.', "-"))));
        }
    };
    push("scheme", common.scheme.clone());
    push("estimand", common.estimand.clone());
    push("seed", common.seed.map(|s| s.to_string()));
    push("threads", common.threads.map(|t| t.to_string()));
    push("out.dir", common.out_dir.as_ref().map(|p| p.display().to_string()));
    push("format", common.format.clone());
    pairs
}

fn gather(common: &CommonArgs, extra: Vec<KeyValue>) -> Result<Vec<KeyValue>, drcf_core::Error> {
    let mut pairs = match &common.config {
        Some(path) => parse_config_file(path)?,
        None => Vec::new(),
    };
    pairs.extend(flag_pairs(common));
    pairs.extend(extra);
    Ok(pairs)
}

fn run(cli: Cli) -> Result<(), drcf_core::Error> {
    let (name, pairs) = match &cli.command {
        Cmd::Estimate(args) => {
            let mut extra = Vec::new();
            if let Some(input) = &args.input {
                extra.push(KeyValue::new(
                    "input",
                    input.display().to_string(),
                    "flag --input".into(),
                ));
            }
            if let Some(targets) = &args.targets {
                extra.push(KeyValue::new(
                    "targets",
                    targets.clone(),
                    "flag --targets".into(),
                ));
            }
            (CommandName::Estimate, gather(&args.common, extra)?)
        }
        Cmd::Simulate(common) => (CommandName::Simulate, gather(common, Vec::new())?),
        Cmd::BiasDecomp(common) => (CommandName::BiasDecomp, gather(common, Vec::new())?),
        Cmd::Rates(common) => (CommandName::Rates, gather(common, Vec::new())?),
        Cmd::Diagnostics(common) => (CommandName::Diagnostics, gather(common, Vec::new())?),
    };
    let config = resolve(name, &pairs)?;
    execute(&config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
