//! `sfiqa`: train a source model, adapt it to unlabelled targets, evaluate,
//! and analyse rater histograms.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric or
//! fit error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sfiqa::Result;

use commands::RunOptions;

#[derive(Debug, Parser)]
#[command(
    name = "sfiqa",
    version,
    about = "Source-free domain adaptation for blind image quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed; repeat to fan out over several runs.
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run the seed fan-out in parallel threads.
    #[arg(long)]
    parallel: bool,
}

#[derive(Debug, Args)]
struct Ablation {
    /// Drop the entropy term.
    #[arg(long)]
    no_entropy: bool,
    /// Drop the diversity term.
    #[arg(long)]
    no_div: bool,
    /// Drop the Gaussian regularisation term.
    #[arg(long)]
    no_gau: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a source model on labelled data.
    TrainSource(Common),
    /// Adapt a source model to all targets at once.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Adapt a source model to the targets one after another.
    AdaptContinual {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ablation: Ablation,
    },
    /// Report SROCC, PLCC and RMSE on labelled datasets.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Branch to use, or `auto` to pick one per dataset.
        #[arg(long)]
        domain: Option<String>,
    },
    /// Goodness of fit of Gaussian, Gamma and Weibull to rater histograms.
    Gof(Common),
    /// k-means over rater histograms.
    Cluster(Common),
}

fn options(common: &Common, ablation: Option<&Ablation>) -> RunOptions {
    RunOptions {
        seeds: common.seeds.clone(),
        parallel: common.parallel,
        no_entropy: ablation.is_some_and(|a| a.no_entropy),
        no_div: ablation.is_some_and(|a| a.no_div),
        no_gau: ablation.is_some_and(|a| a.no_gau),
    }
}

fn first_seed(common: &Common, cfg: &config::Config) -> u64 {
    common.seeds.first().copied().unwrap_or(cfg.train.seed)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::TrainSource(c) => {
            let cfg = config::load(&c.config, &c.overrides, false)?;
            commands::train_source(&cfg, &options(c, None), &c.out)
        }
        Command::Adapt { common, ablation } | Command::AdaptContinual { common, ablation } => {
            let continual = matches!(cli.command, Command::AdaptContinual { .. });
            let cfg = config::load(&common.config, &common.overrides, true)?;
            commands::adapt(
                &cfg,
                &options(common, Some(ablation)),
                &common.out,
                continual,
            )
        }
        Command::Evaluate { common, domain } => {
            let cfg = config::load(&common.config, &common.overrides, false)?;
            commands::evaluate(&cfg, domain.as_deref(), &common.out)
        }
        Command::Gof(c) => {
            let cfg = config::load(&c.config, &c.overrides, false)?;
            commands::gof(&cfg, first_seed(c, &cfg), &c.out)
        }
        Command::Cluster(c) => {
            let cfg = config::load(&c.config, &c.overrides, false)?;
            commands::cluster(&cfg, first_seed(c, &cfg), &c.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
