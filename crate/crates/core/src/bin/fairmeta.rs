use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fairmeta::harness::{self, GenParams, Overrides};

#[derive(Parser)]
#[command(name = "fairmeta", version, about = "Fairness-aware few-shot meta-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic task family to a dataset file.
    Gen {
        #[command(flatten)]
        family: GenParams,
        #[arg(long, default_value = "data/synthetic.txt")]
        out: PathBuf,
    },
    /// Meta-train and score held-out classes.
    Train {
        /// TOML file with the same keys as the flags.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score saved parameters on fresh held-out episodes.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn resolve(config: Option<&PathBuf>, overrides: &Overrides) -> anyhow::Result<harness::RunConfig> {
    let file = config.map(|p| Overrides::from_file(p)).transpose()?;
    Ok(harness::parse_config(overrides, file.as_ref())?)
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Gen { family, out } => {
            let data = harness::gen_data(&family, &out)?;
            println!("wrote {} examples to {}", data.len(), out.display());
        }
        Command::Train { config, overrides } => {
            let cfg = resolve(config.as_ref(), &overrides)?;
            let outcome = harness::run_experiment(&cfg).context("training failed")?;
            let t = &outcome.summary.test;
            println!(
                "test accuracy {:.4} ± {:.4}  |DBC| {:.4} ± {:.4}  DI {:.3}  ({} episodes)",
                t.accuracy_mean, t.accuracy_std, t.dbc_abs_mean, t.dbc_abs_std, t.disparate_impact, t.episodes
            );
            println!("artifacts in {}", cfg.out.display());
        }
        Command::Eval { params, config, overrides } => {
            let cfg = resolve(config.as_ref(), &overrides)?;
            let t = harness::eval_saved(&cfg, &params)?;
            println!("{}", serde_json::to_string_pretty(&t)?);
        }
    }
    Ok(())
}
