use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use gssl_core::commands::{self, Context};
use gssl_core::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "gssl", version, about = "Train and evaluate segmentation uncertainty on synthetic domains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write source, target, pretraining and test datasets.
    Generate(Common),
    /// Pretrain encoders, then train the task networks, ensemble and gaussians.
    TrainTask(Common),
    /// Train the uncertainty network named in the config.
    TrainUncertainty(Common),
    /// Score every configured method on every evaluation domain.
    Evaluate(Common),
    /// Evaluate and write the summary table.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace existing datasets and checkpoints.
    #[arg(long)]
    overwrite: bool,
}

impl Common {
    fn context(&self) -> anyhow::Result<Context> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(Context::new(config, self.out.clone(), self.overwrite))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(c) => commands::cmd_generate(&c.context()?)?,
        Command::TrainTask(c) => commands::cmd_train_task(&c.context()?)?,
        Command::TrainUncertainty(c) => commands::cmd_train_uncertainty(&c.context()?)?,
        Command::Evaluate(c) => {
            for r in commands::cmd_evaluate(&c.context()?)? {
                println!("{}", r.csv_row());
            }
        }
        Command::Compare(c) => print!("{}", commands::cmd_compare(&c.context()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
