use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use refgame::experiment::{run_command, validate_config, Command, RunOptions, LOCK_FILE};

#[derive(Parser)]
#[command(name = "refgame", version, about = "Image reference game experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overwrite existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads for rollouts; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Validate the config and write the materialized lockfile.
    Validate,
    /// Generate or import the speaker and listener feature tables.
    GenFeatures,
    /// Sample clusters and the training and test listener populations.
    GenPopulation,
    /// Train one speaker per seed.
    Train,
    /// Mean evaluation reward against the number of practice games.
    RewardCurve,
    /// K-Means on agent embeddings, scored by variation of information.
    ClusterEval,
    /// Rate of misunderstood attributes per episode position.
    UsageRate,
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// gen-features, gen-population, train, reward-curve, cluster-eval, usage-rate.
    All,
}

impl Cmd {
    fn commands(self) -> Vec<Command> {
        match self {
            Cmd::Validate => vec![],
            Cmd::GenFeatures => vec![Command::GenFeatures],
            Cmd::GenPopulation => vec![Command::GenPopulation],
            Cmd::Train => vec![Command::Train],
            Cmd::RewardCurve => vec![Command::RewardCurve],
            Cmd::ClusterEval => vec![Command::ClusterEval],
            Cmd::UsageRate => vec![Command::UsageRate],
            Cmd::Gradcheck => vec![Command::Gradcheck],
            Cmd::All => Command::ALL[..6].to_vec(),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let config = cli.config.context("--config is required")?;
    let mut cfg = validate_config(&config).with_context(|| format!("validating {}", config.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    let opts = RunOptions { force: cli.force };
    if matches!(cli.command, Cmd::Validate) {
        std::fs::create_dir_all(&cli.out)?;
        let lock = cli.out.join(LOCK_FILE);
        if lock.exists() && !cli.force {
            anyhow::bail!("refusing to overwrite {} without --force", lock.display());
        }
        std::fs::write(&lock, cfg.lock_text()?)?;
        println!("config ok; lockfile written to {}", lock.display());
        return Ok(());
    }
    for cmd in cli.command.commands() {
        log::info!("running {cmd}");
        run_command(cmd, &cfg, &cli.out, opts).with_context(|| format!("{cmd} failed"))?;
        println!("{cmd}: ok");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
