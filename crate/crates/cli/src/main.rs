use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use safelayer::dump::QpDump;
use safelayer::experiment::{self, ExperimentConfig};
use safelayer::qp::{self, DEFAULT_MAX_ITERATIONS};
use safelayer::safe_rl::Strategy;

#[derive(Parser)]
#[command(name = "safelayer", version, about = "Safe-action reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (strategy, beta_coll, seed) cell of an experiment.
    Train(TrainArgs),
    /// Rebuild summaries and plot series from a run directory.
    Report {
        dir: PathBuf,
        /// Moving-average window (default: from the run's config.toml).
        #[arg(long)]
        window: Option<usize>,
        /// Reward level for the "Ep to R" column.
        #[arg(long, allow_hyphen_values = true)]
        threshold: Option<f64>,
    },
    /// Print the resolved configuration (defaults unless --config is given).
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Solve a QP read from a dump file and print the solved record.
    SolveQp {
        dump: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_ITERATIONS)]
        iterations: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the seed list.
    #[arg(long)]
    seed: Vec<u64>,
    /// Replaces the strategy list.
    #[arg(long)]
    strategy: Vec<Strategy>,
    /// Replaces the beta_coll list.
    #[arg(long)]
    beta_coll: Vec<f64>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of parallel environment instances per cell.
    #[arg(long)]
    parallel: Option<usize>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(ExperimentConfig::from_toml(&text).with_context(|| format!("in {}", p.display()))?)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var("SAFELAYER_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("SAFELAYER_THREADS={v:?} is not a count"))?;
            if n == 0 {
                bail!("SAFELAYER_THREADS must be at least 1");
            }
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(args.config.as_deref())?;
    if !args.seed.is_empty() {
        config.seeds = args.seed;
    }
    if !args.strategy.is_empty() {
        config.strategies = args.strategy;
    }
    if !args.beta_coll.is_empty() {
        config.beta_coll = args.beta_coll;
    }
    if let Some(n) = args.episodes {
        config.episodes = n;
    }
    if let Some(out) = args.out {
        config.output_dir = out;
    }
    if let Some(k) = args.parallel {
        config.rollout.workers = k;
    }
    config.validate()?;

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker threads")?;
    let summaries = pool.install(|| {
        experiment::run_experiment(&config, &mut |s| {
            eprintln!(
                "{} beta={} seed={}: reward(last)={:.3} collisions={} {:.1}s",
                s.strategy, s.beta_coll, s.seed, s.mean_reward_last, s.total_collisions, s.wall_s
            );
        })
    })?;
    print!("{}", experiment::format_summary(&summaries));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Report {
            dir,
            window,
            threshold,
        } => {
            let settings = if window.is_some() || threshold.is_some() {
                let saved = dir.join("config.toml");
                let mut r = match fs::read_to_string(&saved) {
                    Ok(text) => ExperimentConfig::from_toml(&text)?.report,
                    Err(_) => Default::default(),
                };
                if let Some(w) = window {
                    if w == 0 {
                        bail!("--window must be at least 1");
                    }
                    r.window = w;
                }
                if let Some(t) = threshold {
                    r.reward_threshold = t;
                }
                Some(r)
            } else {
                None
            };
            let summaries = experiment::report(&dir, settings.as_ref())?;
            print!("{}", experiment::format_summary(&summaries));
            Ok(())
        }
        Command::PrintConfig { config } => {
            print!("{}", load_config(config.as_deref())?.to_toml());
            Ok(())
        }
        Command::SolveQp { dump, iterations } => {
            let text = fs::read_to_string(&dump).with_context(|| format!("reading {}", dump.display()))?;
            let parsed = QpDump::parse(&text).with_context(|| format!("in {}", dump.display()))?;
            let solution = qp::solve(&parsed.problem, iterations)?;
            print!("{}", QpDump::new(parsed.problem, Some(solution)).write());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
