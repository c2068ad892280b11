//! Experiment grid: configuration, training runs, logs and reports.
//!
//! A run trains one policy per `(strategy, β_coll, seed)` cell and writes
//! into `<output_dir>/<strategy>-beta<β>-seed<seed>/`:
//!
//! * `episodes.csv`: one row per episode,
//! * `updates.csv`: one row per updater call,
//! * `timing.csv`: wall-clock time per episode (kept apart so the other logs
//!   are reproducible byte for byte),
//! * `policy.ckpt`: final parameters, plus `policy-<k>.ckpt` every
//!   `checkpoint_every` updates.
//!
//! The resolved configuration is saved as `config.toml` and the per-cell
//! summary as `summary.csv` in the output directory.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvConfig;
use crate::policy::PolicyParams;
use crate::safe_rl::{
    initial_policy, run_strategy, EpisodeLog, RolloutConfig, SafeRlError, SafetyConfig, Strategy,
    TrainingObserver, UpdateLog,
};
use crate::trpo::{Trpo, TrpoConfig};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Training(#[from] SafeRlError),
}

fn config_error(field: &str, message: impl Into<String>) -> ExperimentError {
    ExperimentError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_error(path: &Path) -> impl FnOnce(csv::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            log_std_init: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Moving-average window over episode rewards.
    pub window: usize,
    /// Reward level `R` for the "episodes to R" column.
    pub reward_threshold: f64,
    /// The summary averages the rewards of this many final episodes.
    pub last_episodes: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            window: 40,
            reward_threshold: -30.0,
            last_episodes: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategies: Vec<Strategy>,
    /// Collision penalty multipliers; each replaces `env.beta_coll` in its cell.
    pub beta_coll: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Episode budget per cell.
    pub episodes: usize,
    pub output_dir: PathBuf,
    /// Write a checkpoint every this many rounds (0: final checkpoint only).
    pub checkpoint_every: usize,
    pub rollout: RolloutConfig,
    pub env: EnvConfig,
    pub safety: SafetyConfig,
    pub policy: PolicyConfig,
    pub trpo: TrpoConfig,
    pub report: ReportConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Cpc],
            beta_coll: vec![10.0],
            seeds: vec![0, 1, 2],
            episodes: 500,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            rollout: RolloutConfig::default(),
            env: EnvConfig::default(),
            safety: SafetyConfig::default(),
            policy: PolicyConfig::default(),
            trpo: TrpoConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let config: Self = toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.strategies.is_empty() {
            return Err(config_error("strategies", "at least one strategy is required"));
        }
        if self.seeds.is_empty() {
            return Err(config_error("seeds", "at least one seed is required"));
        }
        if self.episodes == 0 {
            return Err(config_error("episodes", "the episode budget must be at least 1"));
        }
        if self.beta_coll.is_empty() {
            return Err(config_error("beta_coll", "at least one value is required"));
        }
        if let Some(b) = self.beta_coll.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(config_error("beta_coll", format!("values must be positive, got {b}")));
        }
        if self.rollout.workers == 0 {
            return Err(config_error("rollout.workers", "must be at least 1"));
        }
        if self.rollout.min_batch_steps == 0 {
            return Err(config_error("rollout.min_batch_steps", "must be at least 1"));
        }
        self.env
            .validate()
            .map_err(|e| config_error("env", e.to_string()))?;
        self.safety
            .build(self.env.dt)
            .map_err(|e| config_error("safety", e.to_string()))?;
        self.trpo
            .validate()
            .map_err(|e| config_error("trpo", e.to_string()))?;
        if self.policy.hidden.contains(&0) {
            return Err(config_error("policy.hidden", "layer sizes must be positive"));
        }
        if !self.policy.log_std_init.is_finite() {
            return Err(config_error("policy.log_std_init", "must be finite"));
        }
        if self.report.window == 0 || self.report.last_episodes == 0 {
            return Err(config_error("report", "window and last_episodes must be at least 1"));
        }
        Ok(())
    }

    /// Every `(strategy, β_coll, seed)` combination in run order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &strategy in &self.strategies {
            for &beta_coll in &self.beta_coll {
                for &seed in &self.seeds {
                    cells.push(Cell {
                        strategy,
                        beta_coll,
                        seed,
                    });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub beta_coll: f64,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!(
            "{}-beta{}-seed{}",
            self.strategy.tag().to_ascii_lowercase(),
            self.beta_coll,
            self.seed
        )
    }
}

/// One line of `episodes.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub strategy: String,
    pub beta_coll: f64,
    pub seed: u64,
    pub episode: usize,
    pub reward: f64,
    pub steps: usize,
    pub collision: u8,
    pub cum_collisions: usize,
    pub mean_c: f64,
    pub unsafe_actions: usize,
}

/// One line of `updates.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub strategy: String,
    pub beta_coll: f64,
    pub seed: u64,
    pub iteration: usize,
    /// Index of the updater call within the round.
    pub call: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
    pub value_loss: f64,
    pub accepted: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TimingRow {
    episode: usize,
    wall_ms: u64,
}

/// Per-cell numbers of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: String,
    pub beta_coll: f64,
    pub seed: u64,
    pub episodes: usize,
    pub mean_reward_last: f64,
    pub total_collisions: usize,
    pub unsafe_actions: usize,
    pub mean_steps: f64,
    /// First episode whose moving-average reward reaches the threshold, or `N/A`.
    pub episodes_to_r: String,
    pub wall_s: f64,
}

/// Trailing mean over at most `window` values.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn cumulative_collisions(rows: &[EpisodeRow]) -> Vec<usize> {
    rows.iter()
        .scan(0, |acc, r| {
            *acc += usize::from(r.collision != 0);
            Some(*acc)
        })
        .collect()
}

/// Number of episodes until the moving average first reaches `threshold`.
pub fn episodes_to_reach(moving: &[f64], threshold: f64) -> Option<usize> {
    moving.iter().position(|m| *m >= threshold).map(|i| i + 1)
}

pub fn summarize(rows: &[EpisodeRow], report: &ReportConfig, wall_s: f64) -> Result<CellSummary, ExperimentError> {
    let first = rows
        .first()
        .ok_or_else(|| ExperimentError::MissingData("no episodes".into()))?;
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let tail = &rewards[rewards.len().saturating_sub(report.last_episodes)..];
    let moving = moving_average(&rewards, report.window);
    Ok(CellSummary {
        strategy: first.strategy.clone(),
        beta_coll: first.beta_coll,
        seed: first.seed,
        episodes: rows.len(),
        mean_reward_last: tail.iter().sum::<f64>() / tail.len() as f64,
        total_collisions: rows.iter().filter(|r| r.collision != 0).count(),
        unsafe_actions: rows.iter().map(|r| r.unsafe_actions).sum(),
        mean_steps: rows.iter().map(|r| r.steps as f64).sum::<f64>() / rows.len() as f64,
        episodes_to_r: episodes_to_reach(&moving, report.reward_threshold)
            .map_or_else(|| "N/A".to_string(), |n| n.to_string()),
        wall_s,
    })
}

fn create_writer(path: &Path) -> Result<csv::Writer<File>, ExperimentError> {
    let file = File::create(path).map_err(io_error(path))?;
    Ok(csv::Writer::from_writer(file))
}

/// Streams log rows to disk as training progresses, so an interrupted run
/// keeps what it has produced.
struct CellWriter {
    cell: Cell,
    dir: PathBuf,
    episodes: csv::Writer<File>,
    updates: csv::Writer<File>,
    timing: csv::Writer<File>,
    rows: Vec<EpisodeRow>,
    start: Instant,
    checkpoint_every: usize,
    error: Option<ExperimentError>,
}

impl CellWriter {
    fn record<T>(&mut self, r: Result<T, ExperimentError>) {
        if let Err(e) = r {
            self.error.get_or_insert(e);
        }
    }
}

impl TrainingObserver for CellWriter {
    fn episode(&mut self, log: &EpisodeLog) {
        let row = EpisodeRow {
            strategy: self.cell.strategy.tag().into(),
            beta_coll: self.cell.beta_coll,
            seed: self.cell.seed,
            episode: log.episode,
            reward: log.reward,
            steps: log.steps,
            collision: u8::from(log.collision),
            cum_collisions: log.cum_collisions,
            mean_c: log.mean_c,
            unsafe_actions: log.unsafe_actions,
        };
        let path = self.dir.join("episodes.csv");
        let r = self.episodes.serialize(&row).map_err(csv_error(&path));
        self.record(r);
        let timing = TimingRow {
            episode: log.episode,
            wall_ms: self.start.elapsed().as_millis() as u64,
        };
        let path = self.dir.join("timing.csv");
        let r = self.timing.serialize(&timing).map_err(csv_error(&path));
        self.record(r);
        self.rows.push(row);
    }

    fn update(&mut self, log: &UpdateLog, params: &PolicyParams) {
        for (call, s) in log.stats.iter().enumerate() {
            let row = UpdateRow {
                strategy: self.cell.strategy.tag().into(),
                beta_coll: self.cell.beta_coll,
                seed: self.cell.seed,
                iteration: log.iteration,
                call,
                episodes: log.episodes,
                mean_reward: log.mean_reward,
                mean_kl: s.mean_kl,
                surrogate_improvement: s.surrogate_improvement,
                value_loss: s.value_loss,
                accepted: u8::from(s.accepted),
            };
            let path = self.dir.join("updates.csv");
            let r = self.updates.serialize(&row).map_err(csv_error(&path));
            self.record(r);
        }
        for (w, name) in [
            (&mut self.episodes, "episodes.csv"),
            (&mut self.updates, "updates.csv"),
            (&mut self.timing, "timing.csv"),
        ] {
            if let Err(e) = w.flush() {
                let path = self.dir.join(name);
                self.error.get_or_insert(ExperimentError::Io { path, source: e });
            }
        }
        if self.checkpoint_every > 0 && (log.iteration + 1) % self.checkpoint_every == 0 {
            let path = self.dir.join(format!("policy-{}.ckpt", log.iteration + 1));
            let r = fs::write(&path, params.to_checkpoint()).map_err(io_error(&path));
            self.record(r);
        }
    }
}

/// Trains one cell and writes its logs into `dir`.
pub fn run_cell(config: &ExperimentConfig, cell: Cell, dir: &Path) -> Result<CellSummary, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let env = EnvConfig {
        beta_coll: cell.beta_coll,
        ..config.env.clone()
    };
    let set = config
        .safety
        .build(env.dt)
        .map_err(|e| config_error("safety", e.to_string()))?;
    let mut params = initial_policy(cell.seed, &config.policy.hidden, config.policy.log_std_init);
    let mut trpo = Trpo::new(config.trpo.clone()).map_err(|e| config_error("trpo", e.to_string()))?;
    let mut writer = CellWriter {
        cell,
        dir: dir.to_path_buf(),
        episodes: create_writer(&dir.join("episodes.csv"))?,
        updates: create_writer(&dir.join("updates.csv"))?,
        timing: create_writer(&dir.join("timing.csv"))?,
        rows: Vec::new(),
        start: Instant::now(),
        checkpoint_every: config.checkpoint_every,
        error: None,
    };
    run_strategy(
        cell.strategy,
        &env,
        &set,
        &mut params,
        &mut trpo,
        &config.rollout,
        config.episodes,
        cell.seed,
        &mut writer,
    )?;
    if let Some(e) = writer.error.take() {
        return Err(e);
    }
    let ckpt = dir.join("policy.ckpt");
    fs::write(&ckpt, params.to_checkpoint()).map_err(io_error(&ckpt))?;
    summarize(&writer.rows, &config.report, writer.start.elapsed().as_secs_f64())
}

/// Runs every cell of the grid in order, then writes `config.toml` and
/// `summary.csv`. `progress` receives one line per finished cell.
pub fn run_experiment(
    config: &ExperimentConfig,
    progress: &mut dyn FnMut(&CellSummary),
) -> Result<Vec<CellSummary>, ExperimentError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_error(out))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(io_error(&cfg_path))?;
    let mut summaries = Vec::new();
    for cell in config.cells() {
        let summary = run_cell(config, cell, &out.join(cell.dir_name()))?;
        progress(&summary);
        summaries.push(summary);
    }
    write_summary(out, &summaries)?;
    Ok(summaries)
}

fn write_summary(dir: &Path, summaries: &[CellSummary]) -> Result<(), ExperimentError> {
    let path = dir.join("summary.csv");
    let mut w = create_writer(&path)?;
    for s in summaries {
        w.serialize(s).map_err(csv_error(&path))?;
    }
    w.flush().map_err(io_error(&path))
}

pub fn read_episodes(path: &Path) -> Result<Vec<EpisodeRow>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error(path))?;
    r.deserialize()
        .collect::<Result<Vec<EpisodeRow>, _>>()
        .map_err(csv_error(path))
}

fn last_wall_ms(path: &Path) -> Option<u64> {
    let mut r = csv::Reader::from_path(path).ok()?;
    r.deserialize::<TimingRow>().filter_map(Result::ok).last().map(|t| t.wall_ms)
}

/// Per-episode series of one cell as written by [`report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub episode: usize,
    pub reward: f64,
    pub reward_ma: f64,
    pub cum_collisions: usize,
}

/// Recomputes the summary of every cell under `run_dir` and writes, per cell,
/// `series.csv` (moving-average reward and cumulative collisions) plus a
/// top-level `summary.csv`. A saved `config.toml` supplies the report
/// settings unless `report` is given.
pub fn report(run_dir: &Path, report: Option<&ReportConfig>) -> Result<Vec<CellSummary>, ExperimentError> {
    let settings = match report {
        Some(r) => r.clone(),
        None => {
            let cfg = run_dir.join("config.toml");
            match fs::read_to_string(&cfg) {
                Ok(text) => ExperimentConfig::from_toml(&text)?.report,
                Err(_) => ReportConfig::default(),
            }
        }
    };
    let mut cells: Vec<PathBuf> = fs::read_dir(run_dir)
        .map_err(io_error(run_dir))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.join("episodes.csv").is_file())
        .collect();
    cells.sort();
    if cells.is_empty() {
        return Err(ExperimentError::MissingData(format!(
            "no episodes.csv below {}",
            run_dir.display()
        )));
    }
    let mut summaries = Vec::new();
    for dir in cells {
        let rows = read_episodes(&dir.join("episodes.csv"))?;
        if rows.is_empty() {
            return Err(ExperimentError::MissingData(format!(
                "{} has no episodes",
                dir.join("episodes.csv").display()
            )));
        }
        let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
        let moving = moving_average(&rewards, settings.window);
        let cumulative = cumulative_collisions(&rows);
        let path = dir.join("series.csv");
        let mut w = create_writer(&path)?;
        for (i, row) in rows.iter().enumerate() {
            w.serialize(SeriesRow {
                episode: row.episode,
                reward: row.reward,
                reward_ma: moving[i],
                cum_collisions: cumulative[i],
            })
            .map_err(csv_error(&path))?;
        }
        w.flush().map_err(io_error(&path))?;
        let wall_s = last_wall_ms(&dir.join("timing.csv")).unwrap_or(0) as f64 / 1000.0;
        summaries.push(summarize(&rows, &settings, wall_s)?);
    }
    write_summary(run_dir, &summaries)?;
    Ok(summaries)
}

/// Fixed-width text rendering of a summary table.
pub fn format_summary(summaries: &[CellSummary]) -> String {
    let mut out = format!(
        "{:<9}{:>8}{:>6}{:>10}{:>14}{:>12}{:>8}{:>11}{:>9}{:>10}\n",
        "strategy", "beta", "seed", "episodes", "reward(last)", "collisions", "unsafe", "steps/ep", "Ep to R", "time(s)"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<9}{:>8}{:>6}{:>10}{:>14.3}{:>12}{:>8}{:>11.1}{:>9}{:>10.1}\n",
            s.strategy,
            s.beta_coll,
            s.seed,
            s.episodes,
            s.mean_reward_last,
            s.total_collisions,
            s.unsafe_actions,
            s.mean_steps,
            s.episodes_to_r,
            s.wall_s
        ));
    }
    out
}
