//! Safe action projection and the policy-update strategies built on it.
//!
//! Every step the raw policy prediction `ã` is projected onto the constraint
//! set assembled for the current state, `a* = argmin ½‖x − ã‖²` subject to
//! `G x ≤ h`, `A x = b`, and the violation cost of `ã` is measured on the
//! row-normalized constraints. Rollouts execute either `ã` (unconstrained) or
//! `a*` (constrained); the strategy decides which actions and rewards the
//! policy update sees.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{AssembledConstraints, ConstraintBlock, ConstraintError, ConstraintSet};
use crate::env::{state_layout, EnvConfig, EnvError, Reacher2d};
use crate::policy::{PolicyError, PolicyParams};
use crate::qp::{solve, QpError, QpProblem, DEFAULT_MAX_ITERATIONS};
use crate::robot::LinkPair;
use crate::trpo::{Batch, EpisodeEnd, Segment, TrpoError, UpdateStats, Updater};

/// Executed actions may exceed the assembled constraints by at most this much.
pub const SAFETY_TOLERANCE: f64 = 1e-6;
/// Largest violation of the null action tolerated before the state is
/// declared outside the constraint set.
const ZERO_ACTION_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SafeRlError {
    #[error("the null action violates the assembled constraints by {0:e}")]
    InfeasibleQp(f64),
    #[error("prediction has {got} entries, constraints expect {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("non-finite prediction")]
    NonFinitePrediction,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Trpo(#[from] TrpoError),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// Constraint declarations for the planar reacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Symmetric joint speed limit (rad/s), one per joint.
    pub joint_velocity_max: Vec<f64>,
    /// Position limits per joint; infinite entries are not constrained.
    pub joint_position_min: Vec<f64>,
    pub joint_position_max: Vec<f64>,
    pub enable_position: bool,
    /// Symmetric joint torque limit (N·m), one per joint.
    pub torque_max: Vec<f64>,
    pub enable_torque: bool,
    /// Velocity-damping gain `ξ` (1/s).
    pub xi: f64,
    pub d_m: f64,
    pub d_max: f64,
    /// Bound on the second derivative of every monitored distance with
    /// respect to the joint angles (m/rad²); zero keeps the linearized rows.
    pub curvature_bound: f64,
    /// Monitored pairs as `[robot part, environment part]`.
    pub pairs: Vec<[String; 2]>,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            joint_velocity_max: vec![2.0 * PI; 2],
            joint_position_min: vec![f64::NEG_INFINITY, -PI],
            joint_position_max: vec![f64::INFINITY, PI],
            enable_position: true,
            torque_max: vec![5.0; 2],
            enable_torque: true,
            xi: 1.0,
            d_m: 0.01,
            d_max: 0.05,
            curvature_bound: 1.0,
            pairs: LinkPair::ALL
                .iter()
                .map(|p| {
                    let (a, b) = p.names();
                    [a.to_string(), b.to_string()]
                })
                .collect(),
        }
    }
}

impl SafetyConfig {
    pub fn link_pairs(&self) -> Result<Vec<LinkPair>, ConstraintError> {
        self.pairs
            .iter()
            .map(|[a, b]| {
                LinkPair::from_names(a, b).ok_or_else(|| {
                    ConstraintError::InvalidSet(format!("unknown distance pair ({a}, {b})"))
                })
            })
            .collect()
    }

    /// Velocity rows first (they also serve as substitutes for inactive
    /// collision rows), then position, torque and collision rows.
    pub fn build(&self, dt: f64) -> Result<ConstraintSet, ConstraintError> {
        let layout = state_layout();
        let qd_min: Vec<f64> = self.joint_velocity_max.iter().map(|v| -v).collect();
        let mut blocks = vec![ConstraintBlock::velocity(dt, &qd_min, &self.joint_velocity_max)?];
        if self.enable_position {
            blocks.push(ConstraintBlock::position(
                &self.joint_position_min,
                &self.joint_position_max,
                &layout,
            )?);
        }
        if self.enable_torque {
            let tau_min: Vec<f64> = self.torque_max.iter().map(|v| -v).collect();
            blocks.push(ConstraintBlock::torque(dt, &tau_min, &self.torque_max, &layout)?);
        }
        let max_step = dt * self.joint_velocity_max.iter().fold(0.0_f64, |m, v| m.max(*v));
        for pair in self.link_pairs()? {
            blocks.push(
                ConstraintBlock::collision(pair, dt, self.xi, self.d_m, self.d_max, &layout)?
                    .with_step_margin(self.curvature_bound, max_step)?,
            );
        }
        ConstraintSet::new(2, &layout, blocks, Vec::new())
    }
}

/// Result of projecting one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub safe_action: Vec<f64>,
    /// `c_eq + c_in`.
    pub cost: f64,
    pub cost_eq: f64,
    pub cost_in: f64,
    /// Interior-point iterations; zero when the prediction was already feasible.
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    /// The solver iterate was pulled toward the origin to restore exact feasibility.
    pub repaired: bool,
    /// Largest violation of the assembled constraints at `safe_action`.
    pub max_violation: f64,
}

/// Violation costs `(c_eq, c_in)` of `x` with every row of `A` and `G` scaled
/// to unit norm. Rows that are identically zero are skipped. Each inequality
/// constraint contributes once: substitute rows of inactive blocks are left
/// out and rows sharing a group contribute their largest violation.
pub fn violation_cost(c: &AssembledConstraints, x: &DVector<f64>) -> (f64, f64) {
    let residual = |m: &DMatrix<f64>, rhs: &DVector<f64>, i: usize| {
        let norm = m.row(i).norm();
        if norm == 0.0 {
            0.0
        } else {
            (m.row(i).dot(&x.transpose()) - rhs[i]) / norm
        }
    };
    let c_eq = (0..c.a.nrows())
        .map(|i| residual(&c.a, &c.b, i).powi(2))
        .sum::<f64>()
        .sqrt();
    let mut worst: Vec<f64> = Vec::new();
    for i in 0..c.g.nrows() {
        let group = if c.groups.is_empty() { Some(i) } else { c.groups[i] };
        let Some(k) = group else { continue };
        if worst.len() <= k {
            worst.resize(k + 1, 0.0);
        }
        worst[k] = worst[k].max(residual(&c.g, &c.h, i));
    }
    let c_in = worst.iter().map(|r| r * r).sum::<f64>().sqrt();
    (c_eq, c_in)
}

/// Projects `predicted` onto already assembled constraints.
pub fn project(c: &AssembledConstraints, predicted: &[f64]) -> Result<Correction, SafeRlError> {
    let n = c.g.ncols();
    if predicted.len() != n {
        return Err(SafeRlError::ShapeMismatch {
            got: predicted.len(),
            expected: n,
        });
    }
    if predicted.iter().any(|v| !v.is_finite()) {
        return Err(SafeRlError::NonFinitePrediction);
    }
    let zero_violation = c.max_violation(&DVector::zeros(n));
    if zero_violation > ZERO_ACTION_TOLERANCE {
        return Err(SafeRlError::InfeasibleQp(zero_violation));
    }
    let target = DVector::from_column_slice(predicted);
    let (cost_eq, cost_in) = violation_cost(c, &target);
    if cost_eq == 0.0 && cost_in == 0.0 {
        return Ok(Correction {
            safe_action: predicted.to_vec(),
            cost: 0.0,
            cost_eq,
            cost_in,
            qp_iterations: 0,
            kkt_residual: 0.0,
            repaired: false,
            max_violation: c.max_violation(&target),
        });
    }
    let problem = QpProblem::projection(&target, c.g.clone(), c.h.clone(), c.a.clone(), c.b.clone())?;
    let sol = solve(&problem, DEFAULT_MAX_ITERATIONS)?;
    let mut x = sol.x_star;
    let mut repaired = false;
    // The null action is feasible, so shrinking toward it restores the
    // inequalities exactly if the iterate stopped slightly outside.
    let gx = &c.g * &x;
    let mut t = 1.0_f64;
    for i in 0..gx.len() {
        if gx[i] > c.h[i] {
            t = t.min((c.h[i].max(0.0) / gx[i]).max(0.0));
        }
    }
    if t < 1.0 {
        x *= t;
        repaired = true;
    }
    Ok(Correction {
        max_violation: c.max_violation(&x),
        safe_action: x.iter().copied().collect(),
        cost: cost_eq + cost_in,
        cost_eq,
        cost_in,
        qp_iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        repaired,
    })
}

/// The prediction itself with its violation cost, for states where no
/// correction is defined.
fn uncorrected(c: &AssembledConstraints, predicted: &[f64]) -> Correction {
    let x = DVector::from_column_slice(predicted);
    let (cost_eq, cost_in) = violation_cost(c, &x);
    Correction {
        safe_action: predicted.to_vec(),
        cost: cost_eq + cost_in,
        cost_eq,
        cost_in,
        qp_iterations: 0,
        kkt_residual: f64::NAN,
        repaired: false,
        max_violation: c.max_violation(&x),
    }
}

/// Assembles the constraints for `state` and projects `predicted` onto them.
pub fn optlayer_apply(
    state: &[f64],
    predicted: &[f64],
    set: &ConstraintSet,
) -> Result<Correction, SafeRlError> {
    let assembled = set.assemble(state)?;
    project(&assembled, predicted)
}

/// One step of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub observation: Vec<f64>,
    pub predicted: Vec<f64>,
    pub corrected: Vec<f64>,
    pub reward: f64,
    pub value: f64,
    pub cost: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub collision: bool,
    /// Largest violation of this step's constraints by the executed action.
    pub executed_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    /// Value of the state after the last step when the episode was truncated.
    pub bootstrap: Option<f64>,
}

impl Trajectory {
    pub fn total_reward(&self) -> f64 {
        self.records.iter().map(|r| r.reward).sum()
    }

    pub fn collided(&self) -> bool {
        self.records.iter().any(|r| r.collision)
    }
}

/// Runs one episode: predict `(ã, v)`, correct to `(a*, c)`, execute `a*` if
/// `constrained` else `ã`, until termination or truncation.
pub fn build_traj<R: Rng + ?Sized>(
    env: &mut Reacher2d,
    params: &PolicyParams,
    set: &ConstraintSet,
    constrained: bool,
    rng: &mut R,
) -> Result<Trajectory, SafeRlError> {
    let mut obs = env.reset()?;
    let mut records = Vec::with_capacity(env.config().max_steps);
    loop {
        let (predicted, _) = params.sample(&obs, rng)?;
        let value = params.state_value(&obs)?;
        let assembled = set.assemble(&obs)?;
        let corr = match project(&assembled, &predicted) {
            Ok(c) => c,
            // Unconstrained rollouts can leave the limits (e.g. joint speeds
            // far above the torque budget), after which no safe action may
            // exist. The correction is only diagnostic there.
            Err(SafeRlError::InfeasibleQp(_) | SafeRlError::Qp(_)) if !constrained => {
                uncorrected(&assembled, &predicted)
            }
            Err(e) => return Err(e),
        };
        let executed = if constrained {
            &corr.safe_action
        } else {
            &predicted
        };
        let executed_violation =
            assembled.max_violation(&DVector::from_column_slice(executed));
        let step = env.step(executed)?;
        records.push(TrajectoryRecord {
            observation: std::mem::replace(&mut obs, step.observation),
            predicted,
            corrected: corr.safe_action,
            reward: step.reward,
            value,
            cost: corr.cost,
            terminated: step.terminated,
            truncated: step.truncated,
            collision: step.info.collision,
            executed_violation,
        });
        if step.terminated {
            return Ok(Trajectory {
                records,
                bootstrap: None,
            });
        }
        if step.truncated {
            let bootstrap = Some(params.state_value(&obs)?);
            return Ok(Trajectory { records, bootstrap });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Unconstrained predictions.
    Up,
    /// Constrained execution, learn the predictions.
    Cp,
    /// Constrained execution, learn the corrections.
    Cc,
    /// Constrained execution, learn predictions with violation-discounted
    /// rewards and then corrections.
    Cpc,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Up, Strategy::Cp, Strategy::Cc, Strategy::Cpc];

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Up => "UP",
            Strategy::Cp => "CP",
            Strategy::Cc => "CC",
            Strategy::Cpc => "CPC",
        }
    }

    pub fn constrained(self) -> bool {
        self != Strategy::Up
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "up" => Ok(Strategy::Up),
            "cp" => Ok(Strategy::Cp),
            "cc" => Ok(Strategy::Cc),
            "cpc" => Ok(Strategy::Cpc),
            _ => Err(format!("unknown strategy `{s}` (expected up, cp, cc or cpc)")),
        }
    }
}

/// Which action and reward fields feed an update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionField {
    Predicted,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardField {
    Reward,
    /// `r − c`.
    Discounted,
}

impl Strategy {
    /// The update calls made per batch, in order.
    pub fn update_plan(self) -> &'static [(ActionField, RewardField)] {
        use ActionField::*;
        use RewardField::*;
        match self {
            Strategy::Up | Strategy::Cp => &[(Predicted, Reward)],
            Strategy::Cc => &[(Corrected, Reward)],
            Strategy::Cpc => &[(Predicted, Discounted), (Corrected, Reward)],
        }
    }
}

/// Flattens trajectories into an update batch.
pub fn make_batch(trajectories: &[Trajectory], action: ActionField, reward: RewardField) -> Batch {
    let mut batch = Batch::default();
    for t in trajectories {
        for r in &t.records {
            batch.observations.push(r.observation.clone());
            batch.actions.push(match action {
                ActionField::Predicted => r.predicted.clone(),
                ActionField::Corrected => r.corrected.clone(),
            });
            batch.rewards.push(match reward {
                RewardField::Reward => r.reward,
                RewardField::Discounted => r.reward - r.cost,
            });
            batch.values.push(r.value);
        }
        batch.segments.push(Segment {
            len: t.records.len(),
            end: match t.bootstrap {
                Some(bootstrap) => EpisodeEnd::Truncated { bootstrap },
                None => EpisodeEnd::Terminated,
            },
        });
    }
    batch
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    /// Parallel environment instances.
    pub workers: usize,
    /// Each round collects at least this many steps before updating.
    pub min_batch_steps: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            min_batch_steps: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub reward: f64,
    pub steps: usize,
    pub collision: bool,
    pub cum_collisions: usize,
    /// Mean violation cost of the predictions.
    pub mean_c: f64,
    /// Executed actions that broke the step's constraints by more than [`SAFETY_TOLERANCE`].
    pub unsafe_actions: usize,
    pub max_executed_violation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLog {
    pub iteration: usize,
    /// Number of episodes finished when the update ran.
    pub episodes: usize,
    pub mean_reward: f64,
    /// One entry per updater call.
    pub stats: Vec<UpdateStats>,
}

/// Receives log records as training progresses.
pub trait TrainingObserver {
    fn episode(&mut self, _log: &EpisodeLog) {}
    /// Called after each round with the updated parameters.
    fn update(&mut self, _log: &UpdateLog, _params: &PolicyParams) {}
}

impl TrainingObserver for () {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub strategy: Strategy,
    pub episodes: Vec<EpisodeLog>,
    pub updates: Vec<UpdateLog>,
}

impl TrainingLog {
    pub fn total_collisions(&self) -> usize {
        self.episodes.iter().filter(|e| e.collision).count()
    }

    pub fn total_unsafe_actions(&self) -> usize {
        self.episodes.iter().map(|e| e.unsafe_actions).sum()
    }
}

struct Worker {
    env: Reacher2d,
    rng: ChaCha8Rng,
}

/// Independent random streams for the environments and the policy noise of
/// each worker, derived from one seed.
fn spawn_workers(env: &EnvConfig, seed: u64, workers: usize) -> Result<Vec<Worker>, SafeRlError> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    (0..workers)
        .map(|_| {
            let env_seed = master.next_u64();
            let mut rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            rng.set_stream(1);
            Ok(Worker {
                env: Reacher2d::new(env.clone(), env_seed)?,
                rng,
            })
        })
        .collect()
}

/// Seeded initial policy for the reacher observation.
pub fn initial_policy(seed: u64, hidden: &[usize], log_std: f64) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    PolicyParams::init(crate::env::layout::LEN, 2, hidden, log_std, &mut rng)
}

/// Trains `params` for `episodes` episodes with `strategy`.
///
/// Each round, every worker runs whole episodes against a snapshot of the
/// policy until it holds its share of `min_batch_steps`; trajectories are then
/// merged worker by worker, so the result does not depend on scheduling.
/// Episodes past the budget are dropped before the update.
#[allow(clippy::too_many_arguments)]
pub fn run_strategy(
    strategy: Strategy,
    env: &EnvConfig,
    set: &ConstraintSet,
    params: &mut PolicyParams,
    updater: &mut dyn Updater,
    rollout: &RolloutConfig,
    episodes: usize,
    seed: u64,
    observer: &mut dyn TrainingObserver,
) -> Result<TrainingLog, SafeRlError> {
    if rollout.workers == 0 || rollout.min_batch_steps == 0 {
        return Err(SafeRlError::InvalidConfig(
            "workers and min_batch_steps must be at least 1".into(),
        ));
    }
    let mut workers = spawn_workers(env, seed, rollout.workers)?;
    let share = rollout.min_batch_steps.div_ceil(rollout.workers);
    let mut log = TrainingLog {
        strategy,
        episodes: Vec::new(),
        updates: Vec::new(),
    };
    let mut collisions = 0;
    let constrained = strategy.constrained();
    while log.episodes.len() < episodes {
        let snapshot = params.clone();
        let per_worker: Vec<Result<Vec<Trajectory>, SafeRlError>> = workers
            .par_iter_mut()
            .map(|w| {
                let mut out = Vec::new();
                let mut steps = 0;
                while steps < share {
                    let t = build_traj(&mut w.env, &snapshot, set, constrained, &mut w.rng)?;
                    steps += t.records.len();
                    out.push(t);
                }
                Ok(out)
            })
            .collect();
        let mut round = Vec::new();
        for r in per_worker {
            round.extend(r?);
        }
        round.truncate(episodes - log.episodes.len());

        for t in &round {
            collisions += usize::from(t.collided());
            let n = t.records.len();
            let entry = EpisodeLog {
                episode: log.episodes.len(),
                reward: t.total_reward(),
                steps: n,
                collision: t.collided(),
                cum_collisions: collisions,
                mean_c: t.records.iter().map(|r| r.cost).sum::<f64>() / n as f64,
                unsafe_actions: t
                    .records
                    .iter()
                    .filter(|r| r.executed_violation > SAFETY_TOLERANCE)
                    .count(),
                max_executed_violation: t
                    .records
                    .iter()
                    .map(|r| r.executed_violation)
                    .fold(0.0, f64::max),
            };
            observer.episode(&entry);
            log.episodes.push(entry);
        }

        let mut stats = Vec::new();
        let plan = strategy.update_plan();
        for &(action, reward) in plan {
            let batch = make_batch(&round, action, reward);
            stats.push(updater.update_share(params, &batch, 1.0 / plan.len() as f64)?);
        }
        let entry = UpdateLog {
            iteration: log.updates.len(),
            episodes: log.episodes.len(),
            mean_reward: round.iter().map(Trajectory::total_reward).sum::<f64>() / round.len() as f64,
            stats,
        };
        observer.update(&entry, params);
        log.updates.push(entry);
    }
    Ok(log)
}
