//! Planar reaching task with a static obstacle.
//!
//! The two-link arm starts folded out along `+x` at rest. Each episode samples a
//! target and an obstacle uniformly in a square around the base; the obstacle
//! is re-drawn while it overlaps the arm. Actions are joint steps `Δθ` applied
//! kinematically over one control period. Episodes end on collision
//! (`terminated`) or after `max_steps` steps (`truncated`).

use std::f64::consts::PI;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{PairSlots, StateLayout};
use crate::robot::{Circle, LinkPair, PlanarRobot, GENERALIZED_DOF};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("action contains non-finite entries")]
    NonFiniteAction,
    #[error("action has {0} entries, expected 2")]
    BadActionShape(usize),
    #[error("no collision-free obstacle position after {0} samples")]
    SamplingExhausted(usize),
    #[error("episode is over; call reset first")]
    EpisodeFinished,
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Control period in seconds.
    pub dt: f64,
    pub max_steps: usize,
    /// Targets and obstacles are drawn uniformly in `[−r, r]²` (metres).
    pub sample_half_range: f64,
    pub obstacle_radius: f64,
    /// Collision penalty multiplier; the penalty is `collision_penalty · beta_coll`.
    pub beta_coll: f64,
    pub collision_penalty: f64,
    /// Distance to target (metres) under which the proximity bonus is paid.
    pub proximity_threshold: f64,
    pub proximity_bonus: f64,
    pub max_obstacle_samples: usize,
    pub robot: PlanarRobot,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            max_steps: 200,
            sample_half_range: 0.27,
            obstacle_radius: 0.03,
            beta_coll: 10.0,
            collision_penalty: 20.0,
            proximity_threshold: 0.03,
            proximity_bonus: 2.0,
            max_obstacle_samples: 1000,
            robot: PlanarRobot::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::InvalidConfig(m.to_string()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !(self.beta_coll > 0.0 && self.beta_coll.is_finite()) {
            return bad("beta_coll must be positive");
        }
        if !(self.sample_half_range > 0.0 && self.sample_half_range.is_finite()) {
            return bad("sample_half_range must be positive");
        }
        if !(self.obstacle_radius >= 0.0 && self.obstacle_radius.is_finite()) {
            return bad("obstacle_radius must be nonnegative");
        }
        if self.max_obstacle_samples == 0 {
            return bad("max_obstacle_samples must be at least 1");
        }
        if !self.robot.is_valid() {
            return bad("robot lengths and masses must be positive");
        }
        Ok(())
    }
}

/// Fixed indices of the observation vector.
pub mod layout {
    /// Elbow position `p_fa` (forearm base), 3 entries.
    pub const FOREARM_BASE: usize = 0;
    pub const THETA_ELBOW: usize = 3;
    /// Joint velocities, 2 entries.
    pub const THETA_DOT: usize = 4;
    /// End effector `p_ee`, 3 entries.
    pub const END_EFFECTOR: usize = 6;
    /// `p_t − p_ee`, 3 entries.
    pub const TARGET_REL: usize = 9;
    /// `p_o − p_ee`, 3 entries.
    pub const OBSTACLE_REL: usize = 12;
    /// Joint rows of the generalized mass matrix, 2×8 row-major.
    pub const MASS_ROWS: usize = 15;
    /// Joint bias torques, 2 entries.
    pub const BIAS: usize = 31;
    /// Per pair: distance then the two joint entries of `Jᵀn`.
    pub const PAIRS: usize = 33;
    pub const PAIR_STRIDE: usize = 3;
    pub const LEN: usize = PAIRS + 3 * PAIR_STRIDE;
}

/// Layout descriptor of the reacher observation for constraint recipes.
pub fn state_layout() -> StateLayout {
    StateLayout {
        len: layout::LEN,
        joint_positions: vec![None, Some(layout::THETA_ELBOW)],
        joint_velocities: Some(layout::THETA_DOT),
        mass_rows: Some(layout::MASS_ROWS),
        generalized_dof: GENERALIZED_DOF,
        bias: Some(layout::BIAS),
        pairs: LinkPair::ALL
            .iter()
            .map(|&pair| {
                let base = layout::PAIRS + layout::PAIR_STRIDE * pair.index();
                PairSlots {
                    pair,
                    distance: base,
                    jacobian: base + 1,
                }
            })
            .collect(),
    }
}

/// Reward breakdown and diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub collision: bool,
    /// Distance from end effector to target.
    pub target_distance: f64,
    pub r_dist: f64,
    pub r_coll: f64,
    pub r_prox: f64,
    /// Smallest signed distance over the monitored pairs.
    pub min_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// Episode ended by a collision.
    pub terminated: bool,
    /// Episode ended by the step limit.
    pub truncated: bool,
    pub info: StepInfo,
}

/// Clamps the elbow to `[−π, π]`.
pub fn clip_elbow(theta_elbow: f64) -> f64 {
    theta_elbow.clamp(-PI, PI)
}

/// Wraps the (unlimited) shoulder angle into `(−π, π]`.
pub fn wrap_shoulder(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

#[derive(Debug, Clone)]
pub struct Reacher2d {
    config: EnvConfig,
    rng: ChaCha8Rng,
    theta: Vector2<f64>,
    theta_dot: Vector2<f64>,
    theta_ddot: Vector2<f64>,
    target: Vector2<f64>,
    obstacle: Circle,
    steps: usize,
    done: bool,
}

impl Reacher2d {
    pub fn new(config: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let obstacle = Circle {
            center: Vector2::new(10.0, 10.0),
            radius: config.obstacle_radius,
        };
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            theta: Vector2::zeros(),
            theta_dot: Vector2::zeros(),
            theta_ddot: Vector2::zeros(),
            target: Vector2::zeros(),
            obstacle,
            steps: 0,
            done: true,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn theta(&self) -> Vector2<f64> {
        self.theta
    }

    pub fn theta_dot(&self) -> Vector2<f64> {
        self.theta_dot
    }

    pub fn target(&self) -> Vector2<f64> {
        self.target
    }

    pub fn obstacle(&self) -> Circle {
        self.obstacle
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Starts a new episode from the environment's own random stream.
    pub fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        self.theta = Vector2::zeros();
        self.theta_dot = Vector2::zeros();
        self.theta_ddot = Vector2::zeros();
        self.steps = 0;
        let r = self.config.sample_half_range;
        self.target = Vector2::new(self.rng.random_range(-r..=r), self.rng.random_range(-r..=r));
        let mut placed = false;
        for _ in 0..self.config.max_obstacle_samples {
            self.obstacle.center =
                Vector2::new(self.rng.random_range(-r..=r), self.rng.random_range(-r..=r));
            if self.obstacle_distance() > 0.0 {
                placed = true;
                break;
            }
        }
        if !placed {
            self.done = true;
            return Err(EnvError::SamplingExhausted(self.config.max_obstacle_samples));
        }
        self.done = false;
        Ok(self.observation())
    }

    /// Re-seeds the random stream and starts a new episode.
    pub fn reset_with_seed(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.reset()
    }

    /// Places the scene explicitly (arm at rest at `theta`).
    pub fn set_scene(&mut self, theta: Vector2<f64>, theta_dot: Vector2<f64>, target: Vector2<f64>, obstacle_center: Vector2<f64>) -> Vec<f64> {
        self.theta = Vector2::new(wrap_shoulder(theta[0]), clip_elbow(theta[1]));
        self.theta_dot = theta_dot;
        self.theta_ddot = Vector2::zeros();
        self.target = target;
        self.obstacle.center = obstacle_center;
        self.steps = 0;
        self.done = false;
        self.observation()
    }

    fn obstacle_distance(&self) -> f64 {
        [LinkPair::UpperArmObstacle, LinkPair::ForearmObstacle]
            .iter()
            .map(|&p| self.config.robot.closest_pair(self.theta, &self.obstacle, p).distance)
            .fold(f64::INFINITY, f64::min)
    }

    /// Applies the joint step `action = Δθ` over one control period.
    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != 2 {
            return Err(EnvError::BadActionShape(action.len()));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let dt = self.config.dt;
        let elbow = clip_elbow(self.theta[1] + action[1]);
        let executed = Vector2::new(action[0], elbow - self.theta[1]);
        let new_dot = executed / dt;
        self.theta_ddot = (new_dot - self.theta_dot) / dt;
        self.theta_dot = new_dot;
        self.theta = Vector2::new(wrap_shoulder(self.theta[0] + executed[0]), elbow);
        self.steps += 1;

        let robot = &self.config.robot;
        let min_distance = robot.min_distance(self.theta, &self.obstacle);
        let collision = min_distance <= 0.0;
        let (_, p_ee) = robot.forward_kinematics(self.theta);
        let target_distance = (self.target - p_ee.xy()).norm();
        let r_dist = -target_distance;
        let r_coll = if collision {
            -self.config.collision_penalty * self.config.beta_coll
        } else {
            0.0
        };
        let r_prox = if target_distance <= self.config.proximity_threshold {
            self.config.proximity_bonus
        } else {
            0.0
        };
        let terminated = collision;
        let truncated = !terminated && self.steps >= self.config.max_steps;
        self.done = terminated || truncated;
        Ok(StepResult {
            observation: self.observation(),
            reward: r_dist + r_coll + r_prox,
            terminated,
            truncated,
            info: StepInfo {
                collision,
                target_distance,
                r_dist,
                r_coll,
                r_prox,
                min_distance,
            },
        })
    }

    /// The flattened state vector, see [`layout`].
    pub fn observation(&self) -> Vec<f64> {
        let robot = &self.config.robot;
        let (p_fa, p_ee) = robot.forward_kinematics(self.theta);
        let target = Vector3::new(self.target.x, self.target.y, 0.0);
        let obstacle = Vector3::new(self.obstacle.center.x, self.obstacle.center.y, 0.0);
        let mut s = Vec::with_capacity(layout::LEN);
        s.extend(p_fa.iter());
        s.push(self.theta[1]);
        s.extend(self.theta_dot.iter());
        s.extend(p_ee.iter());
        s.extend((target - p_ee).iter());
        s.extend((obstacle - p_ee).iter());
        let (h_tau, c_tau) = robot.mass_matrix_and_bias(self.theta, self.theta_dot);
        for r in 0..2 {
            s.extend(h_tau.row(r).iter());
        }
        s.extend(c_tau.iter());
        for pair in LinkPair::ALL {
            let cp = robot.closest_pair(self.theta, &self.obstacle, pair);
            let row = robot.distance_jacobian_row(self.theta, pair, &cp);
            s.push(cp.distance);
            s.extend(row.iter());
        }
        debug_assert_eq!(s.len(), layout::LEN);
        s
    }
}
