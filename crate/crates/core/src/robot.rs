//! Kinematics, dynamics and collision geometry of the two-link planar arm.
//!
//! The arm lives in the `(x, y)` plane with its base at the origin. Gravity is
//! along `−z`, perpendicular to the plane of motion, so it never produces joint
//! torque. Links are uniform thin rods for dynamics and capsules for distance
//! queries.

use nalgebra::{Matrix2, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Number of generalized coordinates of the (fixed) floating base.
pub const BASE_DOF: usize = 6;
/// Generalized coordinates: 6 base + 2 joints.
pub const GENERALIZED_DOF: usize = BASE_DOF + 2;

/// Joint rows of the generalized mass matrix, `[base | joints]` columns.
pub type JointMassRows = SMatrix<f64, 2, GENERALIZED_DOF>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanarRobot {
    pub upper_arm_length: f64,
    pub forearm_length: f64,
    pub upper_arm_mass: f64,
    pub forearm_mass: f64,
    /// Capsule radius around both link segments.
    pub link_radius: f64,
    /// Radius of the base disc used for self-collision with the end effector.
    pub base_radius: f64,
}

impl Default for PlanarRobot {
    fn default() -> Self {
        Self {
            upper_arm_length: 0.1,
            forearm_length: 0.1,
            upper_arm_mass: 0.1,
            forearm_mass: 0.1,
            link_radius: 0.01,
            base_radius: 0.02,
        }
    }
}

/// Joint positions, velocities and accelerations `(shoulder, elbow)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointState {
    pub theta: Vector2<f64>,
    pub theta_dot: Vector2<f64>,
    pub theta_ddot: Vector2<f64>,
}

/// A disc in the plane of motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Circle {
    pub center: Vector2<f64>,
    pub radius: f64,
}

/// Monitored robot/environment distance pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LinkPair {
    UpperArmObstacle,
    ForearmObstacle,
    EndEffectorBase,
}

impl LinkPair {
    pub const ALL: [LinkPair; 3] = [
        LinkPair::UpperArmObstacle,
        LinkPair::ForearmObstacle,
        LinkPair::EndEffectorBase,
    ];

    /// `(robot part, environment part)` names as used in configuration files.
    pub fn names(self) -> (&'static str, &'static str) {
        match self {
            LinkPair::UpperArmObstacle => ("upper_arm", "obstacle"),
            LinkPair::ForearmObstacle => ("forearm", "obstacle"),
            LinkPair::EndEffectorBase => ("end_effector", "base"),
        }
    }

    pub fn from_names(robot: &str, env: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.names() == (robot, env))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Closest-point query result between a robot part and its environment shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPair {
    /// Signed surface distance, negative when overlapping.
    pub distance: f64,
    /// Unit vector from the environment shape toward `point`.
    pub normal: Vector3<f64>,
    /// Closest point on the robot part's surface.
    pub point: Vector3<f64>,
}

fn planar(v: Vector2<f64>) -> Vector3<f64> {
    Vector3::new(v.x, v.y, 0.0)
}

/// `ẑ × v` for a planar vector.
fn z_cross(v: Vector3<f64>) -> Vector3<f64> {
    Vector3::new(-v.y, v.x, 0.0)
}

impl PlanarRobot {
    pub fn is_valid(&self) -> bool {
        [
            self.upper_arm_length,
            self.forearm_length,
            self.upper_arm_mass,
            self.forearm_mass,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
            && self.link_radius.is_finite()
            && self.link_radius >= 0.0
            && self.base_radius.is_finite()
            && self.base_radius >= 0.0
    }

    /// Returns `(p_fa, p_ee)`: the elbow (forearm base) and the end effector.
    pub fn forward_kinematics(&self, theta: Vector2<f64>) -> (Vector3<f64>, Vector3<f64>) {
        let (s1, c1) = theta[0].sin_cos();
        let (s12, c12) = (theta[0] + theta[1]).sin_cos();
        let p_fa = Vector3::new(self.upper_arm_length * c1, self.upper_arm_length * s1, 0.0);
        let p_ee = p_fa + Vector3::new(self.forearm_length * c12, self.forearm_length * s12, 0.0);
        (p_fa, p_ee)
    }

    fn inertias(&self) -> ([f64; 2], [f64; 2], [f64; 2]) {
        let m = [self.upper_arm_mass, self.forearm_mass];
        let l = [self.upper_arm_length, self.forearm_length];
        let lc = [0.5 * l[0], 0.5 * l[1]];
        let i = [m[0] * l[0] * l[0] / 12.0, m[1] * l[1] * l[1] / 12.0];
        (m, lc, i)
    }

    /// Joint-space mass matrix of the fixed-base arm.
    pub fn joint_mass_matrix(&self, theta: Vector2<f64>) -> Matrix2<f64> {
        let (m, lc, i) = self.inertias();
        let l1 = self.upper_arm_length;
        let c2 = theta[1].cos();
        let m22 = i[1] + m[1] * lc[1] * lc[1];
        let m12 = m22 + m[1] * l1 * lc[1] * c2;
        let m11 = i[0] + m[0] * lc[0] * lc[0] + m22 + m[1] * (l1 * l1 + 2.0 * l1 * lc[1] * c2);
        Matrix2::new(m11, m12, m12, m22)
    }

    /// Coriolis and centrifugal torques; gravity acts out of plane and is zero.
    pub fn joint_bias(&self, theta: Vector2<f64>, theta_dot: Vector2<f64>) -> Vector2<f64> {
        let (m, lc, _) = self.inertias();
        let k = m[1] * self.upper_arm_length * lc[1] * theta[1].sin();
        let (w1, w2) = (theta_dot[0], theta_dot[1]);
        Vector2::new(-k * (2.0 * w1 * w2 + w2 * w2), k * w1 * w1)
    }

    /// Joint rows `H_τ` of the generalized mass matrix and the matching bias
    /// `C_τ`, with generalized coordinates ordered as six base coordinates
    /// (linear then angular) followed by the two joints. Base velocities are
    /// zero, so the bias only carries joint Coriolis terms.
    pub fn mass_matrix_and_bias(
        &self,
        theta: Vector2<f64>,
        theta_dot: Vector2<f64>,
    ) -> (JointMassRows, Vector2<f64>) {
        let (m, lc, inertia) = self.inertias();
        let (p_fa, _) = self.forward_kinematics(theta);
        let u1 = p_fa.normalize();
        let phi = theta[0] + theta[1];
        let u2 = Vector3::new(phi.cos(), phi.sin(), 0.0);
        let com = [lc[0] * u1, p_fa + lc[1] * u2];
        let origins = [Vector3::zeros(), p_fa];

        let mut rows = JointMassRows::zeros();
        for (joint, origin) in origins.iter().enumerate() {
            for body in joint..2 {
                let r = com[body] - origin;
                rows[(joint, 0)] -= m[body] * r.y;
                rows[(joint, 1)] += m[body] * r.x;
                rows[(joint, 5)] += inertia[body] + m[body] * r.dot(&com[body]);
            }
        }
        let joint_block = self.joint_mass_matrix(theta);
        rows.fixed_view_mut::<2, 2>(0, BASE_DOF).copy_from(&joint_block);
        (rows, self.joint_bias(theta, theta_dot))
    }

    /// Inverse dynamics `τ = H(θ)·θ̈ + C(θ, θ̇)` for the fixed base.
    pub fn joint_torque(&self, state: &JointState) -> Vector2<f64> {
        self.joint_mass_matrix(state.theta) * state.theta_ddot
            + self.joint_bias(state.theta, state.theta_dot)
    }

    /// Forward dynamics `θ̈ = H⁻¹(τ − C)`.
    pub fn joint_acceleration(
        &self,
        theta: Vector2<f64>,
        theta_dot: Vector2<f64>,
        torque: Vector2<f64>,
    ) -> Vector2<f64> {
        let h = self.joint_mass_matrix(theta);
        let rhs = torque - self.joint_bias(theta, theta_dot);
        h.try_inverse().map(|inv| inv * rhs).unwrap_or_else(Vector2::zeros)
    }

    /// Kinetic energy `½ θ̇ᵀ H θ̇`.
    pub fn kinetic_energy(&self, theta: Vector2<f64>, theta_dot: Vector2<f64>) -> f64 {
        0.5 * theta_dot.dot(&(self.joint_mass_matrix(theta) * theta_dot))
    }

    /// Signed distance, normal and closest point for a monitored pair.
    ///
    /// For the two obstacle pairs the environment shape is `obstacle`; for the
    /// end-effector pair it is the base disc at the origin and `obstacle` is
    /// ignored.
    pub fn closest_pair(&self, theta: Vector2<f64>, obstacle: &Circle, pair: LinkPair) -> ClosestPair {
        let (p_fa, p_ee) = self.forward_kinematics(theta);
        let (axis_point, center, env_radius, segment_dir) = match pair {
            LinkPair::UpperArmObstacle => {
                let c = planar(obstacle.center);
                let p = closest_on_segment(Vector3::zeros(), p_fa, c);
                (p, c, obstacle.radius, p_fa)
            }
            LinkPair::ForearmObstacle => {
                let c = planar(obstacle.center);
                let p = closest_on_segment(p_fa, p_ee, c);
                (p, c, obstacle.radius, p_ee - p_fa)
            }
            LinkPair::EndEffectorBase => (p_ee, Vector3::zeros(), self.base_radius, p_ee - p_fa),
        };
        let offset = axis_point - center;
        let gap = offset.norm();
        let normal = if gap > 1e-12 {
            offset / gap
        } else {
            // Center on the link axis: any direction normal to the link works.
            let perp = z_cross(segment_dir);
            let n = perp.norm();
            if n > 1e-12 {
                perp / n
            } else {
                Vector3::x()
            }
        };
        ClosestPair {
            distance: gap - self.link_radius - env_radius,
            normal,
            point: axis_point - self.link_radius * normal,
        }
    }

    /// `n_lᵀ·J(θ, p_l)` restricted to the joint columns: maps joint velocities
    /// to the rate of change of the pair distance for a static environment.
    pub fn distance_jacobian_row(
        &self,
        theta: Vector2<f64>,
        pair: LinkPair,
        closest: &ClosestPair,
    ) -> Vector2<f64> {
        let (p_fa, _) = self.forward_kinematics(theta);
        let p = closest.point;
        let n = closest.normal;
        let shoulder = n.dot(&z_cross(p));
        let elbow = match pair {
            LinkPair::UpperArmObstacle => 0.0,
            LinkPair::ForearmObstacle | LinkPair::EndEffectorBase => n.dot(&z_cross(p - p_fa)),
        };
        Vector2::new(shoulder, elbow)
    }

    /// Minimum signed distance over the three monitored pairs.
    pub fn min_distance(&self, theta: Vector2<f64>, obstacle: &Circle) -> f64 {
        LinkPair::ALL
            .iter()
            .map(|&p| self.closest_pair(theta, obstacle, p).distance)
            .fold(f64::INFINITY, f64::min)
    }
}

fn closest_on_segment(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::EPSILON {
        return a;
    }
    let t = ((c - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + t * ab
}
