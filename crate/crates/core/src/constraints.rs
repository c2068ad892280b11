//! Per-step constraint matrices for the action QP.
//!
//! A [`ConstraintSet`] is an ordered list of [`ConstraintBlock`]s, each of
//! which emits a fixed number of rows of `G x ≤ h` (or `A x = b`) from the
//! current state vector. Blocks fall into four kinds:
//!
//! * constant rows (joint velocity limits),
//! * rows whose bound is affine in the state through a selection matrix
//!   (joint position limits),
//! * rows built from auxiliary dynamics entries appended to the state
//!   (joint torque limits),
//! * conditional rows that only apply when a state-dependent test passes
//!   (velocity-damping collision avoidance).
//!
//! Conditional rows that are inactive are replaced by copies of designated
//! base rows, so the assembled `(G, h)` has the same shape for every state.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::robot::LinkPair;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConstraintError {
    #[error("invalid limits on joint {joint}: min {min} must be below max {max}")]
    BadLimits { joint: usize, min: f64, max: f64 },
    #[error("invalid thresholds: d_m = {d_m} must be below d_M = {d_max}")]
    BadThresholds { d_m: f64, d_max: f64 },
    #[error("state layout error: {0}")]
    LayoutError(String),
    #[error("invalid constraint set: {0}")]
    InvalidSet(String),
}

/// Where each named quantity lives in the flattened state vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub len: usize,
    /// Index of each joint's position, `None` if the state omits it.
    pub joint_positions: Vec<Option<usize>>,
    /// Start of the contiguous joint velocities.
    pub joint_velocities: Option<usize>,
    /// Start of the row-major joint rows of the generalized mass matrix.
    pub mass_rows: Option<usize>,
    /// Column count of each mass-matrix row (base + joint coordinates).
    pub generalized_dof: usize,
    /// Start of the joint bias torques.
    pub bias: Option<usize>,
    pub pairs: Vec<PairSlots>,
}

/// State slots of one monitored distance pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSlots {
    pub pair: LinkPair,
    /// Index of the signed distance `d_l`.
    pub distance: usize,
    /// Start of the joint entries of `Jᵀ n_l`.
    pub jacobian: usize,
}

impl StateLayout {
    pub fn n_joints(&self) -> usize {
        self.joint_positions.len()
    }

    fn pair(&self, pair: LinkPair) -> Option<&PairSlots> {
        self.pairs.iter().find(|p| p.pair == pair)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Constant,
    AffineInState,
    Auxiliary,
    Conditional,
}

#[derive(Debug, Clone, PartialEq)]
enum Recipe {
    Constant {
        g: DMatrix<f64>,
        h: DVector<f64>,
    },
    /// `G x ≤ H·s + offset`.
    Affine {
        g: DMatrix<f64>,
        selection: DMatrix<f64>,
        offset: DVector<f64>,
    },
    Torque {
        dt: f64,
        tau_min: Vec<f64>,
        tau_max: Vec<f64>,
        velocities: usize,
        mass_rows: usize,
        generalized_dof: usize,
        bias: usize,
    },
    Collision {
        dt: f64,
        xi: f64,
        d_m: f64,
        d_max: f64,
        distance: usize,
        jacobian: usize,
        /// `κ` in `−(Jᵀn)·x + κ‖x‖₁ ≤ bound`; zero gives the plain linear row.
        margin: f64,
    },
}

/// A fixed-size group of constraint rows produced from the state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    kind: BlockKind,
    label: String,
    n_x: usize,
    rows: usize,
    recipe: Recipe,
    /// For conditional blocks: base rows copied in when inactive.
    substitute: Option<Range<usize>>,
}

/// Returns `Err(BadLimits)` unless `min < max` on every entry.
fn check_limits(min: &[f64], max: &[f64]) -> Result<(), ConstraintError> {
    if min.len() != max.len() {
        return Err(ConstraintError::LayoutError(format!(
            "limit vectors have lengths {} and {}",
            min.len(),
            max.len()
        )));
    }
    for (joint, (&lo, &hi)) in min.iter().zip(max).enumerate() {
        if lo.is_nan() || hi.is_nan() || lo >= hi {
            return Err(ConstraintError::BadLimits {
                joint,
                min: lo,
                max: hi,
            });
        }
    }
    Ok(())
}

fn stacked_identity(n: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(2 * n, n);
    for j in 0..n {
        g[(j, j)] = 1.0;
        g[(n + j, j)] = -1.0;
    }
    g
}

impl ConstraintBlock {
    /// Joint velocity limits on the step `x = Δθ`, with `θ̇ ≈ x / dt`:
    /// `[I; −I]·x ≤ [dt·θ̇_max; −dt·θ̇_min]`.
    pub fn velocity(dt: f64, qd_min: &[f64], qd_max: &[f64]) -> Result<Self, ConstraintError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConstraintError::InvalidSet(format!("dt must be positive, got {dt}")));
        }
        check_limits(qd_min, qd_max)?;
        let n = qd_min.len();
        let h = DVector::from_iterator(
            2 * n,
            qd_max.iter().map(|v| dt * v).chain(qd_min.iter().map(|v| -dt * v)),
        );
        Ok(Self {
            kind: BlockKind::Constant,
            label: "joint velocity".into(),
            n_x: n,
            rows: 2 * n,
            recipe: Recipe::Constant {
                g: stacked_identity(n),
                h,
            },
            substitute: None,
        })
    }

    /// Joint position limits `θ_min ≤ θ + x ≤ θ_max`. Joints with infinite
    /// limits on both sides are left out. Each emitted bound is
    /// `H_θ·s + [θ_max; −θ_min]` with `H_θ` a `0/±1` selection of the state.
    pub fn position(
        theta_min: &[f64],
        theta_max: &[f64],
        layout: &StateLayout,
    ) -> Result<Self, ConstraintError> {
        check_limits(theta_min, theta_max)?;
        let n = theta_min.len();
        if n != layout.n_joints() {
            return Err(ConstraintError::LayoutError(format!(
                "{n} position limits for {} joints",
                layout.n_joints()
            )));
        }
        let upper: Vec<usize> = (0..n).filter(|&j| theta_max[j].is_finite()).collect();
        let lower: Vec<usize> = (0..n).filter(|&j| theta_min[j].is_finite()).collect();
        let rows = upper.len() + lower.len();
        let mut g = DMatrix::zeros(rows, n);
        let mut selection = DMatrix::zeros(rows, layout.len);
        let mut offset = DVector::zeros(rows);
        let slot = |j: usize| {
            layout.joint_positions[j].ok_or_else(|| {
                ConstraintError::LayoutError(format!("state has no position entry for joint {j}"))
            })
        };
        for (r, &j) in upper.iter().enumerate() {
            g[(r, j)] = 1.0;
            selection[(r, slot(j)?)] = -1.0;
            offset[r] = theta_max[j];
        }
        for (k, &j) in lower.iter().enumerate() {
            let r = upper.len() + k;
            g[(r, j)] = -1.0;
            selection[(r, slot(j)?)] = 1.0;
            offset[r] = -theta_min[j];
        }
        Ok(Self {
            kind: BlockKind::AffineInState,
            label: "joint position".into(),
            n_x: n,
            rows,
            recipe: Recipe::Affine {
                g,
                selection,
                offset,
            },
            substitute: None,
        })
    }

    /// Joint torque limits with `τ` affine in the step through the
    /// forward-difference acceleration `θ̈ = x/dt² − θ̇/dt`:
    /// `τ = (H_τ/dt²)·[0; x] + C_τ − (H_τ/dt)·[0; θ̇]`.
    /// `H_τ`, `C_τ` and `θ̇` are read from the (extended) state.
    pub fn torque(
        dt: f64,
        tau_min: &[f64],
        tau_max: &[f64],
        layout: &StateLayout,
    ) -> Result<Self, ConstraintError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConstraintError::InvalidSet(format!("dt must be positive, got {dt}")));
        }
        check_limits(tau_min, tau_max)?;
        let n = layout.n_joints();
        if tau_min.len() != n {
            return Err(ConstraintError::LayoutError(format!(
                "{} torque limits for {n} joints",
                tau_min.len()
            )));
        }
        let missing = |what: &str| ConstraintError::LayoutError(format!("state has no {what} entries"));
        let velocities = layout.joint_velocities.ok_or_else(|| missing("joint velocity"))?;
        let mass_rows = layout.mass_rows.ok_or_else(|| missing("mass matrix"))?;
        let bias = layout.bias.ok_or_else(|| missing("bias"))?;
        if layout.generalized_dof < n {
            return Err(ConstraintError::LayoutError(
                "mass rows narrower than the joint count".into(),
            ));
        }
        Ok(Self {
            kind: BlockKind::Auxiliary,
            label: "joint torque".into(),
            n_x: n,
            rows: 2 * n,
            recipe: Recipe::Torque {
                dt,
                tau_min: tau_min.to_vec(),
                tau_max: tau_max.to_vec(),
                velocities,
                mass_rows,
                generalized_dof: layout.generalized_dof,
                bias,
            },
            substitute: None,
        })
    }

    /// Velocity damping for one distance pair:
    /// `−ξ (d − d_m)/(d_M − d_m) ≤ (Jᵀn)·x/dt`, enabled while `d_M − d ≥ 0`.
    ///
    /// When the pair already starts inside the security distance the bound
    /// would forbid `x = 0`; it is relaxed to zero so that standing still
    /// stays feasible.
    pub fn collision(
        pair: LinkPair,
        dt: f64,
        xi: f64,
        d_m: f64,
        d_max: f64,
        layout: &StateLayout,
    ) -> Result<Self, ConstraintError> {
        if !(d_m < d_max) {
            return Err(ConstraintError::BadThresholds { d_m, d_max });
        }
        if !(dt > 0.0 && dt.is_finite() && xi > 0.0 && xi.is_finite()) {
            return Err(ConstraintError::InvalidSet(format!(
                "dt and xi must be positive, got {dt} and {xi}"
            )));
        }
        let slots = layout.pair(pair).ok_or_else(|| {
            let (a, b) = pair.names();
            ConstraintError::LayoutError(format!("state has no distance entries for ({a}, {b})"))
        })?;
        let (a, b) = pair.names();
        Ok(Self {
            kind: BlockKind::Conditional,
            label: format!("collision ({a}, {b})"),
            n_x: layout.n_joints(),
            rows: 1,
            recipe: Recipe::Collision {
                dt,
                xi,
                d_m,
                d_max,
                distance: slots.distance,
                jacobian: slots.jacobian,
                margin: 0.0,
            },
            substitute: Some(0..1),
        })
    }

    /// Makes a collision block robust to the curvature of the distance over
    /// one step. If `|∂²d/∂θ²| ≤ curvature` and every joint step is at most
    /// `max_step`, then `d(θ + x) ≥ d + (Jᵀn)·x − ½·curvature·max_step·‖x‖₁`,
    /// so requiring `−(Jᵀn)·x + κ‖x‖₁ ≤ bound` with `κ = ½·curvature·max_step`
    /// bounds the true distance change rather than its linearization. The
    /// `ℓ₁` term is written as one row per sign pattern, `2ⁿ` rows in all, and
    /// the substitute range grows to match. Other block kinds are returned
    /// unchanged.
    pub fn with_step_margin(mut self, curvature: f64, max_step: f64) -> Result<Self, ConstraintError> {
        if !(curvature >= 0.0 && curvature.is_finite() && max_step >= 0.0 && max_step.is_finite()) {
            return Err(ConstraintError::InvalidSet(format!(
                "curvature bound and step bound must be finite and nonnegative, got {curvature} and {max_step}"
            )));
        }
        let n = self.n_x;
        if let Recipe::Collision { margin, .. } = &mut self.recipe {
            *margin = 0.5 * curvature * max_step;
            if *margin > 0.0 {
                if n > 16 {
                    return Err(ConstraintError::InvalidSet(format!(
                        "step margin needs 2^{n} rows"
                    )));
                }
                self.rows = 1 << n;
                self.substitute = Some(0..self.rows);
            }
        }
        Ok(self)
    }

    /// Constant equality or inequality rows given explicitly.
    pub fn constant(label: &str, g: DMatrix<f64>, h: DVector<f64>) -> Result<Self, ConstraintError> {
        if g.nrows() != h.len() {
            return Err(ConstraintError::InvalidSet(format!(
                "{} rows with {} bounds",
                g.nrows(),
                h.len()
            )));
        }
        Ok(Self {
            kind: BlockKind::Constant,
            label: label.into(),
            n_x: g.ncols(),
            rows: g.nrows(),
            recipe: Recipe::Constant { g, h },
            substitute: None,
        })
    }

    /// Overrides which assembled base rows stand in for an inactive
    /// conditional block.
    pub fn with_substitute(mut self, rows: Range<usize>) -> Self {
        self.substitute = Some(rows);
        self
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }
    pub fn label(&self) -> &str {
        &self.label
    }
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn n_x(&self) -> usize {
        self.n_x
    }
    pub fn substitute(&self) -> Option<Range<usize>> {
        self.substitute.clone()
    }

    /// State indices this block reads; every other entry is irrelevant to it.
    pub fn dependencies(&self) -> Vec<usize> {
        match &self.recipe {
            Recipe::Constant { .. } => Vec::new(),
            Recipe::Affine { selection, .. } => (0..selection.ncols())
                .filter(|&c| selection.column(c).iter().any(|v| *v != 0.0))
                .collect(),
            Recipe::Torque {
                velocities,
                mass_rows,
                generalized_dof,
                bias,
                ..
            } => {
                let n = self.n_x;
                let mut deps: Vec<usize> = (*velocities..velocities + n).collect();
                deps.extend(*mass_rows..mass_rows + n * generalized_dof);
                deps.extend(*bias..bias + n);
                deps
            }
            Recipe::Collision {
                distance, jacobian, ..
            } => {
                let mut deps = vec![*distance];
                deps.extend(*jacobian..jacobian + self.n_x);
                deps
            }
        }
    }

    /// `h_test` of a conditional block; the block is active iff every entry
    /// is nonnegative.
    pub fn activation(&self, state: &[f64]) -> Option<f64> {
        match &self.recipe {
            Recipe::Collision {
                d_max, distance, ..
            } => Some(d_max - state[*distance]),
            _ => None,
        }
    }

    pub fn is_active(&self, state: &[f64]) -> bool {
        self.activation(state).is_none_or(|t| t >= 0.0)
    }

    /// Writes this block's rows into `g` / `h` starting at `row`.
    fn emit(&self, state: &[f64], g: &mut DMatrix<f64>, h: &mut DVector<f64>, row: usize) {
        let n = self.n_x;
        match &self.recipe {
            Recipe::Constant { g: gb, h: hb } => {
                g.view_mut((row, 0), (self.rows, n)).copy_from(gb);
                h.rows_mut(row, self.rows).copy_from(hb);
            }
            Recipe::Affine {
                g: gb,
                selection,
                offset,
            } => {
                g.view_mut((row, 0), (self.rows, n)).copy_from(gb);
                for r in 0..self.rows {
                    let sel: f64 = selection
                        .row(r)
                        .iter()
                        .zip(state)
                        .filter(|(w, _)| **w != 0.0)
                        .map(|(w, s)| w * s)
                        .sum();
                    h[row + r] = sel + offset[r];
                }
            }
            Recipe::Torque {
                dt,
                tau_min,
                tau_max,
                velocities,
                mass_rows,
                generalized_dof,
                bias,
            } => {
                let joint_col0 = generalized_dof - n;
                for j in 0..n {
                    let mrow = &state[mass_rows + j * generalized_dof..mass_rows + (j + 1) * generalized_dof];
                    let hj = &mrow[joint_col0..];
                    let h_qd: f64 = hj
                        .iter()
                        .zip(&state[*velocities..velocities + n])
                        .map(|(a, b)| a * b)
                        .sum();
                    // τ_j(x) = hj·x/dt² + c_j − hj·θ̇/dt
                    let free = state[bias + j] - h_qd / dt;
                    for (c, &hjc) in hj.iter().enumerate() {
                        g[(row + j, c)] = hjc / (dt * dt);
                        g[(row + n + j, c)] = -hjc / (dt * dt);
                    }
                    h[row + j] = tau_max[j] - free;
                    h[row + n + j] = free - tau_min[j];
                }
            }
            Recipe::Collision {
                dt,
                xi,
                d_m,
                d_max,
                distance,
                jacobian,
                margin,
            } => {
                let d = state[*distance];
                let bound = (dt * xi * (d - d_m) / (d_max - d_m)).max(0.0);
                for r in 0..self.rows {
                    for c in 0..n {
                        // Bit c of r picks the sign of x_c in the ℓ₁ term.
                        let sign = if (r >> c) & 1 == 0 { 1.0 } else { -1.0 };
                        g[(row + r, c)] = -state[jacobian + c] + margin * sign;
                    }
                    h[row + r] = bound;
                }
            }
        }
    }
}

/// Assembled `G x ≤ h`, `A x = b` for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledConstraints {
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Activation flag per conditional block, in block order.
    pub active: Vec<bool>,
    /// For each row of `G`, the constraint it belongs to, or `None` for
    /// substitute rows of an inactive block. Rows sharing an index encode a
    /// single constraint (the sign-pattern rows of a collision block). Empty
    /// means every row is its own constraint.
    pub groups: Vec<Option<usize>>,
}

impl AssembledConstraints {
    /// Largest violation of the assembled constraints at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ineq = (&self.g * x - &self.h).iter().fold(0.0_f64, |m, v| m.max(*v));
        let eq = (&self.a * x - &self.b).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        ineq.max(eq)
    }
}

/// Ordered constraint blocks with a state-independent assembled shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    n_x: usize,
    state_len: usize,
    base: Vec<ConstraintBlock>,
    conditional: Vec<ConstraintBlock>,
    equalities: Vec<ConstraintBlock>,
    base_rows: usize,
}

impl ConstraintSet {
    /// Base (always-on) blocks keep their relative order; conditional blocks
    /// are appended after them. Equality blocks must not be conditional.
    pub fn new(
        n_x: usize,
        layout: &StateLayout,
        blocks: Vec<ConstraintBlock>,
        equalities: Vec<ConstraintBlock>,
    ) -> Result<Self, ConstraintError> {
        let (conditional, base): (Vec<_>, Vec<_>) = blocks
            .into_iter()
            .partition(|b| b.kind == BlockKind::Conditional);
        for b in base.iter().chain(&conditional).chain(&equalities) {
            if b.n_x != n_x {
                return Err(ConstraintError::InvalidSet(format!(
                    "block '{}' has {} columns, expected {n_x}",
                    b.label, b.n_x
                )));
            }
            if b.dependencies().iter().any(|&i| i >= layout.len) {
                return Err(ConstraintError::LayoutError(format!(
                    "block '{}' reads past the end of the state",
                    b.label
                )));
            }
        }
        if let Some(b) = equalities.iter().find(|b| b.kind == BlockKind::Conditional) {
            return Err(ConstraintError::InvalidSet(format!(
                "equality block '{}' cannot be conditional",
                b.label
            )));
        }
        let base_rows: usize = base.iter().map(|b| b.rows).sum();
        for b in &conditional {
            let sub = b.substitute.clone().unwrap_or(0..b.rows);
            if sub.len() != b.rows || sub.end > base_rows {
                return Err(ConstraintError::InvalidSet(format!(
                    "substitute rows {sub:?} for '{}' must be {} of the {base_rows} base rows",
                    b.label, b.rows
                )));
            }
        }
        Ok(Self {
            n_x,
            state_len: layout.len,
            base,
            conditional,
            equalities,
            base_rows,
        })
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// `(n_in, n_eq)` of every assembled problem.
    pub fn shape(&self) -> (usize, usize) {
        let n_in = self.base_rows + self.conditional.iter().map(|b| b.rows).sum::<usize>();
        let n_eq = self.equalities.iter().map(|b| b.rows).sum();
        (n_in, n_eq)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConstraintBlock> {
        self.base.iter().chain(&self.conditional)
    }

    pub fn conditional_blocks(&self) -> &[ConstraintBlock] {
        &self.conditional
    }

    /// Builds `(G, h, A, b)` for `state`: base rows, then for every
    /// conditional block either its own rows (active) or its substitute rows.
    pub fn assemble(&self, state: &[f64]) -> Result<AssembledConstraints, ConstraintError> {
        if state.len() != self.state_len {
            return Err(ConstraintError::LayoutError(format!(
                "state has {} entries, layout expects {}",
                state.len(),
                self.state_len
            )));
        }
        let (n_in, n_eq) = self.shape();
        let mut g = DMatrix::zeros(n_in, self.n_x);
        let mut h = DVector::zeros(n_in);
        let mut row = 0;
        let mut groups = Vec::with_capacity(n_in);
        let mut next = 0;
        let mut label = |b: &ConstraintBlock, groups: &mut Vec<Option<usize>>| {
            if matches!(b.recipe, Recipe::Collision { .. }) {
                groups.extend(std::iter::repeat_n(Some(next), b.rows));
                next += 1;
            } else {
                groups.extend((next..next + b.rows).map(Some));
                next += b.rows;
            }
        };
        for b in &self.base {
            b.emit(state, &mut g, &mut h, row);
            label(b, &mut groups);
            row += b.rows;
        }
        let mut active = Vec::with_capacity(self.conditional.len());
        for b in &self.conditional {
            let on = b.is_active(state);
            if on {
                b.emit(state, &mut g, &mut h, row);
                label(b, &mut groups);
            } else {
                groups.extend(std::iter::repeat_n(None, b.rows));
                let sub = b.substitute.clone().unwrap_or(0..b.rows);
                for (k, src) in sub.enumerate() {
                    let src_row = g.row(src).into_owned();
                    g.row_mut(row + k).copy_from(&src_row);
                    h[row + k] = h[src];
                }
            }
            active.push(on);
            row += b.rows;
        }
        let mut a = DMatrix::zeros(n_eq, self.n_x);
        let mut bvec = DVector::zeros(n_eq);
        let mut row = 0;
        for e in &self.equalities {
            e.emit(state, &mut a, &mut bvec, row);
            row += e.rows;
        }
        Ok(AssembledConstraints {
            g,
            h,
            a,
            b: bvec,
            active,
            groups,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    /// `[theta_elbow, qd0, qd1, H(2x3), C(2), d, jn(2)]`
    fn toy_layout() -> StateLayout {
        StateLayout {
            len: 14,
            joint_positions: vec![None, Some(0)],
            joint_velocities: Some(1),
            mass_rows: Some(3),
            generalized_dof: 3,
            bias: Some(9),
            pairs: vec![PairSlots {
                pair: LinkPair::ForearmObstacle,
                distance: 11,
                jacobian: 12,
            }],
        }
    }

    #[test]
    fn velocity_rows() {
        let b = ConstraintBlock::velocity(0.01, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let layout = toy_layout();
        let set = ConstraintSet::new(2, &layout, vec![b], vec![]).unwrap();
        let c = set.assemble(&[0.0; 14]).unwrap();
        let x = DVector::from_vec(vec![0.02, 0.0]);
        let viol = &c.g * &x - &c.h;
        assert_relative_eq!(viol[0], 0.01, epsilon = 1e-15);
        assert!(viol.iter().skip(1).all(|v| *v <= 0.0));
        // Constant: a different state gives identical matrices.
        let other = set.assemble(&[0.7; 14]).unwrap();
        assert_eq!(c, other);
    }

    #[test]
    fn bad_limits_and_thresholds() {
        assert!(matches!(
            ConstraintBlock::velocity(0.01, &[1.0], &[1.0]),
            Err(ConstraintError::BadLimits { joint: 0, .. })
        ));
        let layout = toy_layout();
        assert!(matches!(
            ConstraintBlock::collision(LinkPair::ForearmObstacle, 0.01, 1.0, 0.05, 0.05, &layout),
            Err(ConstraintError::BadThresholds { .. })
        ));
        assert!(matches!(
            ConstraintBlock::collision(LinkPair::UpperArmObstacle, 0.01, 1.0, 0.01, 0.05, &layout),
            Err(ConstraintError::LayoutError(_))
        ));
    }

    #[test]
    fn elbow_position_bounds() {
        let layout = toy_layout();
        let b = ConstraintBlock::position(&[f64::NEG_INFINITY, -PI], &[f64::INFINITY, PI], &layout)
            .unwrap();
        assert_eq!(b.rows(), 2);
        let set = ConstraintSet::new(2, &layout, vec![b], vec![]).unwrap();
        let mut state = [0.0; 14];
        let c = set.assemble(&state).unwrap();
        assert_relative_eq!(c.h[0], PI);
        assert_relative_eq!(c.h[1], PI);
        state[0] = PI - 0.1;
        let c = set.assemble(&state).unwrap();
        assert_relative_eq!(c.h[0], 0.1, epsilon = 1e-14);
        assert_relative_eq!(c.h[1], 2.0 * PI - 0.1, epsilon = 1e-14);
    }

    #[test]
    fn position_needs_layout_entries() {
        let mut layout = toy_layout();
        layout.joint_positions = vec![None, None];
        assert!(matches!(
            ConstraintBlock::position(&[-1.0, -1.0], &[1.0, 1.0], &layout),
            Err(ConstraintError::LayoutError(_))
        ));
        layout.mass_rows = None;
        assert!(matches!(
            ConstraintBlock::torque(0.01, &[-1.0, -1.0], &[1.0, 1.0], &layout),
            Err(ConstraintError::LayoutError(_))
        ));
    }

    #[test]
    fn torque_rows_at_rest_equal_bias() {
        let layout = toy_layout();
        let b = ConstraintBlock::torque(0.01, &[-5.0, -5.0], &[5.0, 5.0], &layout).unwrap();
        let set = ConstraintSet::new(2, &layout, vec![b], vec![]).unwrap();
        let mut state = [0.0; 14];
        // H joint columns [[2, 1], [1, 3]] after one base column.
        state[3..9].copy_from_slice(&[9.0, 2.0, 1.0, 9.0, 1.0, 3.0]);
        state[9] = 0.5;
        state[10] = -0.25;
        let c = set.assemble(&state).unwrap();
        // x = 0: τ = C, so the upper bound slack is τ_max − C.
        assert_relative_eq!(c.h[0], 4.5);
        assert_relative_eq!(c.h[1], 5.25);
        assert_relative_eq!(c.h[2], 5.5);
        assert_relative_eq!(c.h[3], 4.75);
        assert_relative_eq!(c.g[(0, 0)], 2.0e4);
        assert_relative_eq!(c.g[(1, 1)], 3.0e4);
        assert_relative_eq!(c.g[(2, 0)], -2.0e4);
    }

    fn collision_set(d: f64) -> (ConstraintSet, [f64; 14]) {
        let layout = toy_layout();
        let v = ConstraintBlock::velocity(0.01, &[-1.0, -2.0], &[1.0, 2.0]).unwrap();
        let c = ConstraintBlock::collision(LinkPair::ForearmObstacle, 0.01, 1.0, 0.01, 0.05, &layout)
            .unwrap();
        let set = ConstraintSet::new(2, &layout, vec![v, c], vec![]).unwrap();
        let mut state = [0.0; 14];
        state[11] = d;
        state[12] = 0.3;
        state[13] = -0.4;
        (set, state)
    }

    #[test]
    fn collision_activation_and_substitution() {
        let (set, state) = collision_set(0.06);
        let c = set.assemble(&state).unwrap();
        assert_eq!(c.active, vec![false]);
        assert_eq!(c.g.row(4), c.g.row(0));
        assert_eq!(c.h[4], c.h[0]);

        let (set, state) = collision_set(0.03);
        let c = set.assemble(&state).unwrap();
        assert_eq!(c.active, vec![true]);
        // Midway between d_m and d_M with ξ = 1: closing speed ξ/2.
        assert_relative_eq!(c.h[4] / 0.01, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c.g[(4, 0)], -0.3);
        assert_relative_eq!(c.g[(4, 1)], 0.4);
    }

    #[test]
    fn collision_bound_at_security_distance_and_inside() {
        let (set, state) = collision_set(0.01);
        assert_eq!(set.assemble(&state).unwrap().h[4], 0.0);
        // Inside d_m the bound is relaxed so x = 0 stays feasible.
        let (set, state) = collision_set(0.0);
        let c = set.assemble(&state).unwrap();
        assert_eq!(c.h[4], 0.0);
        assert!(c.max_violation(&DVector::zeros(2)) <= 0.0);
    }

    #[test]
    fn step_margin_rows() {
        let layout = toy_layout();
        let v = ConstraintBlock::velocity(0.01, &[-1.0, -2.0], &[1.0, 2.0]).unwrap();
        let c = ConstraintBlock::collision(LinkPair::ForearmObstacle, 0.01, 1.0, 0.01, 0.05, &layout)
            .unwrap()
            .with_step_margin(2.0, 0.05)
            .unwrap();
        assert_eq!(c.rows(), 4);
        assert_eq!(c.substitute(), Some(0..4));
        let set = ConstraintSet::new(2, &layout, vec![v, c], vec![]).unwrap();
        assert_eq!(set.shape(), (8, 0));
        let mut state = [0.0; 14];
        state[11] = 0.03;
        state[12] = 0.3;
        state[13] = -0.4;
        let a = set.assemble(&state).unwrap();
        // margin = ½·2·0.05 = 0.05; the four rows cover every sign pattern.
        let mut rows: Vec<(f64, f64)> = (4..8).map(|r| (a.g[(r, 0)], a.g[(r, 1)])).collect();
        rows.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let expected = [(-0.35, 0.35), (-0.35, 0.45), (-0.25, 0.35), (-0.25, 0.45)];
        for (r, e) in rows.iter().zip(expected) {
            assert_relative_eq!(r.0, e.0, epsilon = 1e-15);
            assert_relative_eq!(r.1, e.1, epsilon = 1e-15);
        }
        assert!((4..8).all(|r| a.h[r] == a.h[4]));
        // The rows enforce −Jᵀn·x + margin‖x‖₁ ≤ bound.
        let x = DVector::from_vec(vec![0.002, -0.003]);
        let lhs = -(0.3 * 0.002 - 0.4 * -0.003) + 0.05 * 0.005;
        let worst = (4..8).map(|r| (a.g.row(r) * &x)[0]).fold(f64::MIN, f64::max);
        assert_relative_eq!(worst, lhs, epsilon = 1e-15);

        let (plain, _) = collision_set(0.03);
        let zero = ConstraintBlock::collision(LinkPair::ForearmObstacle, 0.01, 1.0, 0.01, 0.05, &layout)
            .unwrap()
            .with_step_margin(0.0, 0.05)
            .unwrap();
        assert_eq!(zero.rows(), 1);
        assert_eq!(plain.shape(), (5, 0));
        assert!(ConstraintBlock::collision(LinkPair::ForearmObstacle, 0.01, 1.0, 0.01, 0.05, &layout)
            .unwrap()
            .with_step_margin(-1.0, 0.05)
            .is_err());
    }

    #[test]
    fn substitute_range_is_validated() {
        let layout = toy_layout();
        let v = ConstraintBlock::velocity(0.01, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let c = ConstraintBlock::collision(LinkPair::ForearmObstacle, 0.01, 1.0, 0.01, 0.05, &layout)
            .unwrap()
            .with_substitute(4..5);
        assert!(matches!(
            ConstraintSet::new(2, &layout, vec![v, c], vec![]),
            Err(ConstraintError::InvalidSet(_))
        ));
    }

    #[test]
    fn equality_blocks_fill_a_and_b() {
        let layout = toy_layout();
        let eq = ConstraintBlock::constant(
            "fixed elbow",
            DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let set = ConstraintSet::new(2, &layout, vec![], vec![eq]).unwrap();
        assert_eq!(set.shape(), (0, 1));
        let c = set.assemble(&[0.0; 14]).unwrap();
        assert_eq!(c.a[(0, 1)], 1.0);
    }
}
