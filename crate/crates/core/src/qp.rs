//! Dense convex quadratic programs and a primal-dual interior-point solver.
//!
//! Problems have the form
//!
//! ```text
//!     minimize    ½ xᵀ P x + qᵀ x
//!     subject to  G x ≤ h
//!                 A x = b
//! ```
//!
//! with `P` symmetric positive definite. The solver runs Mehrotra
//! predictor-corrector steps on the full (unsymmetric) KKT system in the
//! variables `(x, s, z, y)`, where `s` are inequality slacks, `z` the
//! inequality duals and `y` the equality duals.
//!
//! Two execution modes exist. [`solve`] may stop as soon as the KKT residual
//! drops below [`EARLY_STOP_TOLERANCE`]. [`solve_batch`] runs the same fixed
//! number of iterations for every instance so that all problems in a batch
//! share one schedule.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::DenseLu;

/// Iteration count used throughout the toolkit.
pub const DEFAULT_MAX_ITERATIONS: usize = 10;

/// Single-problem solves stop once the KKT residual falls below this.
pub const EARLY_STOP_TOLERANCE: f64 = 1e-9;

/// In fixed-iteration mode, instances whose residual is already at this level
/// take zero-length steps (masked) instead of refactoring a degenerate system.
const MASK_TOLERANCE: f64 = 1e-13;

const STEP_FRACTION: f64 = 0.99;
const SYMMETRY_TOLERANCE: f64 = 1e-10;
const PIVOT_TOLERANCE: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("objective matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("objective matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("problem data contains non-finite entries")]
    NonFiniteData,
    #[error("KKT system is singular")]
    SingularKkt,
    #[error("iterate became non-finite at iteration {0}")]
    NumericalBlowup(usize),
    #[error("solution not converged (KKT residual {0:e})")]
    NotConverged(f64),
    #[error("strict complementarity fails (margin {0:e}); gradient undefined")]
    DegenerateActiveSet(f64),
}

/// A dense QP `min ½xᵀPx + qᵀx  s.t.  Gx ≤ h, Ax = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    g: DMatrix<f64>,
    h: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
}

impl QpProblem {
    /// Validates shapes, symmetry and positive definiteness of `P`.
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = q.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(QpError::ShapeMismatch(format!(
                "P is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if g.nrows() != h.len() || g.ncols() != n {
            return Err(QpError::ShapeMismatch(format!(
                "G is {}x{} with |h| = {}, expected {}x{n}",
                g.nrows(),
                g.ncols(),
                h.len(),
                h.len()
            )));
        }
        if a.nrows() != b.len() || a.ncols() != n {
            return Err(QpError::ShapeMismatch(format!(
                "A is {}x{} with |b| = {}, expected {}x{n}",
                a.nrows(),
                a.ncols(),
                b.len(),
                b.len()
            )));
        }
        let finite = |m: &[f64]| m.iter().all(|v| v.is_finite());
        if !(finite(p.as_slice())
            && finite(q.as_slice())
            && finite(g.as_slice())
            && finite(h.as_slice())
            && finite(a.as_slice())
            && finite(b.as_slice()))
        {
            return Err(QpError::NonFiniteData);
        }
        let asym = (&p - p.transpose()).amax();
        if asym > SYMMETRY_TOLERANCE {
            return Err(QpError::NotSymmetric(asym));
        }
        if n > 0 && p.clone().cholesky().is_none() {
            return Err(QpError::NotPositiveDefinite);
        }
        Ok(Self { p, q, g, h, a, b })
    }

    /// The projection problem `min ½‖x − target‖²` over the given constraints.
    pub fn projection(
        target: &DVector<f64>,
        g: DMatrix<f64>,
        h: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = target.len();
        Self::new(DMatrix::identity(n, n), -target, g, h, a, b)
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn n_x(&self) -> usize {
        self.q.len()
    }
    pub fn n_in(&self) -> usize {
        self.h.len()
    }
    pub fn n_eq(&self) -> usize {
        self.b.len()
    }

    /// `(n_x, n_in, n_eq)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n_x(), self.n_in(), self.n_eq())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Largest violation `max(max_i (Gx − h)_i, max_j |Ax − b|_j, 0)`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let ineq = (&self.g * x - &self.h).iter().fold(0.0_f64, |m, v| m.max(*v));
        let eq = (&self.a * x - &self.b).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        ineq.max(eq)
    }
}

/// Primal-dual iterate returned by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x_star: DVector<f64>,
    /// Inequality slacks, `G x + s = h`.
    pub s: DVector<f64>,
    /// Inequality duals.
    pub z: DVector<f64>,
    /// Equality duals.
    pub y: DVector<f64>,
    /// Max-norm of the stationarity, primal and complementarity residuals.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Starting point `(x0, s0, z0, y0)` of the interior-point iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialPoint {
    pub x: DVector<f64>,
    pub s: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

/// Solves `[P Gᵀ Aᵀ; G −I 0; A 0 0]·[x; z; y] = [−q; h; b]` and shifts the
/// resulting `−z` (slack estimate) and `z` (dual estimate) into the strictly
/// positive orthant.
pub fn init_point(problem: &QpProblem) -> Result<InitialPoint, QpError> {
    let (nx, nin, neq) = problem.shape();
    let dim = nx + nin + neq;
    let mut lu = DenseLu::with_dim(dim);
    {
        let m = lu.matrix_mut();
        for r in 0..nx {
            for c in 0..nx {
                m[r * dim + c] = problem.p[(r, c)];
            }
        }
        for i in 0..nin {
            for c in 0..nx {
                let v = problem.g[(i, c)];
                m[(nx + i) * dim + c] = v;
                m[c * dim + nx + i] = v;
            }
            m[(nx + i) * dim + nx + i] = -1.0;
        }
        for j in 0..neq {
            for c in 0..nx {
                let v = problem.a[(j, c)];
                m[(nx + nin + j) * dim + c] = v;
                m[c * dim + nx + nin + j] = v;
            }
        }
    }
    lu.factor(PIVOT_TOLERANCE).map_err(|_| QpError::SingularKkt)?;
    let mut rhs = Vec::with_capacity(dim);
    rhs.extend(problem.q.iter().map(|v| -v));
    rhs.extend(problem.h.iter());
    rhs.extend(problem.b.iter());
    let mut sol = vec![0.0; dim];
    lu.solve_into(&rhs, &mut sol);
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(QpError::NumericalBlowup(0));
    }

    let x = DVector::from_column_slice(&sol[..nx]);
    let z_raw = DVector::from_column_slice(&sol[nx..nx + nin]);
    let y = DVector::from_column_slice(&sol[nx + nin..]);
    let s = shift_positive(-&z_raw);
    let z = shift_positive(z_raw);
    Ok(InitialPoint { x, s, z, y })
}

/// Leaves `v` alone if it is strictly positive, otherwise shifts it so that its
/// smallest entry becomes 1.
fn shift_positive(mut v: DVector<f64>) -> DVector<f64> {
    if v.is_empty() {
        return v;
    }
    let min = v.min();
    if min <= 0.0 {
        v.add_scalar_mut(1.0 - min);
    }
    v
}

/// Solves a single QP. Stops early once the KKT residual is below
/// [`EARLY_STOP_TOLERANCE`], otherwise after `max_iterations` steps.
pub fn solve(problem: &QpProblem, max_iterations: usize) -> Result<QpSolution, QpError> {
    Solver::new(problem).run(max_iterations, Schedule::EarlyStop)
}

/// Runs exactly `max_iterations` steps on every problem. All problems must
/// share `(n_x, n_in, n_eq)`. Instances are independent, so the result does not
/// depend on how the batch is split across threads.
pub fn solve_batch(
    problems: &[QpProblem],
    max_iterations: usize,
) -> Result<Vec<QpSolution>, QpError> {
    if let Some(first) = problems.first() {
        let shape = first.shape();
        if let Some((i, p)) = problems.iter().enumerate().find(|(_, p)| p.shape() != shape) {
            return Err(QpError::ShapeMismatch(format!(
                "batch element {i} has shape {:?}, expected {shape:?}",
                p.shape()
            )));
        }
    }
    problems
        .par_iter()
        .map(|p| Solver::new(p).run(max_iterations, Schedule::Fixed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    EarlyStop,
    Fixed,
}

struct Residuals {
    rx: Vec<f64>,
    rz: Vec<f64>,
    ry: Vec<f64>,
    max_norm: f64,
}

struct Solver<'a> {
    problem: &'a QpProblem,
    dim: usize,
    /// KKT matrix without the iterate-dependent `Z`, `S` blocks.
    base: Vec<f64>,
    lu: DenseLu,
}

impl<'a> Solver<'a> {
    fn new(problem: &'a QpProblem) -> Self {
        let (nx, nin, neq) = problem.shape();
        let dim = nx + 2 * nin + neq;
        let mut base = vec![0.0; dim * dim];
        // Unknowns are ordered (dx, ds, dz, dy); row blocks follow the same offsets.
        let (zs, gi, ai) = (nx + nin, nx + nin, nx + 2 * nin);
        for r in 0..nx {
            for c in 0..nx {
                base[r * dim + c] = problem.p[(r, c)];
            }
        }
        for i in 0..nin {
            for c in 0..nx {
                let v = problem.g[(i, c)];
                base[c * dim + zs + i] = v;
                base[(gi + i) * dim + c] = v;
            }
            base[(gi + i) * dim + nx + i] = 1.0;
        }
        for j in 0..neq {
            for c in 0..nx {
                let v = problem.a[(j, c)];
                base[c * dim + ai + j] = v;
                base[(ai + j) * dim + c] = v;
            }
        }
        Self {
            problem,
            dim,
            base,
            lu: DenseLu::with_dim(dim),
        }
    }

    fn residuals(&self, x: &[f64], s: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let p = self.problem;
        let (nx, nin, neq) = p.shape();
        let mut rx: Vec<f64> = p.q.iter().copied().collect();
        for (r, rxr) in rx.iter_mut().enumerate() {
            for c in 0..nx {
                *rxr += p.p[(r, c)] * x[c];
            }
        }
        let mut rz = vec![0.0; nin];
        for i in 0..nin {
            let mut gx = 0.0;
            for c in 0..nx {
                let gic = p.g[(i, c)];
                gx += gic * x[c];
                rx[c] += gic * z[i];
            }
            rz[i] = gx + s[i] - p.h[i];
        }
        let mut ry = vec![0.0; neq];
        for j in 0..neq {
            let mut ax = 0.0;
            for c in 0..nx {
                let ajc = p.a[(j, c)];
                ax += ajc * x[c];
                rx[c] += ajc * y[j];
            }
            ry[j] = ax - p.b[j];
        }
        let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        let comp = s.iter().zip(z).fold(0.0_f64, |m, (a, b)| m.max((a * b).abs()));
        let max_norm = inf(&rx).max(inf(&rz)).max(inf(&ry)).max(comp);
        Residuals {
            rx,
            rz,
            ry,
            max_norm,
        }
    }

    fn run(mut self, max_iterations: usize, schedule: Schedule) -> Result<QpSolution, QpError> {
        let (nx, nin, neq) = self.problem.shape();

        if nin == 0 && neq == 0 {
            return self.unconstrained();
        }

        let start = init_point(self.problem)?;
        let mut x: Vec<f64> = start.x.iter().copied().collect();
        let mut s: Vec<f64> = start.s.iter().copied().collect();
        let mut z: Vec<f64> = start.z.iter().copied().collect();
        let mut y: Vec<f64> = start.y.iter().copied().collect();

        let dim = self.dim;
        let mut rhs = vec![0.0; dim];
        let mut aff = vec![0.0; dim];
        let mut dir = vec![0.0; dim];
        let mut iterations = 0;
        let mut res = self.residuals(&x, &s, &z, &y);

        for k in 0..max_iterations {
            let masked = match schedule {
                Schedule::EarlyStop => {
                    if res.max_norm < EARLY_STOP_TOLERANCE {
                        break;
                    }
                    false
                }
                Schedule::Fixed => res.max_norm < MASK_TOLERANCE,
            };
            iterations += 1;
            if masked {
                continue;
            }

            // K = [P 0 Gᵀ Aᵀ; 0 Z S 0; G I 0 0; A 0 0 0]
            {
                let m = self.lu.matrix_mut();
                m.copy_from_slice(&self.base);
                for i in 0..nin {
                    let row = (nx + i) * dim;
                    m[row + nx + i] = z[i];
                    m[row + nx + nin + i] = s[i];
                }
            }
            self.lu
                .factor(0.0)
                .map_err(|_| QpError::SingularKkt)?;

            // Affine-scaling (predictor) direction.
            fill_rhs(&mut rhs, &res, nx, nin, neq, |i| -s[i] * z[i]);
            self.lu.solve_into(&rhs, &mut aff);

            let mu = if nin > 0 {
                s.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / nin as f64
            } else {
                0.0
            };
            let sigma = if nin > 0 && mu > 0.0 {
                let (ds, dz) = (&aff[nx..nx + nin], &aff[nx + nin..nx + 2 * nin]);
                let alpha = max_step(&s, ds).min(max_step(&z, dz)).min(1.0);
                let mu_aff = (0..nin)
                    .map(|i| (s[i] + alpha * ds[i]) * (z[i] + alpha * dz[i]))
                    .sum::<f64>()
                    / nin as f64;
                (mu_aff / mu).powi(3)
            } else {
                0.0
            };

            // Combined predictor-corrector direction, same factorization.
            {
                let (ds, dz) = (&aff[nx..nx + nin], &aff[nx + nin..nx + 2 * nin]);
                let target = sigma * mu;
                let comp: Vec<f64> = (0..nin)
                    .map(|i| -s[i] * z[i] + target - ds[i] * dz[i])
                    .collect();
                fill_rhs(&mut rhs, &res, nx, nin, neq, |i| comp[i]);
            }
            self.lu.solve_into(&rhs, &mut dir);

            let (dx, rest) = dir.split_at(nx);
            let (ds, rest) = rest.split_at(nin);
            let (dz, dy) = rest.split_at(nin);
            let alpha = (STEP_FRACTION * max_step(&s, ds).min(max_step(&z, dz))).min(1.0);

            axpy(&mut x, alpha, dx);
            axpy(&mut s, alpha, ds);
            axpy(&mut z, alpha, dz);
            axpy(&mut y, alpha, dy);

            if [&x, &s, &z, &y].iter().any(|v| v.iter().any(|e| !e.is_finite())) {
                return Err(QpError::NumericalBlowup(k + 1));
            }
            res = self.residuals(&x, &s, &z, &y);
        }

        Ok(QpSolution {
            x_star: DVector::from_vec(x),
            s: DVector::from_vec(s),
            z: DVector::from_vec(z),
            y: DVector::from_vec(y),
            kkt_residual: res.max_norm,
            iterations,
        })
    }

    fn unconstrained(self) -> Result<QpSolution, QpError> {
        let n = self.problem.n_x();
        let mut lu = DenseLu::with_dim(n);
        lu.matrix_mut()
            .copy_from_slice(self.problem.p.transpose().as_slice());
        lu.factor(PIVOT_TOLERANCE).map_err(|_| QpError::SingularKkt)?;
        let rhs: Vec<f64> = self.problem.q.iter().map(|v| -v).collect();
        let mut x = vec![0.0; n];
        lu.solve_into(&rhs, &mut x);
        let x = DVector::from_vec(x);
        let kkt_residual = (self.problem.p() * &x + self.problem.q()).amax();
        Ok(QpSolution {
            x_star: x,
            s: DVector::zeros(0),
            z: DVector::zeros(0),
            y: DVector::zeros(0),
            kkt_residual,
            iterations: 0,
        })
    }
}

fn fill_rhs(
    rhs: &mut [f64],
    res: &Residuals,
    nx: usize,
    nin: usize,
    neq: usize,
    comp: impl Fn(usize) -> f64,
) {
    for i in 0..nx {
        rhs[i] = -res.rx[i];
    }
    for i in 0..nin {
        rhs[nx + i] = comp(i);
        rhs[nx + nin + i] = -res.rz[i];
    }
    for j in 0..neq {
        rhs[nx + 2 * nin + j] = -res.ry[j];
    }
}

/// Largest `α` with `v + α·dv ≥ 0` (unbounded directions give `+∞`).
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Threshold separating active from inactive constraints when checking
/// strict complementarity.
pub const COMPLEMENTARITY_MARGIN: f64 = 1e-7;

/// Convergence level required before differentiating a solution.
pub const GRADIENT_RESIDUAL_TOLERANCE: f64 = 1e-6;

/// Jacobian `∂x*/∂q` at a converged, strictly complementary solution.
///
/// Linearizing the KKT conditions with the active set held fixed gives
/// `P·dx + G_Aᵀ·dz_A + Aᵀ·dy = −dq`, `G_A·dx = 0`, `A·dx = 0`. Eliminating the
/// multipliers yields `dx = −N (Nᵀ P N)⁻¹ Nᵀ dq` for any basis `N` of the
/// null space of `[G_A; A]`. Working in the null space tolerates repeated
/// active rows, which the fixed-shape constraint assembly produces.
///
/// For a projection (`q = −ã`), `∂a*/∂ã` is the negation of this matrix.
pub fn solution_gradient(
    problem: &QpProblem,
    solution: &QpSolution,
) -> Result<DMatrix<f64>, QpError> {
    if !(solution.kkt_residual < GRADIENT_RESIDUAL_TOLERANCE) {
        return Err(QpError::NotConverged(solution.kkt_residual));
    }
    let (nx, nin, neq) = problem.shape();
    let mut active = Vec::new();
    let mut margin = f64::INFINITY;
    for i in 0..nin {
        let (s, z) = (solution.s[i], solution.z[i]);
        if z > s {
            active.push(i);
            margin = margin.min(z);
        } else {
            margin = margin.min(s);
        }
    }
    // At residual r a weakly active pair sits near s ≈ z ≈ √r, so the margin
    // has to clear that level as well as the absolute floor.
    let floor = COMPLEMENTARITY_MARGIN.max(10.0 * solution.kkt_residual.sqrt());
    if margin <= floor {
        return Err(QpError::DegenerateActiveSet(margin));
    }

    let rows = active.len() + neq;
    let mut m = DMatrix::zeros(rows, nx);
    for (r, &i) in active.iter().enumerate() {
        m.row_mut(r).copy_from(&problem.g.row(i));
    }
    for j in 0..neq {
        m.row_mut(active.len() + j).copy_from(&problem.a.row(j));
    }

    let null_basis = if rows == 0 {
        DMatrix::identity(nx, nx)
    } else {
        let gram = m.transpose() * &m;
        let eig = SymmetricEigen::new(gram);
        let largest = eig.eigenvalues.amax().max(1.0);
        let cols: Vec<_> = (0..nx)
            .filter(|&k| eig.eigenvalues[k] <= 1e-10 * largest)
            .map(|k| eig.eigenvectors.column(k).into_owned())
            .collect();
        if cols.is_empty() {
            return Ok(DMatrix::zeros(nx, nx));
        }
        DMatrix::from_columns(&cols)
    };

    let reduced = null_basis.transpose() * problem.p() * &null_basis;
    let inv = reduced
        .try_inverse()
        .ok_or(QpError::SingularKkt)?;
    Ok(-(&null_basis * inv * null_basis.transpose()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn empty(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, n), DVector::zeros(0))
    }

    #[test]
    fn init_point_one_dimensional() {
        // [1 1; 1 -1]·[x; z] = [0; 1] gives x = 0.5, z = -0.5, so the slack
        // estimate 0.5 is kept and the dual is shifted to -0.5 + 1.5 = 1.
        let (a, b) = empty(1);
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![0.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![1.0]),
            a,
            b,
        )
        .unwrap();
        let init = init_point(&p).unwrap();
        assert_relative_eq!(init.x[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(init.s[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(init.z[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn init_point_equality_only() {
        let (g, h) = empty(2);
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            g,
            h,
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let init = init_point(&p).unwrap();
        assert_eq!(init.x, DVector::zeros(2));
        assert_eq!(init.y, DVector::zeros(1));
    }

    #[test]
    fn unconstrained_minimum() {
        let (g, h) = empty(2);
        let (a, b) = empty(2);
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -2.0]),
            g,
            h,
            a,
            b,
        )
        .unwrap();
        let sol = solve(&p, 10).unwrap();
        assert_eq!(sol.x_star.as_slice(), &[1.0, 2.0]);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn active_bound_in_one_dimension() {
        let (a, b) = empty(1);
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![-3.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![2.0]),
            a,
            b,
        )
        .unwrap();
        let sol = solve(&p, 10).unwrap();
        assert_relative_eq!(sol.x_star[0], 2.0, epsilon = 1e-8);
        // Stationarity x - 3 + z = 0 at x = 2.
        assert_relative_eq!(sol.z[0], 1.0, epsilon = 1e-7);
        assert!(sol.kkt_residual < 1e-8);
    }

    #[test]
    fn rejects_bad_shapes_and_matrices() {
        let (a, b) = empty(2);
        let err = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::zeros(1, 3),
            DVector::zeros(1),
            a.clone(),
            b.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, QpError::ShapeMismatch(_)));

        let (g, h) = empty(2);
        let err = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]),
            DVector::zeros(2),
            g.clone(),
            h.clone(),
            a.clone(),
            b.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, QpError::NotSymmetric(_)));

        let err = QpProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            DVector::zeros(2),
            g,
            h,
            a,
            b,
        )
        .unwrap_err();
        assert_eq!(err, QpError::NotPositiveDefinite);
    }

    #[test]
    fn batch_rejects_mixed_shapes() {
        let (a, b) = empty(1);
        let one = QpProblem::projection(
            &DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![0.0]),
            a.clone(),
            b.clone(),
        )
        .unwrap();
        let two = QpProblem::projection(
            &DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![0.0, 1.0]),
            a,
            b,
        )
        .unwrap();
        assert!(matches!(
            solve_batch(&[one, two], 10),
            Err(QpError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gradient_unconstrained_is_negative_identity() {
        let p = QpProblem::projection(
            &DVector::from_vec(vec![0.3, -0.2]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![5.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve(&p, 10).unwrap();
        let jac = solution_gradient(&p, &sol).unwrap();
        assert_relative_eq!(jac, -DMatrix::<f64>::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn gradient_with_active_bound() {
        // Projection of (2, 0.5) onto x1 ≤ 1: x* = (1, 0.5), ∂x*/∂q = −diag(0, 1).
        let p = QpProblem::projection(
            &DVector::from_vec(vec![2.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve(&p, 10).unwrap();
        let jac = solution_gradient(&p, &sol).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -1.0]);
        assert_relative_eq!(jac, expected, epsilon = 1e-10);
    }

    #[test]
    fn gradient_rejects_weakly_active_constraint() {
        // Target exactly on the boundary: z* = 0 and s* = 0.
        let p = QpProblem::projection(
            &DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(0, 1),
            DVector::zeros(0),
        )
        .unwrap();
        let sol = solve(&p, 10).unwrap();
        assert!(matches!(
            solution_gradient(&p, &sol),
            Err(QpError::DegenerateActiveSet(_))
        ));
    }
}
