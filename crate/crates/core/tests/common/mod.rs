//! Test-only oracles, independent of the code paths they check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use safelayer::qp::QpProblem;

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random feasible projection-style QP (`P = I`) around a known interior point.
pub fn random_feasible_qp(
    rng: &mut ChaCha8Rng,
    max_nx: usize,
    max_nin: usize,
    max_neq: usize,
) -> QpProblem {
    let nx = rng.random_range(1..=max_nx);
    let nin = rng.random_range(0..=max_nin);
    let neq = rng.random_range(0..=max_neq.min(nx.saturating_sub(1)));
    let x0 = DVector::from_fn(nx, |_, _| normal(rng));
    let g = DMatrix::from_fn(nin, nx, |_, _| normal(rng));
    let h = &g * &x0 + DVector::from_fn(nin, |_, _| rng.random_range(0.0..1.0));
    let a = DMatrix::from_fn(neq, nx, |_, _| normal(rng));
    let b = &a * &x0;
    let q = DVector::from_fn(nx, |_, _| 3.0 * normal(rng));
    QpProblem::new(DMatrix::identity(nx, nx), q, g, h, a, b).unwrap()
}

/// Brute-force active-set enumeration. For each candidate working set `W`
/// (in order of increasing size) solve the equality-constrained problem
/// `min ½xᵀPx + qᵀx  s.t.  G_W x = h_W, A x = b` and accept the first one that
/// is primal feasible with nonnegative multipliers. With `P ≻ 0` that point is
/// the unique optimum.
pub fn active_set_oracle(problem: &QpProblem) -> Option<DVector<f64>> {
    let (nx, nin, neq) = problem.shape();
    let max_active = nx.saturating_sub(neq).min(nin);
    let mut subset = Vec::new();
    for size in 0..=max_active {
        if let Some(x) = search(problem, 0, size, &mut subset) {
            return Some(x);
        }
    }
    let _ = nin;
    None
}

fn search(problem: &QpProblem, start: usize, remaining: usize, subset: &mut Vec<usize>) -> Option<DVector<f64>> {
    if remaining == 0 {
        return try_working_set(problem, subset);
    }
    for i in start..problem.n_in() {
        subset.push(i);
        let found = search(problem, i + 1, remaining - 1, subset);
        subset.pop();
        if found.is_some() {
            return found;
        }
    }
    None
}

fn try_working_set(problem: &QpProblem, working: &[usize]) -> Option<DVector<f64>> {
    let (nx, _, neq) = problem.shape();
    let m = working.len();
    let dim = nx + m + neq;
    let mut k = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    k.view_mut((0, 0), (nx, nx)).copy_from(problem.p());
    for c in 0..nx {
        rhs[c] = -problem.q()[c];
    }
    for (r, &i) in working.iter().enumerate() {
        for c in 0..nx {
            k[(nx + r, c)] = problem.g()[(i, c)];
            k[(c, nx + r)] = problem.g()[(i, c)];
        }
        rhs[nx + r] = problem.h()[i];
    }
    for j in 0..neq {
        for c in 0..nx {
            k[(nx + m + j, c)] = problem.a()[(j, c)];
            k[(c, nx + m + j)] = problem.a()[(j, c)];
        }
        rhs[nx + m + j] = problem.b()[j];
    }
    // Reject dependent working sets (singular or nearly singular systems).
    let lu = k.lu();
    let diag = lu.u().diagonal().abs();
    if diag.min() <= 1e-10 * diag.max().max(1.0) {
        return None;
    }
    let sol = lu.solve(&rhs)?;
    let x = sol.rows(0, nx).into_owned();
    if working.iter().enumerate().any(|(r, _)| sol[nx + r] < -1e-9) {
        return None;
    }
    let slack = problem.h() - problem.g() * &x;
    if slack.iter().any(|s| *s < -1e-9) {
        return None;
    }
    Some(x)
}

/// Central finite-difference Jacobian of `f` at `x`.
pub fn finite_difference_jacobian(
    x: &DVector<f64>,
    step: f64,
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for j in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += step;
        xm[j] -= step;
        let d = (f(&xp) - f(&xm)) / (2.0 * step);
        jac.column_mut(j).copy_from(&d);
    }
    jac
}

/// Relative max-norm error `‖a − b‖∞ / max(1, ‖b‖∞)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// A reacher state with the arm anywhere in its range, joint speeds within
/// the default limit and the obstacle either anywhere or close to a link
/// (surface gap in `[0, 0.06]`), never overlapping.
pub fn random_scene(rng: &mut ChaCha8Rng, env: &mut safelayer::env::Reacher2d, near: bool) -> Vec<f64> {
    use nalgebra::Vector2;
    use std::f64::consts::PI;
    let robot = env.config().robot.clone();
    let radius = env.config().obstacle_radius;
    let vmax = 2.0 * PI;
    loop {
        let theta = Vector2::new(rng.random_range(-PI..PI), rng.random_range(-PI..PI));
        let theta_dot = Vector2::new(rng.random_range(-vmax..vmax), rng.random_range(-vmax..vmax));
        let target = Vector2::new(rng.random_range(-0.27..0.27), rng.random_range(-0.27..0.27));
        let obstacle = if near {
            let (p_fa, p_ee) = robot.forward_kinematics(theta);
            let t = rng.random_range(0.0..2.0);
            let p = if t < 1.0 { p_fa * t } else { p_fa + (p_ee - p_fa) * (t - 1.0) };
            let phi = rng.random_range(-PI..PI);
            let gap = robot.link_radius + radius + rng.random_range(0.0..0.06);
            Vector2::new(p.x + gap * phi.cos(), p.y + gap * phi.sin())
        } else {
            Vector2::new(rng.random_range(-0.27..0.27), rng.random_range(-0.27..0.27))
        };
        let circle = safelayer::robot::Circle { center: obstacle, radius };
        if robot.min_distance(theta, &circle) > 0.0 {
            return env.set_scene(theta, theta_dot, target, obstacle);
        }
    }
}

/// Kinetic energy of the arm with a moving base, from point masses along each
/// rod. Uses only planar kinematics: no mass matrix, no inertia formulas.
/// `base` is `[v_x, v_y, v_z, ω_x, ω_y, ω_z]`.
pub fn particle_energy(robot: &safelayer::robot::PlanarRobot, theta: [f64; 2], theta_dot: [f64; 2], base: [f64; 6]) -> f64 {
    const SEGMENTS: usize = 400;
    let v_base = Vector3::new(base[0], base[1], base[2]);
    let w_base = Vector3::new(base[3], base[4], base[5]);
    let u1 = Vector3::new(theta[0].cos(), theta[0].sin(), 0.0);
    let u2 = Vector3::new((theta[0] + theta[1]).cos(), (theta[0] + theta[1]).sin(), 0.0);
    let elbow = robot.upper_arm_length * u1;
    let w1 = Vector3::z() * theta_dot[0];
    let w2 = Vector3::z() * (theta_dot[0] + theta_dot[1]);
    let mut energy = 0.0;
    for k in 0..SEGMENTS {
        // Midpoint rule: the integrand is quadratic in s, error O(1/SEGMENTS²).
        let f = (k as f64 + 0.5) / SEGMENTS as f64;
        let s1 = f * robot.upper_arm_length;
        let p1 = s1 * u1;
        let v1 = w1.cross(&p1) + v_base + w_base.cross(&p1);
        energy += 0.5 * robot.upper_arm_mass / SEGMENTS as f64 * v1.norm_squared();
        let s2 = f * robot.forearm_length;
        let p2 = elbow + s2 * u2;
        let v2 = w1.cross(&elbow) + w2.cross(&(s2 * u2)) + v_base + w_base.cross(&p2);
        energy += 0.5 * robot.forearm_mass / SEGMENTS as f64 * v2.norm_squared();
    }
    energy
}

/// Euler–Lagrange torque `d/dt ∂L/∂θ̇ − ∂L/∂θ` by differencing the particle
/// energy along the trajectory `θ(t) = θ + θ̇t + ½θ̈t²`.
pub fn lagrange_torque(robot: &safelayer::robot::PlanarRobot, theta: [f64; 2], theta_dot: [f64; 2], theta_ddot: [f64; 2]) -> [f64; 2] {
    let l = |th: [f64; 2], thd: [f64; 2]| particle_energy(robot, th, thd, [0.0; 6]);
    // Exact for a quadratic form, any step size works.
    let momentum = |th: [f64; 2], thd: [f64; 2], j: usize| {
        let mut a = thd;
        let mut b = thd;
        a[j] += 1.0;
        b[j] -= 1.0;
        (l(th, a) - l(th, b)) / 2.0
    };
    let at = |t: f64| {
        let th = [0, 1].map(|j| theta[j] + theta_dot[j] * t + 0.5 * theta_ddot[j] * t * t);
        let thd = [0, 1].map(|j| theta_dot[j] + theta_ddot[j] * t);
        (th, thd)
    };
    let dt = 1e-5;
    let h = 1e-6;
    [0, 1].map(|j| {
        let (tp, vp) = at(dt);
        let (tm, vm) = at(-dt);
        let dp = (momentum(tp, vp, j) - momentum(tm, vm, j)) / (2.0 * dt);
        let mut a = theta;
        let mut b = theta;
        a[j] += h;
        b[j] -= h;
        let dl = (l(a, theta_dot) - l(b, theta_dot)) / (2.0 * h);
        dp - dl
    })
}

/// Relative error between the implicit-KKT Jacobian of a random projection
/// QP and central finite differences, or `None` when the instance is
/// degenerate (weakly active constraints make the Jacobian undefined).
pub fn gradient_check(rng: &mut ChaCha8Rng) -> Option<f64> {
    use safelayer::qp::{solution_gradient, solve};
    let nx = rng.random_range(1..=10);
    let nin = rng.random_range(0..=20);
    let neq = rng.random_range(0..=3.min(nx - 1));
    let x0 = DVector::from_fn(nx, |_, _| normal(rng));
    let g = DMatrix::from_fn(nin, nx, |_, _| normal(rng));
    let h = &g * &x0 + DVector::from_fn(nin, |_, _| rng.random_range(0.0..1.0));
    let a = DMatrix::from_fn(neq, nx, |_, _| normal(rng));
    let b = &a * &x0;
    let target = DVector::from_fn(nx, |_, _| 3.0 * normal(rng));
    let problem = QpProblem::projection(&target, g.clone(), h.clone(), a.clone(), b.clone()).ok()?;
    let sol = solve(&problem, 10).ok()?;
    let jac = solution_gradient(&problem, &sol).ok()?;
    // x*(q) is piecewise linear, so central differences are exact while the
    // active set stays put.
    let fd = finite_difference_jacobian(problem.q(), 1e-6, |q| {
        let p = QpProblem::new(DMatrix::identity(nx, nx), q.clone(), g.clone(), h.clone(), a.clone(), b.clone()).unwrap();
        solve(&p, 50).unwrap().x_star
    });
    Some(rel_err(jac.as_slice(), fd.as_slice()))
}
