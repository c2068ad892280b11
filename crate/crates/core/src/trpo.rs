//! Trust-region policy optimization.
//!
//! One update maximizes the importance-weighted surrogate subject to a mean KL
//! bound. The search direction solves `F x = g` by conjugate gradients, where
//! `F` is the Fisher matrix of the Gaussian policy; the step is scaled to the
//! trust region and then shrunk geometrically until the KL bound holds and the
//! surrogate improves. The value network is fitted afterwards by Adam on the
//! GAE return targets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{gaussian_kl, gaussian_log_prob, PolicyParams, Trace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrpoError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("malformed batch: {0}")]
    BadBatch(String),
    #[error("non-finite policy gradient")]
    NonFiniteGradient,
    #[error("invalid TRPO configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub delta_kl: f64,
    pub cg_iterations: usize,
    pub cg_damping: f64,
    pub backtrack_coeff: f64,
    pub backtrack_steps: usize,
    pub value_lr: f64,
    pub value_epochs: usize,
    pub value_minibatch: usize,
    pub normalize_advantages: bool,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.97,
            delta_kl: 0.01,
            cg_iterations: 10,
            cg_damping: 0.1,
            backtrack_coeff: 0.8,
            backtrack_steps: 10,
            value_lr: 1e-3,
            value_epochs: 5,
            value_minibatch: 64,
            normalize_advantages: true,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<(), TrpoError> {
        let bad = |m: &str| Err(TrpoError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.delta_kl > 0.0 && self.delta_kl.is_finite()) {
            return bad("delta_kl must be positive");
        }
        if !(self.backtrack_coeff > 0.0 && self.backtrack_coeff < 1.0) {
            return bad("backtrack_coeff must lie in (0, 1)");
        }
        if !(self.cg_damping >= 0.0 && self.value_lr >= 0.0) {
            return bad("cg_damping and value_lr must be nonnegative");
        }
        if self.value_minibatch == 0 {
            return bad("value_minibatch must be at least 1");
        }
        Ok(())
    }
}

/// How an episode in a batch ended.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpisodeEnd {
    /// Terminal state; no value beyond the last step.
    Terminated,
    /// Cut off by the step limit; `bootstrap` is the value of the next state.
    Truncated { bootstrap: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub len: usize,
    pub end: EpisodeEnd,
}

/// Complete episodes laid end to end.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Value predictions recorded at sampling time.
    pub values: Vec<f64>,
    pub segments: Vec<Segment>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self, params: &PolicyParams) -> Result<(), TrpoError> {
        let n = self.len();
        if n == 0 {
            return Err(TrpoError::EmptyBatch);
        }
        if self.observations.len() != n || self.actions.len() != n || self.values.len() != n {
            return Err(TrpoError::BadBatch("field lengths differ".into()));
        }
        if self.segments.iter().map(|s| s.len).sum::<usize>() != n {
            return Err(TrpoError::BadBatch("segments do not cover the batch".into()));
        }
        if self.observations.iter().any(|o| o.len() != params.obs_dim())
            || self.actions.iter().any(|a| a.len() != params.act_dim())
        {
            return Err(TrpoError::BadBatch("observation or action width".into()));
        }
        Ok(())
    }
}

/// Generalized advantage estimates and the matching return targets
/// `advantage + value`.
pub fn compute_advantages(batch: &Batch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len();
    let mut adv = vec![0.0; n];
    let mut start = 0;
    for seg in &batch.segments {
        let end = start + seg.len;
        let mut next_value = match seg.end {
            EpisodeEnd::Terminated => 0.0,
            EpisodeEnd::Truncated { bootstrap } => bootstrap,
        };
        let mut running = 0.0;
        for i in (start..end).rev() {
            let delta = batch.rewards[i] + gamma * next_value - batch.values[i];
            running = delta + gamma * lambda * running;
            adv[i] = running;
            next_value = batch.values[i];
        }
        start = end;
    }
    let returns = adv.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
/// A constant vector becomes all zeros.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v -= mean;
        if std > 1e-12 {
            *v /= std;
        }
    }
}

/// Mean of `exp(log π_new − log π_old) · A` over the batch.
pub fn surrogate_loss(
    params: &PolicyParams,
    old: &PolicyParams,
    observations: &[Vec<f64>],
    actions: &[Vec<f64>],
    advantages: &[f64],
) -> f64 {
    let n = observations.len();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for ((obs, act), a) in observations.iter().zip(actions).zip(advantages) {
        let lp_new = params.log_prob(obs, act).unwrap_or(f64::NAN);
        let lp_old = old.log_prob(obs, act).unwrap_or(f64::NAN);
        total += (lp_new - lp_old).exp() * a;
    }
    total / n as f64
}

/// Per-sample forward traces of the mean network at fixed parameters.
struct Linearization {
    traces: Vec<Trace>,
    means: Vec<Vec<f64>>,
}

impl Linearization {
    fn new(params: &PolicyParams, observations: &[Vec<f64>]) -> Self {
        let net = params.mean_net();
        let mut traces = Vec::with_capacity(observations.len());
        let mut means = Vec::with_capacity(observations.len());
        for obs in observations {
            let mut t = Trace::default();
            net.forward(&params.mean, obs, &mut t);
            means.push(t.output().to_vec());
            traces.push(t);
        }
        Self { traces, means }
    }
}

/// Gradient of the surrogate at `params` (where the ratio is 1), laid out
/// like [`PolicyParams::policy_vector`].
fn surrogate_gradient(
    params: &PolicyParams,
    lin: &Linearization,
    actions: &[Vec<f64>],
    advantages: &[f64],
) -> Vec<f64> {
    let net = params.mean_net();
    let n = actions.len() as f64;
    let inv_var: Vec<f64> = params.log_std.iter().map(|s| (-2.0 * s).exp()).collect();
    let nm = params.mean.len();
    let mut grad = vec![0.0; params.n_policy_params()];
    let mut d_mean = vec![0.0; params.act_dim()];
    for ((trace, mean), (act, a)) in lin.traces.iter().zip(&lin.means).zip(actions.iter().zip(advantages)) {
        for k in 0..d_mean.len() {
            let z = act[k] - mean[k];
            d_mean[k] = a * z * inv_var[k] / n;
            grad[nm + k] += a * (z * z * inv_var[k] - 1.0) / n;
        }
        net.backward(&params.mean, trace, &d_mean, &mut grad[..nm]);
    }
    grad
}

/// Gradient of [`surrogate_loss`] with respect to the policy vector,
/// evaluated where the new and old parameters coincide.
pub fn policy_gradient(
    params: &PolicyParams,
    observations: &[Vec<f64>],
    actions: &[Vec<f64>],
    advantages: &[f64],
) -> Vec<f64> {
    surrogate_gradient(params, &Linearization::new(params, observations), actions, advantages)
}

/// Fisher-vector product `F v` of the Gaussian policy averaged over the
/// linearization points. For the mean block `F = mean(Jᵀ Σ⁻¹ J)`; each
/// log-std entry contributes `2`; the cross terms vanish.
fn fisher_product(params: &PolicyParams, lin: &Linearization, v: &[f64]) -> Vec<f64> {
    let net = params.mean_net();
    let nm = params.mean.len();
    let n = lin.traces.len() as f64;
    let inv_var: Vec<f64> = params.log_std.iter().map(|s| (-2.0 * s).exp()).collect();
    let mut out = vec![0.0; v.len()];
    for trace in &lin.traces {
        let mut jv = net.jvp(&params.mean, trace, &v[..nm]);
        for (j, iv) in jv.iter_mut().zip(&inv_var) {
            *j *= iv / n;
        }
        net.backward(&params.mean, trace, &jv, &mut out[..nm]);
    }
    for k in 0..params.act_dim() {
        out[nm + k] = 2.0 * v[nm + k];
    }
    out
}

/// Undamped Fisher-vector product over `observations` at `params`.
pub fn fisher_vector_product(params: &PolicyParams, observations: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    fisher_product(params, &Linearization::new(params, observations), v)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Conjugate gradients for `A x = b` with `A` given as a product.
pub fn conjugate_gradient(mut apply: impl FnMut(&[f64]) -> Vec<f64>, b: &[f64], iterations: usize) -> Vec<f64> {
    let mut x = vec![0.0; b.len()];
    let mut r = b.to_vec();
    let mut p = b.to_vec();
    let mut rr = dot(&r, &r);
    for _ in 0..iterations {
        if rr < 1e-20 {
            break;
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    x
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    /// Mean KL between the old and the accepted policy.
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
    /// Mean squared error of the value net on the return targets, after fitting.
    pub value_loss: f64,
    /// Whether the line search accepted a step.
    pub accepted: bool,
    pub line_search_steps: usize,
}

/// Something that improves a policy from a batch.
pub trait Updater {
    /// One update whose policy step may use `share` of the configured KL
    /// radius. Strategies that step the policy more than once per batch split
    /// the radius between the steps.
    fn update_share(&mut self, params: &mut PolicyParams, batch: &Batch, share: f64) -> Result<UpdateStats, TrpoError>;

    fn update(&mut self, params: &mut PolicyParams, batch: &Batch) -> Result<UpdateStats, TrpoError> {
        self.update_share(params, batch, 1.0)
    }
}

/// TRPO policy step plus Adam value regression. The Adam moments persist
/// across updates.
#[derive(Debug, Clone)]
pub struct Trpo {
    config: TrpoConfig,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: u64,
}

impl Trpo {
    pub fn new(config: TrpoConfig) -> Result<Self, TrpoError> {
        config.validate()?;
        Ok(Self {
            config,
            adam_m: Vec::new(),
            adam_v: Vec::new(),
            adam_t: 0,
        })
    }

    pub fn config(&self) -> &TrpoConfig {
        &self.config
    }

    fn policy_step(
        &self,
        params: &mut PolicyParams,
        batch: &Batch,
        advantages: &[f64],
        delta_kl: f64,
        stats: &mut UpdateStats,
    ) -> Result<(), TrpoError> {
        let old = params.clone();
        let lin = Linearization::new(&old, &batch.observations);
        let grad = surrogate_gradient(&old, &lin, &batch.actions, advantages);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrpoError::NonFiniteGradient);
        }
        if dot(&grad, &grad) == 0.0 {
            return Ok(());
        }
        let damping = self.config.cg_damping;
        let damped = |v: &[f64]| {
            let mut fv = fisher_product(&old, &lin, v);
            for (f, x) in fv.iter_mut().zip(v) {
                *f += damping * x;
            }
            fv
        };
        let dir = conjugate_gradient(damped, &grad, self.config.cg_iterations);
        let shs = dot(&dir, &damped(&dir));
        if !(shs > 0.0) || !shs.is_finite() {
            return Err(TrpoError::NonFiniteGradient);
        }
        let scale = (2.0 * delta_kl / shs).sqrt();
        let theta = old.policy_vector();
        let old_logp: Vec<f64> = lin
            .means
            .iter()
            .zip(&batch.actions)
            .map(|(m, a)| gaussian_log_prob(m, &old.log_std, a))
            .collect();
        let baseline = advantages.iter().sum::<f64>() / advantages.len() as f64;

        let net = old.mean_net();
        let mut trace = Trace::default();
        let mut candidate = old.clone();
        let mut frac = 1.0;
        for k in 0..self.config.backtrack_steps {
            let v: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + frac * scale * d).collect();
            candidate.set_policy_vector(&v);
            let mut surr = 0.0;
            let mut kl = 0.0;
            for (i, obs) in batch.observations.iter().enumerate() {
                net.forward(&candidate.mean, obs, &mut trace);
                let mean = trace.output();
                let lp = gaussian_log_prob(mean, &candidate.log_std, &batch.actions[i]);
                surr += (lp - old_logp[i]).exp() * advantages[i];
                kl += gaussian_kl(&lin.means[i], &old.log_std, mean, &candidate.log_std);
            }
            let n = batch.len() as f64;
            surr /= n;
            kl /= n;
            let improvement = surr - baseline;
            if kl.is_finite() && kl <= delta_kl && improvement > 0.0 {
                params.set_policy_vector(&v);
                stats.accepted = true;
                stats.mean_kl = kl;
                stats.surrogate_improvement = improvement;
                stats.line_search_steps = k + 1;
                return Ok(());
            }
            frac *= self.config.backtrack_coeff;
        }
        stats.line_search_steps = self.config.backtrack_steps;
        Ok(())
    }

    fn fit_value(&mut self, params: &mut PolicyParams, batch: &Batch, returns: &[f64]) -> f64 {
        let net = params.value_net();
        let np = params.value.len();
        if self.adam_m.len() != np {
            self.adam_m = vec![0.0; np];
            self.adam_v = vec![0.0; np];
            self.adam_t = 0;
        }
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let lr = self.config.value_lr;
        let mb = self.config.value_minibatch;
        let mut trace = Trace::default();
        let mut grad = vec![0.0; np];
        for _ in 0..self.config.value_epochs {
            for start in (0..batch.len()).step_by(mb) {
                let end = (start + mb).min(batch.len());
                let scale = 1.0 / (end - start) as f64;
                grad.iter_mut().for_each(|g| *g = 0.0);
                for i in start..end {
                    net.forward(&params.value, &batch.observations[i], &mut trace);
                    let err = trace.output()[0] - returns[i];
                    net.backward(&params.value, &trace, &[err * scale], &mut grad);
                }
                if grad.iter().any(|g| !g.is_finite()) {
                    continue;
                }
                self.adam_t += 1;
                let t = self.adam_t as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for k in 0..np {
                    self.adam_m[k] = b1 * self.adam_m[k] + (1.0 - b1) * grad[k];
                    self.adam_v[k] = b2 * self.adam_v[k] + (1.0 - b2) * grad[k] * grad[k];
                    let mhat = self.adam_m[k] / c1;
                    let vhat = self.adam_v[k] / c2;
                    params.value[k] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        let mut loss = 0.0;
        for (obs, r) in batch.observations.iter().zip(returns) {
            net.forward(&params.value, obs, &mut trace);
            loss += (trace.output()[0] - r).powi(2);
        }
        loss / batch.len() as f64
    }
}

impl Updater for Trpo {
    fn update_share(&mut self, params: &mut PolicyParams, batch: &Batch, share: f64) -> Result<UpdateStats, TrpoError> {
        batch.validate(params)?;
        let (mut advantages, returns) = compute_advantages(batch, self.config.gamma, self.config.lambda);
        if advantages.iter().chain(&returns).any(|v| !v.is_finite()) {
            return Err(TrpoError::NonFiniteGradient);
        }
        if self.config.normalize_advantages {
            normalize(&mut advantages);
        }
        let mut stats = UpdateStats::default();
        self.policy_step(params, batch, &advantages, share * self.config.delta_kl, &mut stats)?;
        stats.value_loss = self.fit_value(params, batch, &returns);
        Ok(stats)
    }
}
