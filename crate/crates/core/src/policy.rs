//! Diagonal Gaussian MLP policy with a separate value network.
//!
//! Both networks are stored as flat parameter vectors. Each layer contributes
//! a row-major weight matrix `out×in` followed by its bias. Hidden layers use
//! `tanh`, output layers are linear. The log standard deviation is a free
//! vector, independent of the observation.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const CHECKPOINT_MAGIC: &str = "safelayer-policy";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameter")]
    NonFinite,
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
}

/// Layer sizes of a fully connected network, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Pre-activation inputs of every layer, kept for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `inputs[l]` is the input of layer `l`; the last entry is the network output.
    inputs: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

impl Mlp {
    pub fn new(sizes: Vec<usize>) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { sizes }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (offset, n_in, n_out)
        let mut offset = 0;
        self.sizes.windows(2).map(move |w| {
            let o = offset;
            offset += w[1] * (w[0] + 1);
            (o, w[0], w[1])
        })
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn forward(&self, params: &[f64], x: &[f64], trace: &mut Trace) {
        debug_assert_eq!(params.len(), self.n_params());
        debug_assert_eq!(x.len(), self.sizes[0]);
        trace.inputs.resize(self.sizes.len(), Vec::new());
        trace.inputs[0].clear();
        trace.inputs[0].extend_from_slice(x);
        let last = self.n_layers() - 1;
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let (done, rest) = trace.inputs.split_at_mut(l + 1);
            let input = &done[l];
            let out = &mut rest[0];
            out.clear();
            let w = &params[off..off + n_in * n_out];
            let b = &params[off + n_in * n_out..off + n_out * (n_in + 1)];
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let v = b[o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if l == last { v } else { v.tanh() });
            }
        }
    }

    /// Accumulates `(∂output/∂params)ᵀ · grad_out` into `grad`.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad_out: &[f64], grad: &mut [f64]) {
        let last = self.n_layers() - 1;
        let mut delta = grad_out.to_vec();
        let layers: Vec<_> = self.layers().collect();
        for (l, &(off, n_in, n_out)) in layers.iter().enumerate().rev() {
            if l != last {
                // Output of a hidden layer is tanh(pre); d tanh = 1 − y².
                for (d, y) in delta.iter_mut().zip(&trace.inputs[l + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            let input = &trace.inputs[l];
            let w = &params[off..off + n_in * n_out];
            let (gw, gb) = grad[off..off + n_out * (n_in + 1)].split_at_mut(n_in * n_out);
            for o in 0..n_out {
                let d = delta[o];
                gb[o] += d;
                if d != 0.0 {
                    for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                        *g += d * x;
                    }
                }
            }
            if l > 0 {
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    for (n, wv) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *n += d * wv;
                    }
                }
                delta = next;
            }
        }
    }

    /// Directional derivative `(∂output/∂params) · v` at the traced input.
    pub fn jvp(&self, params: &[f64], trace: &Trace, v: &[f64]) -> Vec<f64> {
        let last = self.n_layers() - 1;
        let mut tangent = vec![0.0; self.sizes[0]];
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let input = &trace.inputs[l];
            let w = &params[off..off + n_in * n_out];
            let vw = &v[off..off + n_in * n_out];
            let vb = &v[off + n_in * n_out..off + n_out * (n_in + 1)];
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let r = o * n_in..(o + 1) * n_in;
                let mut t = vb[o];
                t += vw[r.clone()].iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                if l > 0 {
                    t += w[r].iter().zip(&tangent).map(|(a, b)| a * b).sum::<f64>();
                }
                if l != last {
                    let y = trace.inputs[l + 1][o];
                    t *= 1.0 - y * y;
                }
                next.push(t);
            }
            tangent = next;
        }
        tangent
    }

    /// Orthogonal initialization: each weight matrix has orthonormal rows or
    /// columns scaled by `gain`, biases are zero.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R, hidden_gain: f64, output_gain: f64) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params()];
        let last = self.n_layers() - 1;
        for (l, (off, n_in, n_out)) in self.layers().enumerate() {
            let gain = if l == last { output_gain } else { hidden_gain };
            let w = orthogonal(rng, n_out, n_in);
            for o in 0..n_out {
                for i in 0..n_in {
                    params[off + o * n_in + i] = gain * w[(o, i)];
                }
            }
        }
        params
    }
}

fn orthogonal<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let (r, c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    // Sign fix so the distribution is uniform over orthogonal matrices.
    let rdiag = qr.r().diagonal();
    for k in 0..c {
        if rdiag[k] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Gaussian policy and value network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    obs_dim: usize,
    act_dim: usize,
    hidden: Vec<usize>,
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: Vec<f64>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub value: f64,
}

impl PolicyParams {
    /// All-zero parameters (zero mean, unit std, zero value).
    pub fn zeros(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Self {
        let mut p = Self {
            obs_dim,
            act_dim,
            hidden: hidden.to_vec(),
            mean: Vec::new(),
            log_std: vec![0.0; act_dim],
            value: Vec::new(),
        };
        p.mean = vec![0.0; p.mean_net().n_params()];
        p.value = vec![0.0; p.value_net().n_params()];
        p
    }

    /// Orthogonal init with gain √2 in hidden layers, 0.01 on the mean output
    /// and 1 on the value output.
    pub fn init<R: Rng + ?Sized>(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(obs_dim, act_dim, hidden);
        p.mean = p.mean_net().init(rng, 2f64.sqrt(), 0.01);
        p.value = p.value_net().init(rng, 2f64.sqrt(), 1.0);
        p.log_std = vec![log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); act_dim];
        p
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn mean_net(&self) -> Mlp {
        let mut sizes = vec![self.obs_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.act_dim);
        Mlp::new(sizes)
    }

    pub fn value_net(&self) -> Mlp {
        let mut sizes = vec![self.obs_dim];
        sizes.extend(&self.hidden);
        sizes.push(1);
        Mlp::new(sizes)
    }

    /// Number of parameters the policy gradient acts on (mean net, then log-std).
    pub fn n_policy_params(&self) -> usize {
        self.mean.len() + self.log_std.len()
    }

    pub fn policy_vector(&self) -> Vec<f64> {
        let mut v = self.mean.clone();
        v.extend(&self.log_std);
        v
    }

    /// Writes back a vector laid out like [`Self::policy_vector`]; log-std is clamped.
    pub fn set_policy_vector(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.n_policy_params());
        let (m, s) = v.split_at(self.mean.len());
        self.mean.copy_from_slice(m);
        for (d, &x) in self.log_std.iter_mut().zip(s) {
            *d = x.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.log_std)
            .chain(&self.value)
            .all(|v| v.is_finite())
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), PolicyError> {
        if obs.len() != self.obs_dim {
            return Err(PolicyError::ShapeMismatch(format!(
                "observation has {} entries, expected {}",
                obs.len(),
                self.obs_dim
            )));
        }
        Ok(())
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }

    pub fn action_mean(&self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        self.check_obs(obs)?;
        let mut t = Trace::default();
        self.mean_net().forward(&self.mean, obs, &mut t);
        Ok(t.output().to_vec())
    }

    pub fn state_value(&self, obs: &[f64]) -> Result<f64, PolicyError> {
        self.check_obs(obs)?;
        let mut t = Trace::default();
        self.value_net().forward(&self.value, obs, &mut t);
        Ok(t.output()[0])
    }

    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput, PolicyError> {
        Ok(PolicyOutput {
            mean: self.action_mean(obs)?,
            std: self.std(),
            value: self.state_value(obs)?,
        })
    }

    /// Draws `a ~ N(mean, diag(std²))` and returns it with its log density.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        rng: &mut R,
    ) -> Result<(Vec<f64>, f64), PolicyError> {
        let mean = self.action_mean(obs)?;
        let action: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = gaussian_log_prob(&mean, &self.log_std, &action);
        Ok((action, lp))
    }

    pub fn log_prob(&self, obs: &[f64], action: &[f64]) -> Result<f64, PolicyError> {
        if action.len() != self.act_dim {
            return Err(PolicyError::ShapeMismatch(format!(
                "action has {} entries, expected {}",
                action.len(),
                self.act_dim
            )));
        }
        let mean = self.action_mean(obs)?;
        Ok(gaussian_log_prob(&mean, &self.log_std, action))
    }

    /// Mean over `observations` of `KL(self ‖ other)`.
    pub fn kl(&self, other: &PolicyParams, observations: &[Vec<f64>]) -> Result<f64, PolicyError> {
        if observations.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for obs in observations {
            let m0 = self.action_mean(obs)?;
            let m1 = other.action_mean(obs)?;
            total += gaussian_kl(&m0, &self.log_std, &m1, &other.log_std);
        }
        Ok(total / observations.len() as f64)
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.obs_dim == other.obs_dim
            && self.act_dim == other.act_dim
            && self.hidden == other.hidden
            && self.mean.len() == other.mean.len()
            && self.value.len() == other.value.len()
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
        let _ = writeln!(out, "obs_dim {}", self.obs_dim);
        let _ = writeln!(out, "act_dim {}", self.act_dim);
        let hidden: Vec<String> = self.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(out, "hidden {}", hidden.join(" "));
        for (name, values) in [("mean", &self.mean), ("log_std", &self.log_std), ("value", &self.value)] {
            let _ = write!(out, "{name} {}", values.len());
            for v in values.iter() {
                let _ = write!(out, " {v:?}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PolicyError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut next = |expect: &str| -> Result<(usize, Vec<&str>), PolicyError> {
            let (i, line) = lines.next().ok_or(PolicyError::Checkpoint {
                line: 0,
                message: format!("missing `{expect}` line"),
            })?;
            let mut words = line.split_whitespace();
            let key = words.next().unwrap_or("");
            if key != expect {
                return Err(PolicyError::Checkpoint {
                    line: i + 1,
                    message: format!("expected `{expect}`, found `{key}`"),
                });
            }
            Ok((i + 1, words.collect()))
        };
        let bad = |line: usize, message: String| PolicyError::Checkpoint { line, message };
        let parse_usize = |line: usize, w: &str| {
            w.parse::<usize>()
                .map_err(|e| bad(line, format!("bad integer `{w}`: {e}")))
        };

        let (l, header) = next(CHECKPOINT_MAGIC)?;
        match header.as_slice() {
            [v] if parse_usize(l, v)? == CHECKPOINT_VERSION as usize => {}
            _ => return Err(bad(l, format!("unsupported version {:?}", header))),
        }
        let single = |(l, w): (usize, Vec<&str>)| -> Result<usize, PolicyError> {
            match w.as_slice() {
                [v] => parse_usize(l, v),
                _ => Err(bad(l, "expected one integer".into())),
            }
        };
        let obs_dim = single(next("obs_dim")?)?;
        let act_dim = single(next("act_dim")?)?;
        let (l, hw) = next("hidden")?;
        let hidden = hw
            .iter()
            .map(|w| parse_usize(l, w))
            .collect::<Result<Vec<_>, _>>()?;
        const MAX_WIDTH: usize = 1 << 16;
        if obs_dim == 0 || act_dim == 0 || obs_dim > MAX_WIDTH || act_dim > MAX_WIDTH {
            return Err(bad(l, "dimensions out of range".into()));
        }
        if hidden.len() > 16 || hidden.iter().any(|&h| h == 0 || h > MAX_WIDTH) {
            return Err(bad(l, "hidden sizes out of range".into()));
        }

        let mut template = Self {
            obs_dim,
            act_dim,
            hidden,
            mean: Vec::new(),
            log_std: Vec::new(),
            value: Vec::new(),
        };
        let expected = [
            template.mean_net().n_params(),
            act_dim,
            template.value_net().n_params(),
        ];
        let mut arrays = Vec::with_capacity(3);
        for (name, n) in ["mean", "log_std", "value"].into_iter().zip(expected) {
            let (l, words) = next(name)?;
            let (count, values) = words
                .split_first()
                .ok_or_else(|| bad(l, "missing length".into()))?;
            let count = parse_usize(l, count)?;
            if count != n || values.len() != n {
                return Err(bad(
                    l,
                    format!("`{name}` needs {n} values, header says {count}, found {}", values.len()),
                ));
            }
            let parsed = values
                .iter()
                .map(|w| {
                    w.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| bad(l, format!("bad value `{w}`")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            arrays.push(parsed);
        }
        if let Some((i, _)) = lines.next() {
            return Err(bad(i + 1, "trailing content".into()));
        }
        template.value = arrays.pop().unwrap_or_default();
        template.log_std = arrays.pop().unwrap_or_default();
        template.mean = arrays.pop().unwrap_or_default();
        if template
            .log_std
            .iter()
            .any(|v| !(LOG_STD_MIN..=LOG_STD_MAX).contains(v))
        {
            return Err(bad(0, "log_std outside [-20, 2]".into()));
        }
        Ok(template)
    }

    /// Copies the weights of `other` into `self` if the shapes agree.
    pub fn assign(&mut self, other: &Self) -> Result<(), PolicyError> {
        if !self.same_shape(other) {
            return Err(PolicyError::ShapeMismatch("policy shapes differ".into()));
        }
        self.clone_from(other);
        Ok(())
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// `KL(N(m0, e^{2 s0}) ‖ N(m1, e^{2 s1}))` for diagonal Gaussians.
pub fn gaussian_kl(m0: &[f64], s0: &[f64], m1: &[f64], s1: &[f64]) -> f64 {
    m0.iter()
        .zip(s0)
        .zip(m1.iter().zip(s1))
        .map(|((a0, l0), (a1, l1))| {
            let v0 = (2.0 * l0).exp();
            let v1 = (2.0 * l1).exp();
            l1 - l0 + (v0 + (a0 - a1).powi(2)) / (2.0 * v1) - 0.5
        })
        .sum()
}
