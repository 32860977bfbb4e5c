//! Clipped-surrogate actor-critic learner with a diagonal Gaussian policy.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::nn::{Activations, LayerWeights, Mlp};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub n_steps: usize,
    pub n_epochs: usize,
    pub n_minibatches: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub ent_coef: f64,
    pub clip_range: f64,
    pub init_log_std: f64,
    pub normalize_advantage: bool,
    /// Control steps per learning episode.
    pub horizon: usize,
    /// Torque (N·m) per unit of policy action, before saturation.
    pub action_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: vec![128, 128],
            n_steps: 2048,
            n_epochs: 10,
            n_minibatches: 128,
            learning_rate: 1e-4,
            gamma: 0.99,
            gae_lambda: 0.95,
            vf_coef: 1.0,
            max_grad_norm: 10.0,
            ent_coef: 0.0,
            clip_range: 0.2,
            init_log_std: 0.0,
            normalize_advantage: true,
            horizon: 500,
            action_scale: 100.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_steps", self.n_steps as f64),
            ("n_epochs", self.n_epochs as f64),
            ("n_minibatches", self.n_minibatches as f64),
            ("learning_rate", self.learning_rate),
            ("max_grad_norm", self.max_grad_norm),
            ("clip_range", self.clip_range),
            ("horizon", self.horizon as f64),
            ("action_scale", self.action_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::InvalidParameter("gamma and gae_lambda must lie in [0, 1]".into()));
        }
        if self.vf_coef < 0.0 || self.ent_coef < 0.0 {
            return Err(Error::InvalidParameter("loss coefficients must be non-negative".into()));
        }
        if self.n_minibatches > self.n_steps {
            return Err(Error::InvalidParameter("more minibatches than steps per update".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidParameter("hidden layers must be non-empty".into()));
        }
        Ok(())
    }
}

/// Separate policy-mean and value networks plus a state-independent log
/// standard deviation, all stored in one flat parameter vector laid out as
/// `[policy | value | log_std]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub theta: Vec<f64>,
    policy: Mlp,
    value: Mlp,
    log_std_at: usize,
    act_dim: usize,
}

/// Forward results kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    policy: Activations,
    value: Activations,
}

impl ActorCritic {
    pub fn new<R: Rng>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![obs_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let policy = Mlp::new(sizes(act_dim), 0);
        let value = Mlp::new(sizes(1), policy.param_count());
        let log_std_at = value.offset() + value.param_count();
        let mut theta = vec![0.0; log_std_at + act_dim];
        policy.init(&mut theta, 0.01, rng);
        value.init(&mut theta, 1.0, rng);
        theta[log_std_at..].iter_mut().for_each(|v| *v = init_log_std);
        ActorCritic {
            theta,
            policy,
            value,
            log_std_at,
            act_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Index range of the value network inside `theta`.
    pub fn value_block(&self) -> std::ops::Range<usize> {
        self.value.offset()..self.value.offset() + self.value.param_count()
    }

    pub fn policy_block(&self) -> std::ops::Range<usize> {
        0..self.policy.param_count()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.theta[self.log_std_at..]
    }

    pub fn mean(&self, obs: &[f64], ws: &mut Workspace) -> Vec<f64> {
        self.policy.forward(&self.theta, obs, &mut ws.policy);
        ws.policy.output().to_vec()
    }

    pub fn value(&self, obs: &[f64], ws: &mut Workspace) -> f64 {
        self.value.forward(&self.theta, obs, &mut ws.value);
        ws.value.output()[0]
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(self.log_std())
            .map(|((m, a), ls)| {
                let z = (a - m) / ls.exp();
                -0.5 * z * z - ls - 0.5 * LN_2PI
            })
            .sum()
    }

    pub fn entropy(&self) -> f64 {
        self.log_std().iter().map(|ls| 0.5 + 0.5 * LN_2PI + ls).sum()
    }

    /// Draws an action; returns `(action, log_prob, value)`.
    pub fn act<R: Rng>(&self, obs: &[f64], ws: &mut Workspace, rng: &mut R) -> (Vec<f64>, f64, f64) {
        let mean = self.mean(obs, ws);
        let action: Vec<f64> = mean
            .iter()
            .zip(self.log_std())
            .map(|(m, ls)| {
                let z: f64 = rng.sample(StandardNormal);
                m + ls.exp() * z
            })
            .collect();
        let logp = self.log_prob(&mean, &action);
        let value = self.value(obs, ws);
        (action, logp, value)
    }

    pub fn snapshot(&self) -> PolicySnapshot {
        PolicySnapshot {
            policy_layers: self.policy.export(&self.theta),
            value_layers: self.value.export(&self.theta),
            log_std: self.log_std().to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub policy_layers: Vec<LayerWeights>,
    pub value_layers: Vec<LayerWeights>,
    pub log_std: Vec<f64>,
}

/// One stored transition with its advantage and value target.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub value_target: f64,
}

/// Per-step inputs to advantage estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepValues {
    pub reward: f64,
    pub value: f64,
    /// Value of the successor state; ignored for terminal steps.
    pub next_value: f64,
    /// The successor is absorbing: no bootstrapping.
    pub terminal: bool,
    /// Last step of an episode segment (terminal, truncated, or end of batch).
    pub segment_end: bool,
}

/// Generalized advantage estimates; returns `(advantages, value targets)`.
pub fn gae(steps: &[StepValues], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let mut adv = vec![0.0; steps.len()];
    let mut running = 0.0;
    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        if s.segment_end {
            running = 0.0;
        }
        let bootstrap = if s.terminal { 0.0 } else { gamma * s.next_value };
        let delta = s.reward + bootstrap - s.value;
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let targets = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    (adv, targets)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Coefficients of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub clip_range: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub normalize_advantage: bool,
}

impl From<&PolicyConfig> for LossCoefficients {
    fn from(c: &PolicyConfig) -> Self {
        LossCoefficients {
            clip_range: c.clip_range,
            vf_coef: c.vf_coef,
            ent_coef: c.ent_coef,
            normalize_advantage: c.normalize_advantage,
        }
    }
}

fn normalized_advantages(batch: &[&Sample], normalize: bool) -> Vec<f64> {
    let raw: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
    if !normalize || raw.len() < 2 {
        return raw;
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let var = raw.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    raw.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
}

/// Clipped surrogate + value MSE - entropy bonus over `batch`; writes the
/// gradient with respect to `theta` into `grad` (overwritten).
pub fn loss_and_grad(
    ac: &ActorCritic,
    batch: &[&Sample],
    coef: &LossCoefficients,
    ws: &mut Workspace,
    grad: &mut [f64],
) -> LossParts {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let n = batch.len() as f64;
    let adv = normalized_advantages(batch, coef.normalize_advantage);
    let log_std: Vec<f64> = ac.log_std().to_vec();
    let std: Vec<f64> = log_std.iter().map(|l| l.exp()).collect();
    let mut parts = LossParts::default();
    let mut d_mean = vec![0.0; ac.act_dim];

    for (s, a_hat) in batch.iter().zip(&adv) {
        let mean = ac.mean(&s.obs, ws);
        let logp = ac.log_prob(&mean, &s.action);
        let ratio = (logp - s.old_log_prob).exp();
        let unclipped = ratio * a_hat;
        let clipped = ratio.clamp(1.0 - coef.clip_range, 1.0 + coef.clip_range) * a_hat;
        parts.policy -= unclipped.min(clipped) / n;
        // Only the unclipped branch depends on theta.
        let d_logp = if unclipped <= clipped { -a_hat * ratio / n } else { 0.0 };

        if d_logp != 0.0 {
            for d in 0..ac.act_dim {
                let z = (s.action[d] - mean[d]) / std[d];
                d_mean[d] = d_logp * z / std[d];
                grad[ac.log_std_at + d] += d_logp * (z * z - 1.0);
            }
            ac.policy.backward(&ac.theta, &mut ws.policy, &d_mean, grad);
        }

        let v = ac.value(&s.obs, ws);
        let err = v - s.value_target;
        parts.value += err * err / n;
        if coef.vf_coef != 0.0 {
            let d_v = coef.vf_coef * 2.0 * err / n;
            ac.value.backward(&ac.theta, &mut ws.value, &[d_v], grad);
        }
    }
    parts.entropy = ac.entropy();
    // d(-ent_coef * entropy)/d log_std = -ent_coef
    for d in 0..ac.act_dim {
        grad[ac.log_std_at + d] -= coef.ent_coef;
    }
    parts.total = parts.policy + coef.vf_coef * parts.value - coef.ent_coef * parts.entropy;
    parts
}

/// Largest relative disagreement between the analytic gradient and central
/// finite differences of the total loss. Components are compared as
/// `|a - n| / max(|a|, |n|, floor)` so that exactly-zero entries do not divide
/// by zero.
pub fn policy_gradient_check(ac: &ActorCritic, batch: &[Sample], coef: &LossCoefficients, step: f64) -> f64 {
    const FLOOR: f64 = 1e-7;
    let refs: Vec<&Sample> = batch.iter().collect();
    let mut ws = Workspace::default();
    let mut analytic = vec![0.0; ac.param_count()];
    loss_and_grad(ac, &refs, coef, &mut ws, &mut analytic);
    let mut scratch = vec![0.0; ac.param_count()];
    let mut probe = ac.clone();
    let mut worst: f64 = 0.0;
    for i in 0..ac.param_count() {
        let base = probe.theta[i];
        probe.theta[i] = base + step;
        let plus = loss_and_grad(&probe, &refs, coef, &mut ws, &mut scratch).total;
        probe.theta[i] = base - step;
        let minus = loss_and_grad(&probe, &refs, coef, &mut ws, &mut scratch).total;
        probe.theta[i] = base;
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
