//! Supervised policy learning on the (possibly mismatched) pendulum.
//!
//! The learner acts until the first state the safe-region hypothesis rejects;
//! from then on the corrective controller runs the recovery and the episode is
//! reset. Without a model the learner runs free and an episode ends when the
//! first link reaches the ground.

pub mod nn;
pub mod ppo;

use std::collections::VecDeque;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corrective::{corrective_step, run_recovery, FeedbackGain, RecoveryOptions, RecoveryOutcome};
use crate::dynamics::{
    forward_kinematics, saturate, ControlInput, Integrator, PendulumParams, SimConfig, SystemState,
};
use crate::error::{Error, Result};
use crate::region::SafeRegionModel;
use crate::rng::{task_rng, DOMAIN_POLICY_ENV, DOMAIN_POLICY_INIT, DOMAIN_POLICY_SHUFFLE};
use crate::safety::StateRanges;

pub use ppo::{
    gae, loss_and_grad, policy_gradient_check, ActorCritic, LossCoefficients, PolicyConfig, PolicySnapshot,
    Sample, StepValues,
};

pub const TARGET_CENTER: (f64, f64) = (0.0, 2.7);
pub const TARGET_RADIUS: f64 = 0.3;
/// rad/s around the target centre.
pub const TARGET_RATE: f64 = PI;
pub const SAFE_REWARD: f64 = 2.0;
pub const DISTANCE_WEIGHT: f64 = 10.0;
/// State (6) plus target phase as `(sin, cos)`.
pub const OBS_DIM: usize = 8;

/// Point on the target circle at time `t`, starting from the top of the circle.
pub fn target_position(t: f64) -> (f64, f64) {
    let phase = TARGET_RATE * t;
    (
        TARGET_CENTER.0 + TARGET_RADIUS * libm::sin(phase),
        TARGET_CENTER.1 + TARGET_RADIUS * libm::cos(phase),
    )
}

pub fn reward(state: &SystemState, t: f64, params: &PendulumParams) -> f64 {
    let (ex, ey) = forward_kinematics(state, params);
    let (dx, dy) = target_position(t);
    SAFE_REWARD - DISTANCE_WEIGHT * ((ex - dx).powi(2) + (ey - dy).powi(2)).sqrt()
}

pub fn observe(state: &SystemState, t: f64) -> [f64; OBS_DIM] {
    let phase = TARGET_RATE * t;
    let s = state.0;
    [s[0], s[1], s[2], s[3], s[4], s[5], libm::sin(phase), libm::cos(phase)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    Policy,
    Corrective,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationCause {
    Horizon,
    PredictedUnsafe,
    ConstraintViolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryResult {
    NotTriggered,
    Success,
    /// The first link reached the ground during recovery.
    FailureViolation,
    /// No ground contact, but the state did not converge within the horizon.
    FailureNoConvergence,
}

impl RecoveryResult {
    fn from_outcome(out: &RecoveryOutcome) -> Self {
        if out.success {
            RecoveryResult::Success
        } else if out.violation {
            RecoveryResult::FailureViolation
        } else {
            RecoveryResult::FailureNoConvergence
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, RecoveryResult::FailureViolation | RecoveryResult::FailureNoConvergence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub reward: f64,
    /// Policy steps taken.
    pub steps: usize,
    pub cause: TerminationCause,
    pub recovery: RecoveryResult,
}

/// One supervisor decision: the prediction it was based on (`None` when no
/// prediction was made) and the controller that acted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub prediction: Option<u8>,
    pub controller: Controller,
}

/// Log of every control decision of one episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub decisions: Vec<Decision>,
    /// Control periods spent in recovery after the switch.
    pub recovery_steps: usize,
}

impl EpisodeTrace {
    /// Index of the switch to the corrective controller.
    pub fn switch_index(&self) -> Option<usize> {
        self.decisions.iter().position(|d| d.controller == Controller::Corrective)
    }

    /// No policy action at a predicted-unsafe state or after the switch.
    pub fn supervisor_invariant_holds(&self) -> bool {
        let switch = self.switch_index();
        self.decisions.iter().enumerate().all(|(i, d)| match d.controller {
            Controller::Policy => d.prediction != Some(0) && switch.is_none_or(|s| i < s),
            Controller::Corrective => true,
        })
    }
}

/// One-way switch from the learner to the corrective controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Supervisor {
    switched_at: Option<usize>,
}

impl Supervisor {
    pub fn switched_at(&self) -> Option<usize> {
        self.switched_at
    }

    /// Once the switch has happened the prediction is ignored.
    pub fn decide(&mut self, step: usize, predicted_safe: bool) -> Controller {
        if self.switched_at.is_some() {
            return Controller::Corrective;
        }
        if predicted_safe {
            Controller::Policy
        } else {
            self.switched_at = Some(step);
            Controller::Corrective
        }
    }
}

/// Hypothesis used by the supervisor. States past the ground constraint are
/// always rejected, whatever the model says.
pub fn supervisor_prediction(model: &SafeRegionModel, state: &SystemState) -> u8 {
    if state.hits_ground() {
        0
    } else {
        model.predict(state)
    }
}

/// One control period under the supervisor. `policy_action` is used only when
/// the supervisor hands control to the learner.
#[allow(clippy::too_many_arguments)]
pub fn supervised_step(
    supervisor: &mut Supervisor,
    state: &SystemState,
    step: usize,
    policy_action: &ControlInput,
    model: &SafeRegionModel,
    gain: &FeedbackGain,
    params_real: &PendulumParams,
    integrator: &Integrator,
) -> Result<(SystemState, Decision)> {
    let decision = if supervisor.switched_at().is_some() {
        Decision {
            prediction: None,
            controller: supervisor.decide(step, true),
        }
    } else {
        let prediction = supervisor_prediction(model, state);
        Decision {
            prediction: Some(prediction),
            controller: supervisor.decide(step, prediction == 1),
        }
    };
    let next = match decision.controller {
        Controller::Policy => integrator.step(state, &saturate(policy_action, params_real))?,
        Controller::Corrective => corrective_step(state, gain, params_real, integrator)?,
    };
    Ok((next, decision))
}

/// Everything the learning environment needs besides the policy.
#[derive(Debug, Clone)]
pub struct TrainSetup<'a> {
    pub policy: &'a PolicyConfig,
    pub model: Option<&'a SafeRegionModel>,
    pub params_real: PendulumParams,
    pub sim: SimConfig,
    pub gain: FeedbackGain,
    pub recovery: RecoveryOptions,
    pub ranges: StateRanges,
}

/// Result of one policy step.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    /// No bootstrapping past this step.
    pub terminal: bool,
    pub ended: Option<EpisodeRecord>,
}

/// Episode lifecycle on the real plant, with or without supervision.
pub struct LearningEnv<'a> {
    setup: &'a TrainSetup<'a>,
    integrator: Integrator,
    state: SystemState,
    step: usize,
    supervisor: Supervisor,
    episode_reward: f64,
    trace: EpisodeTrace,
    finished_traces: Vec<EpisodeTrace>,
    visited: Vec<SystemState>,
}

impl<'a> LearningEnv<'a> {
    pub fn new(setup: &'a TrainSetup<'a>) -> Result<Self> {
        Ok(LearningEnv {
            setup,
            integrator: Integrator::new(&setup.params_real, &setup.sim)?,
            state: SystemState::UPRIGHT,
            step: 0,
            supervisor: Supervisor::default(),
            episode_reward: 0.0,
            trace: EpisodeTrace::default(),
            finished_traces: Vec::new(),
            visited: Vec::new(),
        })
    }

    pub fn state(&self) -> SystemState {
        self.state
    }

    fn time(&self) -> f64 {
        self.step as f64 * self.setup.sim.dt_control
    }

    pub fn observation(&self) -> [f64; OBS_DIM] {
        observe(&self.state, self.time())
    }

    /// Starts a new episode at the upright state. Returns the finished record if
    /// the supervisor rejects the initial state outright.
    pub fn reset(&mut self) -> Option<EpisodeRecord> {
        self.state = SystemState::UPRIGHT;
        self.step = 0;
        self.supervisor = Supervisor::default();
        self.episode_reward = 0.0;
        self.trace = EpisodeTrace::default();
        self.supervise()
    }

    /// Decides at the current state; runs the recovery if control switches.
    fn supervise(&mut self) -> Option<EpisodeRecord> {
        self.visited.push(self.state);
        let model = self.setup.model?;
        let prediction = supervisor_prediction(model, &self.state);
        let controller = self.supervisor.decide(self.step, prediction == 1);
        self.trace.decisions.push(Decision {
            prediction: Some(prediction),
            controller,
        });
        if controller == Controller::Policy {
            return None;
        }
        let out = run_recovery(
            &self.state,
            &self.setup.gain,
            &self.setup.params_real,
            &self.integrator,
            &self.setup.sim,
            &self.setup.recovery,
            &self.setup.ranges,
            false,
        );
        self.trace.recovery_steps = out.control_steps;
        Some(self.finish(TerminationCause::PredictedUnsafe, RecoveryResult::from_outcome(&out)))
    }

    fn finish(&mut self, cause: TerminationCause, recovery: RecoveryResult) -> EpisodeRecord {
        self.finished_traces.push(std::mem::take(&mut self.trace));
        EpisodeRecord {
            reward: self.episode_reward,
            steps: self.step,
            cause,
            recovery,
        }
    }

    /// Applies the learner's action (in policy units) for one control period.
    pub fn step(&mut self, action: &[f64]) -> Result<Transition> {
        let scale = self.setup.policy.action_scale;
        let input = saturate(
            &ControlInput(std::array::from_fn(|i| scale * action[i])),
            &self.setup.params_real,
        );
        if self.setup.model.is_none() {
            self.trace.decisions.push(Decision {
                prediction: None,
                controller: Controller::Policy,
            });
        }
        let next = self
            .integrator
            .step(&self.state, &input)
            .map_err(|e| Error::TrainingFailure(format!("simulation fault at {:?}: {e}", self.state.0)))?;
        self.state = next;
        self.step += 1;
        let r = reward(&next, self.time(), &self.setup.params_real);
        self.episode_reward += r;
        let next_obs = self.observation();

        let ended = if self.setup.model.is_none() {
            self.visited.push(next);
            if next.hits_ground() {
                Some(self.finish(TerminationCause::ConstraintViolated, RecoveryResult::NotTriggered))
            } else {
                None
            }
        } else {
            self.supervise()
        };
        let terminal = ended.is_some();
        let ended = ended.or_else(|| {
            (self.step >= self.setup.policy.horizon)
                .then(|| self.finish(TerminationCause::Horizon, RecoveryResult::NotTriggered))
        });
        Ok(Transition {
            reward: r,
            next_obs,
            terminal,
            ended,
        })
    }

    pub fn take_traces(&mut self) -> Vec<EpisodeTrace> {
        std::mem::take(&mut self.finished_traces)
    }

    /// Finished traces followed by the trace of the episode still running, if
    /// it logged anything.
    pub fn take_all_traces(&mut self) -> Vec<EpisodeTrace> {
        let mut traces = self.take_traces();
        if !self.trace.decisions.is_empty() {
            traces.push(std::mem::take(&mut self.trace));
        }
        traces
    }

    pub fn take_visited(&mut self) -> Vec<SystemState> {
        std::mem::take(&mut self.visited)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub update: usize,
    pub env_steps: usize,
    /// Mean reward of the last (up to) 100 finished episodes.
    pub mean_reward: f64,
    pub episodes: usize,
    pub activations: usize,
    pub failures: usize,
    pub violations: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningMetrics {
    pub updates: Vec<UpdateRow>,
    pub episodes: usize,
    pub activations: usize,
    pub failures: usize,
    pub failures_violation: usize,
    pub failures_no_convergence: usize,
    /// Ground contacts while learning without a supervisor.
    pub violations: usize,
}

impl LearningMetrics {
    fn record(&mut self, ep: &EpisodeRecord) {
        self.episodes += 1;
        if ep.cause == TerminationCause::PredictedUnsafe {
            self.activations += 1;
        }
        if ep.cause == TerminationCause::ConstraintViolated {
            self.violations += 1;
        }
        match ep.recovery {
            RecoveryResult::FailureViolation => {
                self.failures += 1;
                self.failures_violation += 1;
            }
            RecoveryResult::FailureNoConvergence => {
                self.failures += 1;
                self.failures_no_convergence += 1;
            }
            _ => {}
        }
    }

    /// Share of corrective activations that recovered; `None` without activations.
    pub fn recovery_success_rate(&self) -> Option<f64> {
        (self.activations > 0).then(|| (self.activations - self.failures) as f64 / self.activations as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: LearningMetrics,
    pub policy: ActorCritic,
    pub episodes: Vec<EpisodeRecord>,
    /// One per episode; the last one may belong to the episode cut off by the
    /// end of training.
    pub traces: Vec<EpisodeTrace>,
    /// States at which the learner was in control (including switch states).
    pub visited: Vec<SystemState>,
    /// The model predicts the reset state unsafe: the only episode is a
    /// corrective activation at step 0 and the learner never acts.
    pub start_rejected: bool,
}

/// Clipped-surrogate training for `total_steps` learner steps (rounded up to
/// whole updates).
pub fn train(setup: &TrainSetup, total_steps: usize, seed: u64) -> Result<TrainOutcome> {
    let cfg = setup.policy;
    cfg.validate()?;
    setup.params_real.validate()?;
    if let Some(model) = setup.model {
        model.validate()?;
    }
    let coef = LossCoefficients::from(cfg);
    let mut ac = ActorCritic::new(
        OBS_DIM,
        3,
        &cfg.hidden,
        cfg.init_log_std,
        &mut task_rng(seed, DOMAIN_POLICY_INIT, 0),
    );
    let mut adam = nn::Adam::new(ac.param_count(), cfg.learning_rate);
    let mut env_rng = task_rng(seed, DOMAIN_POLICY_ENV, 0);
    let mut shuffle_rng = task_rng(seed, DOMAIN_POLICY_SHUFFLE, 0);
    let mut ws = ppo::Workspace::default();
    let mut grad = vec![0.0; ac.param_count()];

    let mut env = LearningEnv::new(setup)?;
    let mut metrics = LearningMetrics::default();
    let mut episodes = Vec::new();
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(100);
    let push_episode = |ep: EpisodeRecord,
                            metrics: &mut LearningMetrics,
                            episodes: &mut Vec<EpisodeRecord>,
                            recent: &mut VecDeque<f64>| {
        metrics.record(&ep);
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(ep.reward);
        episodes.push(ep);
    };
    // The reset state is fixed, so a model that rejects it once rejects it on
    // every episode and no learner step can ever be taken.
    let rejected = |ep: Option<EpisodeRecord>,
                    metrics: &mut LearningMetrics,
                    episodes: &mut Vec<EpisodeRecord>,
                    recent: &mut VecDeque<f64>| match ep {
        None => false,
        Some(ep) => {
            push_episode(ep, metrics, episodes, recent);
            true
        }
    };
    if rejected(env.reset(), &mut metrics, &mut episodes, &mut recent) {
        return Ok(TrainOutcome {
            metrics,
            policy: ac,
            episodes,
            traces: env.take_traces(),
            visited: env.take_visited(),
            start_rejected: true,
        });
    }

    let n_updates = total_steps.div_ceil(cfg.n_steps);
    let mut env_steps = 0;
    for update in 0..n_updates {
        let mut samples: Vec<Sample> = Vec::with_capacity(cfg.n_steps);
        let mut steps: Vec<StepValues> = Vec::with_capacity(cfg.n_steps);
        for _ in 0..cfg.n_steps {
            let obs = env.observation();
            let (action, logp, value) = ac.act(&obs, &mut ws, &mut env_rng);
            let tr = env.step(&action)?;
            env_steps += 1;
            samples.push(Sample {
                obs: obs.to_vec(),
                action,
                old_log_prob: logp,
                advantage: 0.0,
                value_target: 0.0,
            });
            let mut sv = StepValues {
                reward: tr.reward,
                value,
                next_value: 0.0,
                terminal: tr.terminal,
                segment_end: tr.ended.is_some(),
            };
            if let Some(ep) = tr.ended {
                if !tr.terminal {
                    sv.next_value = ac.value(&tr.next_obs, &mut ws);
                }
                push_episode(ep, &mut metrics, &mut episodes, &mut recent);
                if rejected(env.reset(), &mut metrics, &mut episodes, &mut recent) {
                    return Err(Error::TrainingFailure("the supervisor rejected a reset it had accepted".into()));
                }
            }
            steps.push(sv);
        }
        for t in 0..steps.len() {
            if !steps[t].segment_end {
                steps[t].next_value = if t + 1 < steps.len() {
                    steps[t + 1].value
                } else {
                    steps[t].segment_end = true;
                    ac.value(&env.observation(), &mut ws)
                };
            }
        }
        let (adv, targets) = gae(&steps, cfg.gamma, cfg.gae_lambda);
        for ((s, a), v) in samples.iter_mut().zip(adv).zip(targets) {
            s.advantage = a;
            s.value_target = v;
        }

        let mb_size = (cfg.n_steps / cfg.n_minibatches).max(1);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut last = ppo::LossParts::default();
        for _ in 0..cfg.n_epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(mb_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                last = loss_and_grad(&ac, &batch, &coef, &mut ws, &mut grad);
                if !last.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::TrainingFailure(format!(
                        "non-finite loss at update {update}: policy {} value {} entropy {} (log std {:?})",
                        last.policy,
                        last.value,
                        last.entropy,
                        ac.log_std()
                    )));
                }
                nn::clip_grad_norm(&mut grad, cfg.max_grad_norm);
                adam.step(&mut ac.theta, &grad);
            }
        }
        let mean_reward = if recent.is_empty() {
            f64::NAN
        } else {
            recent.iter().sum::<f64>() / recent.len() as f64
        };
        metrics.updates.push(UpdateRow {
            update,
            env_steps,
            mean_reward,
            episodes: metrics.episodes,
            activations: metrics.activations,
            failures: metrics.failures,
            violations: metrics.violations,
            policy_loss: last.policy,
            value_loss: last.value,
        });
    }

    Ok(TrainOutcome {
        metrics,
        policy: ac,
        episodes,
        traces: env.take_all_traces(),
        visited: env.take_visited(),
        start_rejected: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrective::{synthesize_gain, LqrWeights};
    use crate::embedding::{Embedding, TsneConfig};

    #[test]
    fn target_circle() {
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12;
        assert!(close(target_position(0.0), (0.0, 3.0)));
        assert!(close(target_position(1.0), (0.0, 2.4)));
        assert!(close(target_position(2.0), (0.0, 3.0)));
        assert!(close(target_position(0.5), (0.3, 2.7)));
    }

    #[test]
    fn reward_values() {
        let p = PendulumParams::nominal();
        assert!((reward(&SystemState::UPRIGHT, 0.0, &p) - 2.0).abs() < 1e-12);
        // Tip at (0, 3), target at (0, 2.4).
        assert!((reward(&SystemState::UPRIGHT, 1.0, &p) + 4.0).abs() < 1e-12);
        // Target at (0.3, 2.7): distance 0.3 * sqrt(2).
        let expected = 2.0 - 10.0 * 0.3 * 2f64.sqrt();
        assert!((reward(&SystemState::UPRIGHT, 0.5, &p) - expected).abs() < 1e-12);
    }

    #[test]
    fn supervisor_switch_is_one_way() {
        let mut s = Supervisor::default();
        assert_eq!(s.decide(0, true), Controller::Policy);
        assert_eq!(s.decide(1, true), Controller::Policy);
        assert_eq!(s.decide(2, false), Controller::Corrective);
        assert_eq!(s.decide(3, true), Controller::Corrective);
        assert_eq!(s.switched_at(), Some(2));

        let mut s = Supervisor::default();
        assert_eq!(s.decide(0, false), Controller::Corrective);
        assert_eq!(s.switched_at(), Some(0));
    }

    #[test]
    fn trace_invariant_detects_violations() {
        let p = |pred| Decision { prediction: Some(pred), controller: Controller::Policy };
        let c = |pred| Decision { prediction: Some(pred), controller: Controller::Corrective };
        let ok = EpisodeTrace { decisions: vec![p(1), p(1), c(0)], recovery_steps: 3 };
        assert!(ok.supervisor_invariant_holds());
        let unsafe_action = EpisodeTrace { decisions: vec![p(1), p(0)], recovery_steps: 0 };
        assert!(!unsafe_action.supervisor_invariant_holds());
        let after_switch = EpisodeTrace { decisions: vec![c(0), p(1)], recovery_steps: 0 };
        assert!(!after_switch.supervisor_invariant_holds());
    }

    /// Model whose prediction is safe only near the upright state.
    fn local_model(gain: FeedbackGain) -> SafeRegionModel {
        let mut near = SystemState::UPRIGHT;
        near.0[0] = 0.01;
        let far = SystemState([1.2, 2.0, -2.0, 8.0, 15.0, -15.0]);
        let far2 = SystemState([-1.2, -2.0, 2.0, -8.0, -15.0, 15.0]);
        let emb = Embedding {
            source_states: vec![SystemState::UPRIGHT, near, far, far2],
            labels: vec![1, 1, 0, 0],
            points: vec![vec![0.0, 0.0], vec![0.0, 0.1], vec![5.0, 0.0], vec![-5.0, 0.0]],
            bandwidths: vec![0.05; 4],
            final_kl: 0.0,
            kl_trace: vec![],
            config: TsneConfig::default(),
        };
        SafeRegionModel::new(emb, Some(0.5), 0.8, StateRanges::default(), gain).unwrap()
    }

    #[test]
    fn supervised_step_switches_and_stays() {
        let params = PendulumParams::nominal();
        let gain = synthesize_gain(&params, &LqrWeights::default()).unwrap();
        let model = local_model(gain.clone());
        let integ = Integrator::new(&params, &SimConfig::default()).unwrap();
        let mut sup = Supervisor::default();
        let push = ControlInput([0.0; 3]);
        let (x1, d0) = supervised_step(&mut sup, &SystemState::UPRIGHT, 0, &push, &model, &gain, &params, &integ).unwrap();
        assert_eq!(d0.controller, Controller::Policy);
        assert_eq!(x1, SystemState::UPRIGHT);
        let away = SystemState([1.0, 1.5, -1.5, 6.0, 10.0, -10.0]);
        let (_, d1) = supervised_step(&mut sup, &away, 1, &push, &model, &gain, &params, &integ).unwrap();
        assert_eq!(d1, Decision { prediction: Some(0), controller: Controller::Corrective });
        let (_, d2) = supervised_step(&mut sup, &SystemState::UPRIGHT, 2, &push, &model, &gain, &params, &integ).unwrap();
        assert_eq!(d2, Decision { prediction: None, controller: Controller::Corrective });
    }

    fn small_policy() -> PolicyConfig {
        PolicyConfig {
            hidden: vec![16, 16],
            n_steps: 256,
            n_minibatches: 8,
            n_epochs: 2,
            horizon: 100,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn supervised_training_respects_invariants() {
        let params = PendulumParams::nominal();
        let gain = synthesize_gain(&params, &LqrWeights::default()).unwrap();
        let model = local_model(gain.clone());
        let cfg = small_policy();
        let setup = TrainSetup {
            policy: &cfg,
            model: Some(&model),
            params_real: PendulumParams::real(1.5),
            sim: SimConfig::default(),
            gain,
            recovery: RecoveryOptions::default(),
            ranges: StateRanges::default(),
        };
        let out = train(&setup, 512, 3).unwrap();
        assert_eq!(out.metrics.updates.len(), 2);
        assert!(out.metrics.activations > 0);
        assert!(out.metrics.failures <= out.metrics.activations);
        assert_eq!(out.metrics.violations, 0);
        assert!(out.traces.iter().all(EpisodeTrace::supervisor_invariant_holds));
        for ep in &out.episodes {
            assert_eq!(ep.recovery == RecoveryResult::NotTriggered, ep.cause == TerminationCause::Horizon);
            assert!(ep.steps <= cfg.horizon);
        }
        let predicted = out.episodes.iter().filter(|e| e.cause == TerminationCause::PredictedUnsafe).count();
        assert_eq!(predicted, out.metrics.activations);

        let again = train(&setup, 512, 3).unwrap();
        assert_eq!(out.metrics, again.metrics);
        assert_eq!(out.policy.theta, again.policy.theta);
    }

    #[test]
    fn rejected_start_stops_after_one_activation() {
        let params = PendulumParams::nominal();
        let gain = synthesize_gain(&params, &LqrWeights::default()).unwrap();
        let mut model = local_model(gain.clone());
        model.embedding.labels = vec![0, 0, 1, 1];
        assert_eq!(model.predict(&SystemState::UPRIGHT), 0);
        let cfg = small_policy();
        let setup = TrainSetup {
            policy: &cfg,
            model: Some(&model),
            params_real: params,
            sim: SimConfig::default(),
            gain,
            recovery: RecoveryOptions::default(),
            ranges: StateRanges::default(),
        };
        let out = train(&setup, 512, 0).unwrap();
        assert!(out.start_rejected);
        assert!(out.metrics.updates.is_empty());
        assert_eq!(out.metrics.activations, 1);
        assert_eq!(out.metrics.failures, 0);
        assert_eq!(out.episodes[0].steps, 0);
        assert_eq!(out.traces[0].switch_index(), Some(0));
        assert!(out.traces[0].supervisor_invariant_holds());
    }

    #[test]
    fn free_training_counts_violations() {
        let params = PendulumParams::nominal();
        let gain = synthesize_gain(&params, &LqrWeights::default()).unwrap();
        let cfg = small_policy();
        let setup = TrainSetup {
            policy: &cfg,
            model: None,
            params_real: params,
            sim: SimConfig::default(),
            gain,
            recovery: RecoveryOptions::default(),
            ranges: StateRanges::default(),
        };
        let out = train(&setup, 256, 1).unwrap();
        assert_eq!(out.metrics.activations, 0);
        assert!(out.metrics.violations > 0);
        assert!(out
            .episodes
            .iter()
            .all(|e| e.recovery == RecoveryResult::NotTriggered));
        assert!(out.traces.iter().all(EpisodeTrace::supervisor_invariant_holds));
    }
}
