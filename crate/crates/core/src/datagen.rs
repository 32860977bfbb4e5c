//! Training-set generation: a uniform part over the state box and a part drawn
//! from a normal distribution fitted to random-policy rollouts of the nominal
//! plant, mixed by `alpha`.

use nalgebra::{SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corrective::{FeedbackGain, RecoveryOptions};
use crate::dynamics::{ControlInput, Integrator, PendulumParams, SimConfig, SystemState, STATE_DIM};
use crate::error::{Error, Result};
use crate::rng::{task_rng, DOMAIN_MND, DOMAIN_ROLLOUT, DOMAIN_UD};
use crate::safety::{SafetyOracle, StateRanges};

type Vec6 = SVector<f64, STATE_DIM>;
type Mat6 = SMatrix<f64, STATE_DIM, STATE_DIM>;

pub const COVARIANCE_JITTER: f64 = 1e-8;
pub const REJECTION_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MndModel {
    pub mean: [f64; STATE_DIM],
    /// Row-major 6 x 6.
    pub covariance: Vec<f64>,
}

impl MndModel {
    fn mean_vec(&self) -> Vec6 {
        Vec6::from_column_slice(&self.mean)
    }

    fn cov_mat(&self) -> Result<Mat6> {
        if self.covariance.len() != STATE_DIM * STATE_DIM {
            return Err(Error::Format(format!(
                "covariance must have {} entries, got {}",
                STATE_DIM * STATE_DIM,
                self.covariance.len()
            )));
        }
        Ok(Mat6::from_row_slice(&self.covariance))
    }

    pub fn covariance_matrix(&self) -> Result<Mat6> {
        self.cov_mat()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Ud,
    Mnd,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Ud => "ud",
            Provenance::Mnd => "mnd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub state: SystemState,
    pub label: u8,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub ranges: StateRanges,
    pub rollout_episodes: usize,
    pub rollout_steps: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            k: 1000,
            alpha: 0.5,
            seed: 0,
            ranges: StateRanges::default(),
            rollout_episodes: 200,
            rollout_steps: 300,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        self.ranges.validate()
    }

    /// `(|D_ud|, |D_mnd|)` with `|D_ud| = round_half_up(alpha * k)`.
    pub fn split(&self) -> (usize, usize) {
        let ud = (self.alpha * self.k as f64 + 0.5).floor() as usize;
        let ud = ud.min(self.k);
        (ud, self.k - ud)
    }
}

fn inside(state: &SystemState, ranges: &StateRanges) -> bool {
    ranges.contains(state) && !state.hits_ground()
}

/// Independent uniform draws per dimension. Draws on the ground boundary of
/// `theta1` are redrawn so the first-link range stays open.
pub fn sample_ud<R: Rng>(count: usize, ranges: &StateRanges, rng: &mut R) -> Vec<SystemState> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = SystemState(std::array::from_fn(|d| rng.random_range(ranges.lower[d]..ranges.upper[d])));
        if !s.hits_ground() {
            out.push(s);
        }
    }
    out
}

/// Random-torque episodes from the upright state, recording every visited state.
///
/// Episode `e` draws from stream `e` of the rollout domain, so the result only
/// depends on `seed`. An episode ends early once the first link reaches the
/// ground; that last state is kept.
pub fn collect_rollouts(
    params: &PendulumParams,
    config: &SimConfig,
    n_episodes: usize,
    episode_len: usize,
    seed: u64,
) -> Result<Vec<SystemState>> {
    let integrator = Integrator::new(params, config)?;
    let mut states = Vec::new();
    for e in 0..n_episodes {
        let mut rng = task_rng(seed, DOMAIN_ROLLOUT, e as u64);
        let mut x = SystemState::UPRIGHT;
        states.push(x);
        for _ in 0..episode_len {
            let u = ControlInput(std::array::from_fn(|_| rng.random_range(params.u_min..=params.u_max)));
            x = match integrator.step(&x, &u) {
                Ok(next) => next,
                Err(_) => break,
            };
            states.push(x);
            if x.hits_ground() {
                break;
            }
        }
    }
    Ok(states)
}

/// Sample mean and unbiased covariance, plus `1e-8 I`.
pub fn fit_mnd(states: &[SystemState]) -> Result<MndModel> {
    if states.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: states.len(),
        });
    }
    let n = states.len() as f64;
    let mut mean = Vec6::zeros();
    for s in states {
        mean += Vec6::from_column_slice(&s.0);
    }
    mean /= n;
    let mut cov = Mat6::zeros();
    for s in states {
        let d = Vec6::from_column_slice(&s.0) - mean;
        cov += d * d.transpose();
    }
    cov /= n - 1.0;
    cov = 0.5 * (cov + cov.transpose()) + Mat6::identity() * COVARIANCE_JITTER;
    let mut covariance = Vec::with_capacity(STATE_DIM * STATE_DIM);
    for i in 0..STATE_DIM {
        for j in 0..STATE_DIM {
            covariance.push(cov[(i, j)]);
        }
    }
    Ok(MndModel {
        mean: std::array::from_fn(|i| mean[i]),
        covariance,
    })
}

/// Gaussian draws truncated to `ranges` by rejection.
pub fn sample_mnd<R: Rng>(
    model: &MndModel,
    count: usize,
    ranges: &StateRanges,
    rng: &mut R,
) -> Result<Vec<SystemState>> {
    let chol = model
        .cov_mat()?
        .cholesky()
        .ok_or_else(|| Error::InvalidParameter("covariance is not positive definite".into()))?;
    let l = chol.l();
    let mean = model.mean_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..REJECTION_CAP {
            let z = Vec6::from_fn(|_, _| rng.sample(StandardNormal));
            let x = mean + l * z;
            let s = SystemState(std::array::from_fn(|i| x[i]));
            if inside(&s, ranges) {
                accepted = Some(s);
                break;
            }
        }
        out.push(accepted.ok_or(Error::DegenerateModel { cap: REJECTION_CAP })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub rows: Vec<DatasetRow>,
    pub mnd: MndModel,
    /// Number of states the normal model was fitted to.
    pub rollout_states: usize,
}

impl GeneratedDataset {
    pub fn safe_fraction(&self) -> f64 {
        safe_fraction(&self.rows)
    }
}

pub fn safe_fraction(rows: &[DatasetRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.label == 1).count() as f64 / rows.len() as f64
}

/// `D_tr = D_ud + D_mnd`, labeled on the nominal plant, uniform part first.
pub fn build_dataset(
    spec: &DatasetSpec,
    params_nominal: &PendulumParams,
    gain: &FeedbackGain,
    config: &SimConfig,
    recovery: &RecoveryOptions,
) -> Result<GeneratedDataset> {
    spec.validate()?;
    let nominal = params_nominal.as_nominal();
    let rollouts = collect_rollouts(&nominal, config, spec.rollout_episodes, spec.rollout_steps, spec.seed)?;
    let mnd = fit_mnd(&rollouts)?;

    let (n_ud, n_mnd) = spec.split();
    let ud = sample_ud(n_ud, &spec.ranges, &mut task_rng(spec.seed, DOMAIN_UD, 0));
    let from_mnd = sample_mnd(&mnd, n_mnd, &spec.ranges, &mut task_rng(spec.seed, DOMAIN_MND, 0))?;

    let oracle = SafetyOracle::new(nominal, gain.clone(), *config, *recovery, spec.ranges)?;
    let rows = ud
        .iter()
        .map(|s| (s, Provenance::Ud))
        .chain(from_mnd.iter().map(|s| (s, Provenance::Mnd)))
        .map(|(s, provenance)| DatasetRow {
            state: *s,
            label: oracle.label(s),
            provenance,
        })
        .collect();
    Ok(GeneratedDataset {
        rows,
        mnd,
        rollout_states: rollouts.len(),
    })
}
