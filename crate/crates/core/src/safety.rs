//! Simulation-based safety labels for nominal and mismatched plants.
//!
//! A state is safe when the corrective controller brings it back to the
//! upright equilibrium without the first link touching the ground.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::corrective::{run_recovery, FeedbackGain, RecoveryOptions};
use crate::dynamics::{Integrator, PendulumParams, SimConfig, SystemState, STATE_DIM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub state: SystemState,
    /// 1 = safe, 0 = unsafe.
    pub label: u8,
}

/// Per-dimension sampling box; its widths also normalize distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateRanges {
    pub lower: [f64; STATE_DIM],
    pub upper: [f64; STATE_DIM],
}

impl Default for StateRanges {
    fn default() -> Self {
        StateRanges {
            lower: [-FRAC_PI_2, -PI, -PI, -10.0, -20.0, -20.0],
            upper: [FRAC_PI_2, PI, PI, 10.0, 20.0, 20.0],
        }
    }
}

impl StateRanges {
    pub fn validate(&self) -> Result<()> {
        for d in 0..STATE_DIM {
            if !(self.lower[d].is_finite() && self.upper[d].is_finite() && self.lower[d] < self.upper[d])
            {
                return Err(Error::InvalidParameter(format!(
                    "state range {d} must satisfy lower < upper, got [{}, {}]",
                    self.lower[d], self.upper[d]
                )));
            }
        }
        Ok(())
    }

    pub fn widths(&self) -> [f64; STATE_DIM] {
        std::array::from_fn(|d| self.upper[d] - self.lower[d])
    }

    pub fn contains(&self, state: &SystemState) -> bool {
        (0..STATE_DIM).all(|d| state.0[d] >= self.lower[d] && state.0[d] <= self.upper[d])
    }

    /// State divided elementwise by the range widths.
    pub fn normalize(&self, state: &SystemState) -> [f64; STATE_DIM] {
        let w = self.widths();
        std::array::from_fn(|d| state.0[d] / w[d])
    }

    pub fn normalized_norm(&self, state: &SystemState) -> f64 {
        self.normalize(state).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Euclidean distance after scaling every dimension by its range width.
pub fn normalized_distance(a: &SystemState, b: &SystemState, ranges: &StateRanges) -> f64 {
    normalized_sq_distance(a, b, ranges).sqrt()
}

pub fn normalized_sq_distance(a: &SystemState, b: &SystemState, ranges: &StateRanges) -> f64 {
    let w = ranges.widths();
    (0..STATE_DIM)
        .map(|d| {
            let diff = (a.0[d] - b.0[d]) / w[d];
            diff * diff
        })
        .sum()
}

/// Labeling function of one plant: the nominal one when `params.delta == 1`.
pub struct SafetyOracle {
    params: PendulumParams,
    gain: FeedbackGain,
    config: SimConfig,
    options: RecoveryOptions,
    ranges: StateRanges,
    integrator: Integrator,
}

impl SafetyOracle {
    pub fn new(
        params: PendulumParams,
        gain: FeedbackGain,
        config: SimConfig,
        options: RecoveryOptions,
        ranges: StateRanges,
    ) -> Result<Self> {
        ranges.validate()?;
        let integrator = Integrator::new(&params, &config)?;
        Ok(SafetyOracle {
            params,
            gain,
            config,
            options,
            ranges,
            integrator,
        })
    }

    pub fn params(&self) -> &PendulumParams {
        &self.params
    }

    /// Any simulation fault yields 0.
    pub fn label(&self, state: &SystemState) -> u8 {
        if state.hits_ground() {
            return 0;
        }
        let out = run_recovery(
            state,
            &self.gain,
            &self.params,
            &self.integrator,
            &self.config,
            &self.options,
            &self.ranges,
            false,
        );
        u8::from(out.success && !out.violation && !out.diverged)
    }

    pub fn label_batch(&self, states: &[SystemState]) -> Vec<LabeledSample> {
        states
            .iter()
            .map(|s| LabeledSample {
                state: *s,
                label: self.label(s),
            })
            .collect()
    }
}

pub fn label_state(
    state: &SystemState,
    params: &PendulumParams,
    gain: &FeedbackGain,
    config: &SimConfig,
    options: &RecoveryOptions,
    ranges: &StateRanges,
) -> Result<u8> {
    let oracle = SafetyOracle::new(*params, gain.clone(), *config, *options, *ranges)?;
    Ok(oracle.label(state))
}

pub fn label_batch(
    states: &[SystemState],
    params: &PendulumParams,
    gain: &FeedbackGain,
    config: &SimConfig,
    options: &RecoveryOptions,
    ranges: &StateRanges,
) -> Result<Vec<LabeledSample>> {
    let oracle = SafetyOracle::new(*params, gain.clone(), *config, *options, *ranges)?;
    Ok(oracle.label_batch(states))
}
