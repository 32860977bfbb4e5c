//! LQR corrective controller synthesized on the linearized nominal pendulum,
//! plus closed-loop recovery rollouts.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    dynamics_eval, saturate, ControlInput, Integrator, PendulumParams, SimConfig, SystemState,
    INPUT_DIM, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::safety::StateRanges;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// State-feedback gain `K`, torque per unit state deviation (3 x 6, row major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackGain {
    pub k: [[f64; STATE_DIM]; INPUT_DIM],
}

impl FeedbackGain {
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(INPUT_DIM, STATE_DIM, |i, j| self.k[i][j])
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut k = [[0.0; STATE_DIM]; INPUT_DIM];
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[(i, j)];
            }
        }
        FeedbackGain { k }
    }

    /// `-K x`, before saturation.
    pub fn feedback(&self, state: &SystemState) -> ControlInput {
        ControlInput(std::array::from_fn(|i| {
            -self.k[i].iter().zip(state.0.iter()).map(|(k, x)| k * x).sum::<f64>()
        }))
    }
}

/// Diagonal LQR weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LqrWeights {
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; INPUT_DIM],
}

impl Default for LqrWeights {
    fn default() -> Self {
        LqrWeights {
            q_diag: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0],
            r_diag: [0.1; INPUT_DIM],
        }
    }
}

/// Jacobian of the dynamics at the upright equilibrium by central differences.
pub fn linearize(params: &PendulumParams) -> Result<LinearModel> {
    const STEP: f64 = 1e-6;
    let mut a = DMatrix::zeros(STATE_DIM, STATE_DIM);
    let mut b = DMatrix::zeros(STATE_DIM, INPUT_DIM);
    for j in 0..STATE_DIM {
        let mut plus = SystemState::UPRIGHT;
        let mut minus = SystemState::UPRIGHT;
        plus.0[j] = STEP;
        minus.0[j] = -STEP;
        let fp = dynamics_eval(&plus, &ControlInput::ZERO, params)?;
        let fm = dynamics_eval(&minus, &ControlInput::ZERO, params)?;
        for i in 0..STATE_DIM {
            a[(i, j)] = (fp[i] - fm[i]) / (2.0 * STEP);
        }
    }
    for j in 0..INPUT_DIM {
        let mut plus = ControlInput::ZERO;
        let mut minus = ControlInput::ZERO;
        plus.0[j] = STEP;
        minus.0[j] = -STEP;
        let fp = dynamics_eval(&SystemState::UPRIGHT, &plus, params)?;
        let fm = dynamics_eval(&SystemState::UPRIGHT, &minus, params)?;
        for i in 0..STATE_DIM {
            b[(i, j)] = (fp[i] - fm[i]) / (2.0 * STEP);
        }
    }
    Ok(LinearModel { a, b })
}

/// `A^T P + P A - P B R^-1 B^T P + Q`.
pub fn care_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SynthesisFailure("R is singular".into()))?;
    Ok(a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q)
}

/// Stabilizing solution of the continuous algebraic Riccati equation.
///
/// A matrix-sign-function pass on the Hamiltonian gives the stable invariant
/// subspace; Newton-Kleinman steps then polish the result until the residual
/// is at round-off level.
pub fn solve_care(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols())
    {
        return Err(Error::InvalidParameter("inconsistent CARE dimensions".into()));
    }
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::SynthesisFailure("R is singular".into()))?;
    let g = b * &r_inv * b.transpose();

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let w = matrix_sign(h)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let normal = lhs.transpose() * &lhs;
    let mut p = normal
        .lu()
        .solve(&(lhs.transpose() * rhs))
        .ok_or_else(|| Error::SynthesisFailure("stable subspace is not a graph".into()))?;
    p = 0.5 * (&p + p.transpose());

    // Newton-Kleinman refinement.
    const MAX_NEWTON: usize = 50;
    let mut best = p.clone();
    let mut best_res = care_residual(a, b, q, r, &p)?.norm();
    for _ in 0..MAX_NEWTON {
        if best_res <= 1e-13 * p.norm().max(1.0) {
            break;
        }
        let k = &r_inv * b.transpose() * &p;
        let closed = a - b * &k;
        let c = q + k.transpose() * r * &k;
        let next = solve_lyapunov(&closed, &c)?;
        let next = 0.5 * (&next + next.transpose());
        let res = care_residual(a, b, q, r, &next)?.norm();
        p = next;
        if res < best_res {
            best_res = res;
            best = p.clone();
        } else {
            break;
        }
    }
    // P = 0 is a legitimate solution (stable plant, zero state cost), so the
    // relative tolerance gets an absolute floor.
    let tol = (1e-8 * best.norm()).max(1e-12);
    if !best.iter().all(|v| v.is_finite()) || best_res > tol {
        return Err(Error::SynthesisFailure(format!(
            "residual {best_res:e} after refinement"
        )));
    }
    Ok(best)
}

fn matrix_sign(mut z: DMatrix<f64>) -> Result<DMatrix<f64>> {
    const MAX_ITER: usize = 100;
    let dim = z.nrows() as f64;
    for _ in 0..MAX_ITER {
        let inv = z
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::SynthesisFailure("Hamiltonian has imaginary-axis eigenvalues".into()))?;
        // Determinant scaling speeds up the early iterations.
        let det = z.determinant().abs();
        let c = if det.is_finite() && det > 0.0 {
            det.powf(-1.0 / dim)
        } else {
            1.0
        };
        let next = 0.5 * (c * &z + inv / c);
        let change = (&next - &z).norm();
        let scale = next.norm();
        z = next;
        if change <= 1e-13 * scale {
            return Ok(z);
        }
    }
    Err(Error::SynthesisFailure("sign iteration did not converge".into()))
}

/// Solves `A^T X + X A + C = 0` through the Kronecker-vectorized system.
pub fn solve_lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let at = a.transpose();
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(&at) + at.kronecker(&eye);
    let rhs = DVector::from_iterator(n * n, c.iter().map(|v| -v));
    let x = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::SynthesisFailure("singular Lyapunov operator".into()))?;
    Ok(DMatrix::from_column_slice(n, n, x.as_slice()))
}

/// LQR gain `K = R^-1 B^T P` for the upright equilibrium of the nominal plant.
pub fn synthesize_gain(params: &PendulumParams, weights: &LqrWeights) -> Result<FeedbackGain> {
    let lin = linearize(&params.as_nominal())?;
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(&weights.q_diag));
    let r = DMatrix::from_diagonal(&DVector::from_column_slice(&weights.r_diag));
    let p = solve_care(&lin.a, &lin.b, &q, &r)?;
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::SynthesisFailure("R is singular".into()))?;
    Ok(FeedbackGain::from_matrix(&(r_inv * lin.b.transpose() * p)))
}

/// Largest real part among the eigenvalues of `A - B K`.
pub fn closed_loop_spectral_abscissa(lin: &LinearModel, gain: &FeedbackGain) -> f64 {
    let closed = &lin.a - &lin.b * gain.as_matrix();
    closed
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// `saturate(-K x)`.
pub fn corrective_control(
    state: &SystemState,
    gain: &FeedbackGain,
    params: &PendulumParams,
) -> ControlInput {
    saturate(&gain.feedback(state), params)
}

/// One control period under the corrective law. The feedback is re-evaluated
/// at every physics step: the fastest closed-loop pole of the nominal LQR
/// design sits near -450 rad/s, which a 10 ms zero-order hold destabilizes.
pub fn corrective_step(
    state: &SystemState,
    gain: &FeedbackGain,
    params: &PendulumParams,
    integrator: &Integrator,
) -> Result<SystemState> {
    let mut x = state.0;
    for n in 0..integrator.substeps() {
        let u = corrective_control(&SystemState(x), gain, params);
        x = integrator.rk4(&x, &u.0)?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SimulationDivergence { steps: n + 1 });
        }
    }
    Ok(SystemState(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoveryOptions {
    /// Seconds.
    pub horizon: f64,
    /// Range-normalized norm below which the state counts as recovered.
    pub tolerance: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            horizon: 10.0,
            tolerance: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub success: bool,
    pub violation: bool,
    /// Seconds since activation at which the ground constraint was first violated.
    pub violation_time: Option<f64>,
    pub diverged: bool,
    /// Control periods simulated, including a partial final one.
    pub control_steps: usize,
    /// States at each control instant, starting with the initial one. Empty
    /// unless requested.
    pub trajectory: Vec<SystemState>,
}

/// Closed-loop simulation under the corrective controller, with the feedback
/// re-evaluated at every physics step (see [`corrective_step`]).
pub fn recovery_rollout(
    state: &SystemState,
    gain: &FeedbackGain,
    params: &PendulumParams,
    config: &SimConfig,
    options: &RecoveryOptions,
    ranges: &StateRanges,
) -> Result<RecoveryOutcome> {
    let integrator = Integrator::new(params, config)?;
    Ok(run_recovery(state, gain, params, &integrator, config, options, ranges, true))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_recovery(
    state: &SystemState,
    gain: &FeedbackGain,
    params: &PendulumParams,
    integrator: &Integrator,
    config: &SimConfig,
    options: &RecoveryOptions,
    ranges: &StateRanges,
    record: bool,
) -> RecoveryOutcome {
    let mut out = RecoveryOutcome {
        success: false,
        violation: false,
        violation_time: None,
        diverged: false,
        control_steps: 0,
        trajectory: Vec::new(),
    };
    if record {
        out.trajectory.push(*state);
    }
    if !state.is_finite() {
        out.diverged = true;
        return out;
    }
    if state.hits_ground() {
        out.violation = true;
        out.violation_time = Some(0.0);
        return out;
    }
    if ranges.normalized_norm(state) < options.tolerance {
        out.success = true;
        return out;
    }
    let steps = (options.horizon / config.dt_control).round() as usize;
    let mut x = state.0;
    for step in 0..steps {
        out.control_steps = step + 1;
        for sub in 0..integrator.substeps() {
            let u = corrective_control(&SystemState(x), gain, params);
            x = match integrator.rk4(&x, &u.0) {
                Ok(next) if next.iter().all(|v| v.is_finite()) => next,
                _ => {
                    out.diverged = true;
                    return out;
                }
            };
            if SystemState(x).hits_ground() {
                out.violation = true;
                out.violation_time = Some(
                    step as f64 * config.dt_control + (sub + 1) as f64 * config.dt_physics,
                );
                if record {
                    out.trajectory.push(SystemState(x));
                }
                return out;
            }
        }
        if record {
            out.trajectory.push(SystemState(x));
        }
        if ranges.normalized_norm(&SystemState(x)) < options.tolerance {
            out.success = true;
            return out;
        }
    }
    out
}
