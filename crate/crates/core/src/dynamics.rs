//! Three-link inverted pendulum on a fixed base.
//!
//! Joint angles follow the manipulator convention: `theta1` is measured from the
//! upward vertical, `theta2` and `theta3` relative to the preceding link, so the
//! zero state is the upright configuration with the tip at `(0, l1 + l2 + l3)`.
//! Each link carries a point mass at its midpoint. Internally the equations of
//! motion are assembled in absolute link angles (`phi_i = theta_1 + .. + theta_i`),
//! where the point-mass Lagrangian has a compact closed form, and mapped back to
//! joint coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 6;
pub const INPUT_DIM: usize = 3;

/// Joint angles (rad) followed by joint angular velocities (rad/s).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SystemState(pub [f64; STATE_DIM]);

impl SystemState {
    pub const UPRIGHT: SystemState = SystemState([0.0; STATE_DIM]);

    pub fn new(theta: [f64; 3], dtheta: [f64; 3]) -> Self {
        SystemState([theta[0], theta[1], theta[2], dtheta[0], dtheta[1], dtheta[2]])
    }

    pub fn theta1(&self) -> f64 {
        self.0[0]
    }
    pub fn theta2(&self) -> f64 {
        self.0[1]
    }
    pub fn theta3(&self) -> f64 {
        self.0[2]
    }
    pub fn dtheta1(&self) -> f64 {
        self.0[3]
    }
    pub fn dtheta2(&self) -> f64 {
        self.0[4]
    }
    pub fn dtheta3(&self) -> f64 {
        self.0[5]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn as_array(&self) -> &[f64; STATE_DIM] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// First link at or below the horizontal: the ground-hit constraint.
    pub fn hits_ground(&self) -> bool {
        !(self.theta1().abs() < std::f64::consts::FRAC_PI_2)
    }
}

/// Joint torques in N·m.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ControlInput(pub [f64; INPUT_DIM]);

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput([0.0; INPUT_DIM]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub gravity: f64,
    pub u_max: f64,
    pub u_min: f64,
    /// Mass-mismatch factor applied to `m1` and `m2`.
    pub delta: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl PendulumParams {
    pub fn nominal() -> Self {
        PendulumParams {
            m1: 1.0,
            m2: 1.0,
            m3: 1.0,
            l1: 1.0,
            l2: 1.0,
            l3: 1.0,
            gravity: 9.81,
            u_max: 100.0,
            u_min: -100.0,
            delta: 1.0,
        }
    }

    /// The mismatched plant: nominal geometry with the first two masses scaled by `delta`.
    pub fn real(delta: f64) -> Self {
        PendulumParams {
            delta,
            ..Self::nominal()
        }
    }

    /// Same geometry and limits with the mismatch removed.
    pub fn as_nominal(&self) -> Self {
        PendulumParams {
            delta: 1.0,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("m1", self.m1),
            ("m2", self.m2),
            ("m3", self.m3),
            ("l1", self.l1),
            ("l2", self.l2),
            ("l3", self.l3),
            ("delta", self.delta),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.gravity.is_finite() {
            return Err(Error::InvalidParameter("gravity must be finite".into()));
        }
        if !(self.u_min < self.u_max) {
            return Err(Error::InvalidParameter(format!(
                "torque bounds must satisfy u_min < u_max, got [{}, {}]",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }

    pub fn masses(&self) -> [f64; 3] {
        [self.delta * self.m1, self.delta * self.m2, self.m3]
    }

    pub fn lengths(&self) -> [f64; 3] {
        [self.l1, self.l2, self.l3]
    }

    pub fn reach(&self) -> f64 {
        self.l1 + self.l2 + self.l3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_physics: f64,
    pub dt_control: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt_physics: 1e-3,
            dt_control: 0.01,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.substeps().map(|_| ())
    }

    /// Physics steps per control period.
    pub fn substeps(&self) -> Result<usize> {
        if !(self.dt_physics > 0.0 && self.dt_control > 0.0) {
            return Err(Error::InvalidParameter("time steps must be positive".into()));
        }
        let ratio = self.dt_control / self.dt_physics;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::InvalidParameter(format!(
                "dt_control / dt_physics must be a positive integer, got {ratio}"
            )));
        }
        Ok(n as usize)
    }
}

/// Mass-weighted lever products for the point-mass chain.
///
/// `inertia[i][j] = sum_k m_k a_ki a_kj` and `gravity_lever[i] = sum_k m_k a_ki`,
/// where `a_ki` is how far along link `i` mass `k` sits: the full link length for
/// links below `k`, half of it for link `k` itself, zero beyond.
struct ChainConstants {
    inertia: [[f64; 3]; 3],
    gravity_lever: [f64; 3],
}

impl ChainConstants {
    fn new(params: &PendulumParams) -> Self {
        let m = params.masses();
        let l = params.lengths();
        let lever = |k: usize, i: usize| -> f64 {
            match i.cmp(&k) {
                std::cmp::Ordering::Less => l[i],
                std::cmp::Ordering::Equal => 0.5 * l[i],
                std::cmp::Ordering::Greater => 0.0,
            }
        };
        let mut inertia = [[0.0; 3]; 3];
        let mut gravity_lever = [0.0; 3];
        for k in 0..3 {
            for i in 0..3 {
                gravity_lever[i] += m[k] * lever(k, i);
                for j in 0..3 {
                    inertia[i][j] += m[k] * lever(k, i) * lever(k, j);
                }
            }
        }
        ChainConstants {
            inertia,
            gravity_lever,
        }
    }
}

fn absolute_angles(s: &[f64; STATE_DIM]) -> ([f64; 3], [f64; 3]) {
    let phi = [s[0], s[0] + s[1], s[0] + s[1] + s[2]];
    let dphi = [s[3], s[3] + s[4], s[3] + s[4] + s[5]];
    (phi, dphi)
}

/// Time derivative of the state under `M(q) q'' + C(q, q') q' + G(q) = u`.
pub fn dynamics_eval(
    state: &SystemState,
    input: &ControlInput,
    params: &PendulumParams,
) -> Result<[f64; STATE_DIM]> {
    derivative(&state.0, &input.0, &ChainConstants::new(params), params.gravity)
}

fn derivative(
    s: &[f64; STATE_DIM],
    u: &[f64; INPUT_DIM],
    chain: &ChainConstants,
    gravity: f64,
) -> Result<[f64; STATE_DIM]> {
    let (phi, dphi) = absolute_angles(s);
    // Joint torques map to absolute-angle generalized forces through the
    // transpose of the relative-to-absolute angle map.
    let force = [u[0] - u[1], u[1] - u[2], u[2]];

    let mut mass = Matrix3::zeros();
    let mut rhs = Vector3::zeros();
    for i in 0..3 {
        let mut r = force[i] + gravity * chain.gravity_lever[i] * libm::sin(phi[i]);
        for j in 0..3 {
            let d = phi[i] - phi[j];
            mass[(i, j)] = chain.inertia[i][j] * libm::cos(d);
            r -= chain.inertia[i][j] * libm::sin(d) * dphi[j] * dphi[j];
        }
        rhs[i] = r;
    }
    let ddphi = mass
        .cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or(Error::SingularConfiguration { state: *s })?;

    Ok([
        s[3],
        s[4],
        s[5],
        ddphi[0],
        ddphi[1] - ddphi[0],
        ddphi[2] - ddphi[1],
    ])
}

/// Kinetic plus potential energy. Potential is measured from the fully hanging
/// configuration so the total is never negative.
pub fn total_energy(state: &SystemState, params: &PendulumParams) -> f64 {
    let chain = ChainConstants::new(params);
    let (phi, dphi) = absolute_angles(&state.0);
    let mut kinetic = 0.0;
    let mut potential = 0.0;
    for i in 0..3 {
        potential += params.gravity * chain.gravity_lever[i] * (1.0 + libm::cos(phi[i]));
        for j in 0..3 {
            kinetic += 0.5 * chain.inertia[i][j] * libm::cos(phi[i] - phi[j]) * dphi[i] * dphi[j];
        }
    }
    kinetic + potential
}

pub fn saturate(input: &ControlInput, params: &PendulumParams) -> ControlInput {
    ControlInput(input.0.map(|u| u.clamp(params.u_min, params.u_max)))
}

/// Tip of link 3, base joint at the origin, `y` pointing up.
pub fn forward_kinematics(state: &SystemState, params: &PendulumParams) -> (f64, f64) {
    let (phi, _) = absolute_angles(&state.0);
    let l = params.lengths();
    let mut x = 0.0;
    let mut y = 0.0;
    for i in 0..3 {
        x += l[i] * libm::sin(phi[i]);
        y += l[i] * libm::cos(phi[i]);
    }
    (x, y)
}

/// Fixed-step RK4 stepper with the chain constants precomputed.
pub struct Integrator {
    chain: ChainConstants,
    gravity: f64,
    dt: f64,
    substeps: usize,
}

impl Integrator {
    pub fn new(params: &PendulumParams, config: &SimConfig) -> Result<Self> {
        params.validate()?;
        Ok(Integrator {
            chain: ChainConstants::new(params),
            gravity: params.gravity,
            dt: config.dt_physics,
            substeps: config.substeps()?,
        })
    }

    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// One physics step of length `dt_physics`.
    pub fn rk4(&self, s: &[f64; STATE_DIM], u: &[f64; INPUT_DIM]) -> Result<[f64; STATE_DIM]> {
        let h = self.dt;
        let f = |x: &[f64; STATE_DIM]| derivative(x, u, &self.chain, self.gravity);
        let axpy = |x: &[f64; STATE_DIM], k: &[f64; STATE_DIM], a: f64| {
            std::array::from_fn::<f64, STATE_DIM, _>(|i| x[i] + a * k[i])
        };
        let k1 = f(s)?;
        let k2 = f(&axpy(s, &k1, 0.5 * h))?;
        let k3 = f(&axpy(s, &k2, 0.5 * h))?;
        let k4 = f(&axpy(s, &k3, h))?;
        Ok(std::array::from_fn(|i| {
            s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        }))
    }

    /// One control period under zero-order hold on `input`.
    pub fn step(&self, state: &SystemState, input: &ControlInput) -> Result<SystemState> {
        let mut s = state.0;
        for n in 0..self.substeps {
            s = self.rk4(&s, &input.0)?;
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::SimulationDivergence { steps: n + 1 });
            }
        }
        Ok(SystemState(s))
    }
}

/// Advance one control period with RK4 at `dt_physics`, holding `input` constant.
pub fn integrate_step(
    state: &SystemState,
    input: &ControlInput,
    params: &PendulumParams,
    config: &SimConfig,
) -> Result<SystemState> {
    Integrator::new(params, config)?.step(state, input)
}
