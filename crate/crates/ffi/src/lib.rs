//! C ABI over `srlab`.
//!
//! Every object is an opaque handle created by a `*_new`/`*_load` function and
//! released by the matching `*_free`. Fallible calls return an [`SrlabStatus`];
//! the message of the most recent failure on the calling thread is available
//! through [`srlab_last_error`]. States are 6 doubles
//! `(theta1, theta2, theta3, dtheta1, dtheta2, dtheta3)`, inputs 3 torques.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::OnceLock;

use srlab::cli::load_model;
use srlab::corrective::{corrective_control, synthesize_gain, FeedbackGain, LqrWeights, RecoveryOptions};
use srlab::dynamics::{
    forward_kinematics, saturate, total_energy, ControlInput, Integrator, PendulumParams, SimConfig, SystemState,
    INPUT_DIM, STATE_DIM,
};
use srlab::region::SafeRegionModel;
use srlab::safety::{SafetyOracle, StateRanges};
use srlab::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Simulation = 4,
    Synthesis = 5,
    Io = 6,
    Format = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&Error> for SrlabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidParameter(_) => SrlabStatus::InvalidArgument,
            Error::SingularConfiguration { .. } | Error::SimulationDivergence { .. } => SrlabStatus::Simulation,
            Error::SynthesisFailure(_) => SrlabStatus::Synthesis,
            Error::Io { .. } => SrlabStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) | Error::TomlDe(_) => SrlabStatus::Format,
            _ => SrlabStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SrlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(SrlabStatus::from(&e), e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrlabStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("panic: {msg}"));
            SrlabStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SrlabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn read_state(ptr: *const f64) -> Result<SystemState, Failure> {
    if ptr.is_null() {
        return Err(null("state"));
    }
    let mut s = [0.0; STATE_DIM];
    std::ptr::copy_nonoverlapping(ptr, s.as_mut_ptr(), STATE_DIM);
    Ok(SystemState(s))
}

unsafe fn write_out<T>(ptr: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    ptr.write(value);
    Ok(())
}

unsafe fn write_slice(ptr: *mut f64, values: &[f64], what: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), ptr, values.len());
    Ok(())
}

/// Checks `out` and clears it so a failed constructor leaves null behind.
unsafe fn clear_out<T>(out: *mut *mut T) -> Result<(), Failure> {
    write_out(out, ptr::null_mut(), "out")
}

unsafe fn boxed_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    write_out(out, Box::into_raw(Box::new(value)), "out")
}

unsafe fn free_handle<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn srlab_version() -> *const c_char {
    static V: OnceLock<CString> = OnceLock::new();
    V.get_or_init(|| CString::new(srlab::config::VERSION).unwrap_or_default()).as_ptr()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// always NUL-terminated when `len > 0`). Returns the length the full message
/// needs including the terminator, 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn srlab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            return 0;
        };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len) - 1;
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Three-link pendulum with unit links and masses `delta` times nominal,
/// integrated with RK4 at 1 ms over 10 ms control periods.
pub struct SrlabPlant {
    params: PendulumParams,
    integrator: Integrator,
}

/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn srlab_plant_new(delta: f64, out: *mut *mut SrlabPlant) -> SrlabStatus {
    guard(|| {
        clear_out(out)?;
        let params = PendulumParams::real(delta);
        let integrator = Integrator::new(&params, &SimConfig::default())?;
        boxed_out(out, SrlabPlant { params, integrator })
    })
}

/// # Safety
/// `plant` must be null or a handle from [`srlab_plant_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srlab_plant_free(plant: *mut SrlabPlant) {
    free_handle(plant)
}

/// Advances one control period holding `input` (saturated to the actuator
/// limits) constant. `next` receives 6 doubles and may alias `state`.
///
/// # Safety
/// `state` must point to 6 doubles, `input` to 3 and `next` to 6 writable ones.
#[no_mangle]
pub unsafe extern "C" fn srlab_plant_step(
    plant: *const SrlabPlant,
    state: *const f64,
    input: *const f64,
    next: *mut f64,
) -> SrlabStatus {
    guard(|| {
        let plant = handle(plant, "plant")?;
        let x = read_state(state)?;
        if input.is_null() {
            return Err(null("input"));
        }
        let mut u = [0.0; INPUT_DIM];
        std::ptr::copy_nonoverlapping(input, u.as_mut_ptr(), INPUT_DIM);
        let u = saturate(&ControlInput(u), &plant.params);
        let x1 = plant.integrator.step(&x, &u)?;
        write_slice(next, &x1.0, "next")
    })
}

/// Kinetic plus potential energy, potential measured from the hanging configuration.
///
/// # Safety
/// `state` must point to 6 doubles and `energy` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn srlab_plant_energy(
    plant: *const SrlabPlant,
    state: *const f64,
    energy: *mut f64,
) -> SrlabStatus {
    guard(|| {
        let plant = handle(plant, "plant")?;
        let x = read_state(state)?;
        write_out(energy, total_energy(&x, &plant.params), "energy")
    })
}

/// Cartesian position of the tip of link 3.
///
/// # Safety
/// `state` must point to 6 doubles, `x` and `y` to writable doubles.
#[no_mangle]
pub unsafe extern "C" fn srlab_plant_tip(
    plant: *const SrlabPlant,
    state: *const f64,
    x: *mut f64,
    y: *mut f64,
) -> SrlabStatus {
    guard(|| {
        let plant = handle(plant, "plant")?;
        let s = read_state(state)?;
        let (px, py) = forward_kinematics(&s, &plant.params);
        write_out(x, px, "x")?;
        write_out(y, py, "y")
    })
}

/// LQR corrective controller designed on the nominal plant.
pub struct SrlabController {
    params: PendulumParams,
    gain: FeedbackGain,
}

/// `q_diag` (6 doubles) and `r_diag` (3 doubles) may each be null for the
/// defaults diag(10, 10, 10, 1, 1, 1) and 0.1 I.
///
/// # Safety
/// Non-null weight pointers must point to 6 and 3 doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn srlab_controller_new(
    q_diag: *const f64,
    r_diag: *const f64,
    out: *mut *mut SrlabController,
) -> SrlabStatus {
    guard(|| {
        clear_out(out)?;
        let mut weights = LqrWeights::default();
        if !q_diag.is_null() {
            std::ptr::copy_nonoverlapping(q_diag, weights.q_diag.as_mut_ptr(), STATE_DIM);
        }
        if !r_diag.is_null() {
            std::ptr::copy_nonoverlapping(r_diag, weights.r_diag.as_mut_ptr(), INPUT_DIM);
        }
        let params = PendulumParams::nominal();
        let gain = synthesize_gain(&params, &weights)?;
        boxed_out(out, SrlabController { params, gain })
    })
}

/// # Safety
/// `controller` must be null or a handle from [`srlab_controller_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srlab_controller_free(controller: *mut SrlabController) {
    free_handle(controller)
}

/// Saturated torques `-K x`.
///
/// # Safety
/// `state` must point to 6 doubles and `input` to 3 writable ones.
#[no_mangle]
pub unsafe extern "C" fn srlab_controller_feedback(
    controller: *const SrlabController,
    state: *const f64,
    input: *mut f64,
) -> SrlabStatus {
    guard(|| {
        let c = handle(controller, "controller")?;
        let x = read_state(state)?;
        write_slice(input, &corrective_control(&x, &c.gain, &c.params).0, "input")
    })
}

/// The 3 x 6 gain, row major.
///
/// # Safety
/// `gain` must point to 18 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn srlab_controller_gain(controller: *const SrlabController, gain: *mut f64) -> SrlabStatus {
    guard(|| {
        let c = handle(controller, "controller")?;
        let flat: Vec<f64> = c.gain.k.iter().flatten().copied().collect();
        write_slice(gain, &flat, "gain")
    })
}

/// Safety labeling by corrective-recovery rollout on a plant with mass factor
/// `delta`, using the default controller, 10 s horizon and tolerance 0.01.
pub struct SrlabOracle {
    oracle: SafetyOracle,
}

/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn srlab_oracle_new(delta: f64, out: *mut *mut SrlabOracle) -> SrlabStatus {
    guard(|| {
        clear_out(out)?;
        let params = PendulumParams::real(delta);
        params.validate()?;
        let gain = synthesize_gain(&params.as_nominal(), &LqrWeights::default())?;
        let oracle = SafetyOracle::new(
            params,
            gain,
            SimConfig::default(),
            RecoveryOptions::default(),
            StateRanges::default(),
        )?;
        boxed_out(out, SrlabOracle { oracle })
    })
}

/// # Safety
/// `oracle` must be null or a handle from [`srlab_oracle_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srlab_oracle_free(oracle: *mut SrlabOracle) {
    free_handle(oracle)
}

/// Writes 1 (safe) or 0 to `label`.
///
/// # Safety
/// `state` must point to 6 doubles and `label` to a writable byte.
#[no_mangle]
pub unsafe extern "C" fn srlab_oracle_label(
    oracle: *const SrlabOracle,
    state: *const f64,
    label: *mut u8,
) -> SrlabStatus {
    guard(|| {
        let o = handle(oracle, "oracle")?;
        let x = read_state(state)?;
        write_out(label, o.oracle.label(&x), "label")
    })
}

/// Safe-region model written by `srlab build-region` (`model.json`).
pub struct SrlabModel {
    model: SafeRegionModel,
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn srlab_model_load(path: *const c_char, out: *mut *mut SrlabModel) -> SrlabStatus {
    guard(|| {
        clear_out(out)?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(SrlabStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let model = load_model(Path::new(path))?;
        boxed_out(out, SrlabModel { model })
    })
}

/// # Safety
/// `model` must be null or a handle from [`srlab_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srlab_model_free(model: *mut SrlabModel) {
    free_handle(model)
}

/// Dimension of the simplified state space; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn srlab_model_output_dim(model: *const SrlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.embedding.output_dim())
}

/// Simplified state of `state`, `len` must equal the output dimension.
///
/// # Safety
/// `state` must point to 6 doubles and `y` to `len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn srlab_model_map_state(
    model: *const SrlabModel,
    state: *const f64,
    y: *mut f64,
    len: usize,
) -> SrlabStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let x = read_state(state)?;
        let v = m.model.map_state(&x);
        if len < v.len() {
            return Err(Failure(
                SrlabStatus::BufferTooSmall,
                format!("output dimension is {}, buffer holds {len}", v.len()),
            ));
        }
        write_slice(y, &v, "y")
    })
}

/// Safety assessment at a simplified state of `len` coordinates.
///
/// # Safety
/// `y` must point to `len` doubles and `gamma` to a writable double.
#[no_mangle]
pub unsafe extern "C" fn srlab_model_gamma(
    model: *const SrlabModel,
    y: *const f64,
    len: usize,
    gamma: *mut f64,
) -> SrlabStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if y.is_null() {
            return Err(null("y"));
        }
        let dim = m.model.embedding.output_dim();
        if len != dim {
            return Err(Failure(
                SrlabStatus::InvalidArgument,
                format!("output dimension is {dim}, got {len} coordinates"),
            ));
        }
        let y = std::slice::from_raw_parts(y, len);
        write_out(gamma, m.model.gamma(y), "gamma")
    })
}

/// Writes 1 if the state is predicted safe, 0 otherwise.
///
/// # Safety
/// `state` must point to 6 doubles and `label` to a writable byte.
#[no_mangle]
pub unsafe extern "C" fn srlab_model_predict(
    model: *const SrlabModel,
    state: *const f64,
    label: *mut u8,
) -> SrlabStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let x = read_state(state)?;
        write_out(label, m.model.predict(&x), "label")
    })
}
