//! C interface to the reachgen arm model, muscle solver, minimum-jerk
//! generator and trained decoders.
//!
//! Every function returns an [`RgStatus`]. On failure, a description is
//! available from [`rg_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reachgen::arm::{ArmError, ArmParams, Vec2};
use reachgen::config::AppConfig;
use reachgen::dataset::ReachPair;
use reachgen::eval::simulate_endpoint;
use reachgen::minjerk::MinJerkSpec;
use reachgen::muscle::{solve_activation_qp, ActivationTrajectory, MuscleError};
use reachgen::nn::{NnError, ReachDecoder};
use reachgen::{MUSCLES, TRAJ_DIM};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Unreachable = 3,
    Singular = 4,
    Infeasible = 5,
    NumericalBlowup = 6,
    Io = 7,
    Format = 8,
    Panic = 9,
}

/// Arm parameters.
pub struct RgArm(ArmParams);

/// Trained 4-50-150-300 decoder with its input normalization.
pub struct RgDecoder(ReachDecoder);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: RgStatus, msg: impl Into<String>) -> RgStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting panics into `RgStatus::Panic`.
fn guard(f: impl FnOnce() -> RgStatus) -> RgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(RgStatus::Panic, msg)
        }
    }
}

fn arm_status(e: &ArmError) -> RgStatus {
    match e {
        ArmError::Unreachable { .. } => RgStatus::Unreachable,
        ArmError::SingularConfiguration { .. } => RgStatus::Singular,
        ArmError::NumericalBlowup { .. } => RgStatus::NumericalBlowup,
        ArmError::Domain { .. } | ArmError::InvalidStep { .. } => RgStatus::InvalidArgument,
    }
}

fn nn_status(e: &NnError) -> RgStatus {
    match e {
        NnError::Io(_) => RgStatus::Io,
        NnError::Format(_) | NnError::VersionMismatch { .. } => RgStatus::Format,
        _ => RgStatus::InvalidArgument,
    }
}

unsafe fn read<const N: usize>(p: *const f64) -> Option<[f64; N]> {
    if p.is_null() {
        None
    } else {
        Some(std::array::from_fn(|i| *p.add(i)))
    }
}

unsafe fn write(p: *mut f64, values: &[f64]) {
    ptr::copy_nonoverlapping(values.as_ptr(), p, values.len());
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an arm with the default parameters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn rg_arm_new_default(out: *mut *mut RgArm) -> RgStatus {
    guard(|| {
        if out.is_null() {
            return fail(RgStatus::NullPointer, "out is null");
        }
        *out = Box::into_raw(Box::new(RgArm(ArmParams::default())));
        RgStatus::Ok
    })
}

/// Creates an arm from the `[arm]` section of a TOML config file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rg_arm_from_config(path: *const c_char, out: *mut *mut RgArm) -> RgStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(RgStatus::NullPointer, "path or out is null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(RgStatus::InvalidArgument, "path is not UTF-8");
        };
        match AppConfig::load(Path::new(path)) {
            Ok((cfg, _)) => {
                if let Some(d) = cfg.errors().first() {
                    return fail(RgStatus::InvalidArgument, d.to_string());
                }
                *out = Box::into_raw(Box::new(RgArm(cfg.arm)));
                RgStatus::Ok
            }
            Err(e @ reachgen::config::ConfigError::Io { .. }) => fail(RgStatus::Io, e.to_string()),
            Err(e) => fail(RgStatus::Format, e.to_string()),
        }
    })
}

/// Releases an arm handle. Null is ignored.
///
/// # Safety
/// `arm` must come from an `rg_arm_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rg_arm_free(arm: *mut RgArm) {
    if !arm.is_null() {
        drop(Box::from_raw(arm));
    }
}

/// Hand position (m) for joint angles `q` (rad). Both arrays hold 2 values.
///
/// # Safety
/// `arm` must be a live handle; `q` and `p_out` must point to 2 doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_forward_kinematics(arm: *const RgArm, q: *const f64, p_out: *mut f64) -> RgStatus {
    guard(|| {
        let (Some(arm), Some(q)) = (arm.as_ref(), read::<2>(q)) else {
            return fail(RgStatus::NullPointer, "arm or q is null");
        };
        if p_out.is_null() {
            return fail(RgStatus::NullPointer, "p_out is null");
        }
        let p = arm.0.forward_kinematics(&Vec2::new(q[0], q[1]));
        write(p_out, p.as_slice());
        RgStatus::Ok
    })
}

/// Joint angles reaching hand position `p`; `elbow_sign` is +1 or -1.
///
/// # Safety
/// `arm` must be a live handle; `p` and `q_out` must point to 2 doubles.
#[no_mangle]
pub unsafe extern "C" fn rg_inverse_kinematics(
    arm: *const RgArm,
    p: *const f64,
    elbow_sign: f64,
    q_out: *mut f64,
) -> RgStatus {
    guard(|| {
        let (Some(arm), Some(p)) = (arm.as_ref(), read::<2>(p)) else {
            return fail(RgStatus::NullPointer, "arm or p is null");
        };
        if q_out.is_null() {
            return fail(RgStatus::NullPointer, "q_out is null");
        }
        if elbow_sign != 1.0 && elbow_sign != -1.0 {
            return fail(RgStatus::InvalidArgument, "elbow_sign must be +1 or -1");
        }
        match arm.0.inverse_kinematics(&Vec2::new(p[0], p[1]), elbow_sign) {
            Ok(q) => {
                write(q_out, q.as_slice());
                RgStatus::Ok
            }
            Err(e) => fail(arm_status(&e), e.to_string()),
        }
    })
}

/// Minimum-norm muscle activations (6 values in [0, 1]) producing joint
/// torque `tau` (2 values, N m).
///
/// # Safety
/// `arm` must be a live handle, `tau` must point to 2 doubles and
/// `activations_out` to 6.
#[no_mangle]
pub unsafe extern "C" fn rg_solve_activations(
    arm: *const RgArm,
    tau: *const f64,
    activations_out: *mut f64,
) -> RgStatus {
    guard(|| {
        let (Some(arm), Some(tau)) = (arm.as_ref(), read::<2>(tau)) else {
            return fail(RgStatus::NullPointer, "arm or tau is null");
        };
        if activations_out.is_null() {
            return fail(RgStatus::NullPointer, "activations_out is null");
        }
        match solve_activation_qp(&arm.0.gain_matrix(), &Vec2::new(tau[0], tau[1])) {
            Ok(sol) => {
                write(activations_out, &sol.activations.to_array());
                RgStatus::Ok
            }
            Err(e @ (MuscleError::Infeasible(..) | MuscleError::InfeasibleStep { .. })) => {
                fail(RgStatus::Infeasible, e.to_string())
            }
            Err(e) => fail(RgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Minimum-jerk hand positions from `p0` to `pf` over `duration` seconds at
/// `t_k = (k + 1) duration / n`. Writes `2 n` doubles (x, y interleaved).
///
/// # Safety
/// `p0` and `pf` must point to 2 doubles and `positions_out` to `2 n`.
#[no_mangle]
pub unsafe extern "C" fn rg_minjerk_positions(
    p0: *const f64,
    pf: *const f64,
    duration: f64,
    n: usize,
    positions_out: *mut f64,
) -> RgStatus {
    guard(|| {
        let (Some(p0), Some(pf)) = (read::<2>(p0), read::<2>(pf)) else {
            return fail(RgStatus::NullPointer, "p0 or pf is null");
        };
        if positions_out.is_null() {
            return fail(RgStatus::NullPointer, "positions_out is null");
        }
        let spec = match MinJerkSpec::new(Vec2::new(p0[0], p0[1]), Vec2::new(pf[0], pf[1]), duration, n) {
            Ok(s) => s,
            Err(e) => return fail(RgStatus::InvalidArgument, e.to_string()),
        };
        match spec.sample() {
            Ok(samples) => {
                let flat: Vec<f64> = samples.iter().flat_map(|h| [h.p.x, h.p.y]).collect();
                write(positions_out, &flat);
                RgStatus::Ok
            }
            Err(e) => fail(RgStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Final hand position after driving the arm from rest at hand position
/// `start` with 300 activations (50 steps x 6 muscles, time-major).
///
/// # Safety
/// `arm` must be a live handle; `start` and `hand_out` must point to 2
/// doubles and `activations` to 300.
#[no_mangle]
pub unsafe extern "C" fn rg_simulate_reach(
    arm: *const RgArm,
    start: *const f64,
    activations: *const f64,
    hand_out: *mut f64,
) -> RgStatus {
    guard(|| {
        let (Some(arm), Some(start), Some(act)) =
            (arm.as_ref(), read::<2>(start), read::<TRAJ_DIM>(activations))
        else {
            return fail(RgStatus::NullPointer, "arm, start or activations is null");
        };
        if hand_out.is_null() {
            return fail(RgStatus::NullPointer, "hand_out is null");
        }
        let traj = match ActivationTrajectory::from_flat(&act) {
            Ok(t) => t,
            Err(e) => return fail(RgStatus::InvalidArgument, e.to_string()),
        };
        let pair = ReachPair::new(start[0], start[1], start[0], start[1]);
        match simulate_endpoint(&arm.0, &pair, &traj) {
            Ok(p) => {
                write(hand_out, p.as_slice());
                RgStatus::Ok
            }
            Err(e) => fail(arm_status(&e), e.to_string()),
        }
    })
}

/// Loads a decoder weights file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn rg_decoder_load(path: *const c_char, out: *mut *mut RgDecoder) -> RgStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(RgStatus::NullPointer, "path or out is null");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(RgStatus::InvalidArgument, "path is not UTF-8");
        };
        match ReachDecoder::load(Path::new(path)) {
            Ok(d) => {
                *out = Box::into_raw(Box::new(RgDecoder(d)));
                RgStatus::Ok
            }
            Err(e) => fail(nn_status(&e), e.to_string()),
        }
    })
}

/// Releases a decoder handle. Null is ignored.
///
/// # Safety
/// `decoder` must come from `rg_decoder_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rg_decoder_free(decoder: *mut RgDecoder) {
    if !decoder.is_null() {
        drop(Box::from_raw(decoder));
    }
}

/// Predicts 300 activations (time-major) for the reach
/// `pair = {x0, y0, xf, yf}` (m).
///
/// # Safety
/// `decoder` must be a live handle, `pair` must point to 4 doubles and
/// `activations_out` to 300.
#[no_mangle]
pub unsafe extern "C" fn rg_decoder_predict(
    decoder: *const RgDecoder,
    pair: *const f64,
    activations_out: *mut f64,
) -> RgStatus {
    guard(|| {
        let (Some(dec), Some(p)) = (decoder.as_ref(), read::<4>(pair)) else {
            return fail(RgStatus::NullPointer, "decoder or pair is null");
        };
        if activations_out.is_null() {
            return fail(RgStatus::NullPointer, "activations_out is null");
        }
        if p.iter().any(|v| !v.is_finite()) {
            return fail(RgStatus::InvalidArgument, "pair has non-finite entries");
        }
        let act = dec.0.predict(&ReachPair::new(p[0], p[1], p[2], p[3]));
        write(activations_out, &act.flatten());
        RgStatus::Ok
    })
}

/// Number of doubles in one activation trajectory.
#[no_mangle]
pub extern "C" fn rg_trajectory_len() -> usize {
    TRAJ_DIM
}

/// Number of muscles.
#[no_mangle]
pub extern "C" fn rg_muscle_count() -> usize {
    MUSCLES
}
