//! C ABI for `mmdflow`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`,
//! `*_from_json` or `*_build` functions and released with the matching
//! `*_free`. Every fallible function returns an [`MmdflowStatus`]; on failure
//! a message is available from [`mmdflow_last_error`] on the same thread.
//! Panics never unwind into the caller; they are reported as
//! [`MmdflowStatus::Panic`].
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use mmdflow::feature_maps::{FeatureMap, MapSpec};
use mmdflow::flow::{build_first_order, build_flow, invert_cloud, push_forward, second_order_for, ResidualFlow};
use mmdflow::measures::{mmd_squared, ParticleCloud};
use mmdflow::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmdflowStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Config = 4,
    Certification = 5,
    Schedule = 6,
    Lipschitz = 7,
    Inversion = 8,
    Numeric = 9,
    Io = 10,
    Json = 11,
    Panic = 12,
}

pub const MMDFLOW_SCHEDULE_FIRST_ORDER: u32 = 0;
pub const MMDFLOW_SCHEDULE_SECOND_ORDER: u32 = 1;

/// Opaque feature map handle.
pub struct MmdflowMap {
    inner: Arc<FeatureMap>,
}

/// Opaque particle cloud handle.
pub struct MmdflowCloud {
    inner: ParticleCloud,
}

/// Opaque residual flow handle.
pub struct MmdflowFlow {
    inner: ResidualFlow,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MmdflowStatus {
    match err {
        Error::DimensionMismatch { .. } => MmdflowStatus::DimensionMismatch,
        Error::Input(_) => MmdflowStatus::InvalidArgument,
        Error::Config(_) => MmdflowStatus::Config,
        Error::Certification(_) => MmdflowStatus::Certification,
        Error::Schedule(_) => MmdflowStatus::Schedule,
        Error::Lipschitz { .. } => MmdflowStatus::Lipschitz,
        Error::Inversion { .. } => MmdflowStatus::Inversion,
        Error::Numeric(_) => MmdflowStatus::Numeric,
        Error::Io(_) => MmdflowStatus::Io,
        Error::Json(_) => MmdflowStatus::Json,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmdflowStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmdflowStatus::Ok,
        Ok(Err(Failure::Null(name))) => {
            set_error(format!("null pointer: {name}"));
            MmdflowStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            MmdflowStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            MmdflowStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(name))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, name: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn copy_into(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(Failure::Lib(Error::DimensionMismatch {
            expected: src.len(),
            got: dst.len(),
        }));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmdflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a feature map from its JSON description (`{"kind": "affine", ...}`).
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_map_from_json(json: *const c_char, out: *mut *mut MmdflowMap) -> MmdflowStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec: MapSpec = serde_json::from_str(str_arg(json, "json")?).map_err(Error::from)?;
        let map = spec.build()?;
        *out = Box::into_raw(Box::new(MmdflowMap { inner: Arc::new(map) }));
        Ok(())
    })
}

/// Writes the input and output dimensions `d` and `d_phi`.
///
/// # Safety
/// `map` must be a live handle; `dim_in` and `dim_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_map_dims(map: *const MmdflowMap, dim_in: *mut usize, dim_out: *mut usize) -> MmdflowStatus {
    guard(|| {
        let m = &deref(map, "map")?.inner;
        *out_ptr(dim_in, "dim_in")? = m.dim_in();
        *out_ptr(dim_out, "dim_out")? = m.dim_out();
        Ok(())
    })
}

/// Evaluates `phi(z)`; `z_len` must equal `d` and `out_len` must equal `d_phi`.
///
/// # Safety
/// `z` must point to `z_len` doubles and `out` to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_map_eval(
    map: *const MmdflowMap,
    z: *const f64,
    z_len: usize,
    out: *mut f64,
    out_len: usize,
) -> MmdflowStatus {
    guard(|| {
        let m = &deref(map, "map")?.inner;
        let v = m.eval(slice_arg(z, z_len, "z")?)?;
        copy_into(v.as_slice(), slice_out(out, out_len, "out")?)
    })
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_map_free(map: *mut MmdflowMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Copies `n * dim` row-major coordinates into a new cloud.
///
/// # Safety
/// `points` must point to `n * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_cloud_new(
    points: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut MmdflowCloud,
) -> MmdflowStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Failure::Arg("n * dim overflows".into()))?;
        let cloud = ParticleCloud::new(slice_arg(points, len, "points")?.to_vec(), dim)?;
        *out = Box::into_raw(Box::new(MmdflowCloud { inner: cloud }));
        Ok(())
    })
}

/// Writes the particle count and dimension.
///
/// # Safety
/// `cloud` must be a live handle; `n` and `dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_cloud_shape(cloud: *const MmdflowCloud, n: *mut usize, dim: *mut usize) -> MmdflowStatus {
    guard(|| {
        let c = &deref(cloud, "cloud")?.inner;
        *out_ptr(n, "n")? = c.len();
        *out_ptr(dim, "dim")? = c.dim();
        Ok(())
    })
}

/// Copies the row-major coordinates; `out_len` must equal `n * dim`.
///
/// # Safety
/// `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_cloud_points(cloud: *const MmdflowCloud, out: *mut f64, out_len: usize) -> MmdflowStatus {
    guard(|| {
        let c = &deref(cloud, "cloud")?.inner;
        copy_into(c.as_slice(), slice_out(out, out_len, "out")?)
    })
}

/// # Safety
/// `cloud` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_cloud_free(cloud: *mut MmdflowCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Squared MMD between two clouds under `map`.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_mmd_squared(
    q: *const MmdflowCloud,
    p: *const MmdflowCloud,
    map: *const MmdflowMap,
    out: *mut f64,
) -> MmdflowStatus {
    guard(|| {
        let v = mmd_squared(&deref(q, "q")?.inner, &deref(p, "p")?.inner, &deref(map, "map")?.inner)?;
        *out_ptr(out, "out")? = v;
        Ok(())
    })
}

/// Greedily builds a flow from `q` toward `p` until the squared MMD ratio
/// reaches `delta`. `schedule` is `MMDFLOW_SCHEDULE_FIRST_ORDER` (which
/// doubles `safety_c` up to 1024 times its value until the target is met)
/// or `MMDFLOW_SCHEDULE_SECOND_ORDER` (which ignores `safety_c`). On success
/// `out_flow` receives the flow; `out_ratio`, if not null, receives the
/// achieved ratio.
///
/// # Safety
/// All handles must be live; `out_flow` must be writable; `out_ratio` must be
/// null or writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_build(
    q: *const MmdflowCloud,
    p: *const MmdflowCloud,
    map: *const MmdflowMap,
    schedule: u32,
    delta: f64,
    safety_c: f64,
    stop_tol: f64,
    out_flow: *mut *mut MmdflowFlow,
    out_ratio: *mut f64,
) -> MmdflowStatus {
    guard(|| {
        let q = &deref(q, "q")?.inner;
        let p = &deref(p, "p")?.inner;
        let map = deref(map, "map")?.inner.clone();
        let out = out_ptr(out_flow, "out_flow")?;
        let (flow, ratio) = match schedule {
            MMDFLOW_SCHEDULE_FIRST_ORDER => {
                let run = build_first_order(q, p, map, delta, safety_c, safety_c * 1024.0, stop_tol)?;
                (run.flow, run.report.achieved_ratio)
            }
            MMDFLOW_SCHEDULE_SECOND_ORDER => {
                let s = second_order_for(q, p, &map, delta)?;
                let (flow, report, _) = build_flow(q, p, map, &s, stop_tol)?;
                (flow, report.achieved_ratio)
            }
            other => return Err(Failure::Arg(format!("unknown schedule {other}"))),
        };
        if let Some(r) = out_ratio.as_mut() {
            *r = ratio;
        }
        *out = Box::into_raw(Box::new(MmdflowFlow { inner: flow }));
        Ok(())
    })
}

/// Number of blocks in the flow.
///
/// # Safety
/// `flow` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_len(flow: *const MmdflowFlow, out: *mut usize) -> MmdflowStatus {
    guard(|| {
        *out_ptr(out, "out")? = deref(flow, "flow")?.inner.len();
        Ok(())
    })
}

/// Pushes a cloud through every block.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_push(
    flow: *const MmdflowFlow,
    cloud: *const MmdflowCloud,
    out: *mut *mut MmdflowCloud,
) -> MmdflowStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pushed = push_forward(&deref(flow, "flow")?.inner, &deref(cloud, "cloud")?.inner)?;
        *out = Box::into_raw(Box::new(MmdflowCloud { inner: pushed }));
        Ok(())
    })
}

/// Inverts the flow block by block with fixed-point iteration to residual
/// `tol` per block, at most `max_iter` iterations each.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_invert(
    flow: *const MmdflowFlow,
    cloud: *const MmdflowCloud,
    tol: f64,
    max_iter: usize,
    out: *mut *mut MmdflowCloud,
) -> MmdflowStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if !(tol > 0.0) {
            return Err(Failure::Arg(format!("tol must be positive, got {tol}")));
        }
        let (back, _) = invert_cloud(&deref(flow, "flow")?.inner, &deref(cloud, "cloud")?.inner, tol, max_iter)?;
        *out = Box::into_raw(Box::new(MmdflowCloud { inner: back }));
        Ok(())
    })
}

/// Serializes the flow; free the string with [`mmdflow_string_free`].
///
/// # Safety
/// `flow` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_to_json(flow: *const MmdflowFlow, out: *mut *mut c_char) -> MmdflowStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let json = deref(flow, "flow")?.inner.to_json()?;
        *out = CString::new(json)
            .map_err(|_| Failure::Arg("flow JSON contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// Loads a flow written by [`mmdflow_flow_to_json`], re-checking every block.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_from_json(json: *const c_char, out: *mut *mut MmdflowFlow) -> MmdflowStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let flow = ResidualFlow::from_json(str_arg(json, "json")?)?;
        *out = Box::into_raw(Box::new(MmdflowFlow { inner: flow }));
        Ok(())
    })
}

/// # Safety
/// `flow` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_flow_free(flow: *mut MmdflowFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mmdflow_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
