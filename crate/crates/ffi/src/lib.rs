//! C ABI over the fedplane control plane.
//!
//! Handles are opaque pointers created by `fp_*_open`/`fp_plane_request`
//! and released with the matching `*_free`/`*_close` call. Every fallible
//! function returns an [`FpStatus`]; on failure the calling thread's
//! [`fp_last_error`] holds a message of the form `CODE: detail`.
//!
//! Strings passed in are NUL-terminated UTF-8. Strings handed out are owned
//! by the caller and released with [`fp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use fedplane::config::PlaneConfig;
use fedplane::context::Role;
use fedplane::error::{Error, ErrorCode};
use fedplane::gateway::{ApiRequest, ApiResponse, Gateway, Method};
use fedplane::harness::{self, ReportFormat, ScenarioSpec};
use fedplane::ControlPlane;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FpStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// An argument was well-formed but not acceptable (unknown method or
    /// role, duplicate user, malformed spec, ...).
    InvalidArgument = 3,
    Storage = 4,
    /// The harness ran but at least one check failed. The report is
    /// still written.
    ScenarioFailed = 5,
    Internal = 6,
    Panic = 7,
}

/// An open control plane with its request gateway.
pub struct FpPlane {
    gateway: Gateway,
}

/// A response returned by [`fp_plane_request`].
pub struct FpResponse {
    inner: ApiResponse,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: FpStatus, msg: &str) -> FpStatus {
    set_error(msg);
    status
}

fn from_error(err: &Error) -> FpStatus {
    let status = match err.code {
        ErrorCode::Storage => FpStatus::Storage,
        ErrorCode::ScenarioFailed => FpStatus::ScenarioFailed,
        ErrorCode::Internal => FpStatus::Internal,
        _ => FpStatus::InvalidArgument,
    };
    fail(status, &format!("{}: {}", err.code, err.message))
}

/// Runs `f`, mapping a panic to [`FpStatus::Panic`] so it never unwinds
/// across the C boundary.
fn guard(f: impl FnOnce() -> FpStatus) -> FpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(FpStatus::Panic, &format!("PANIC: {msg}"))
        }
    }
}

/// # Safety
/// `p` must be null or a NUL-terminated string valid for reads.
unsafe fn arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, FpStatus> {
    if p.is_null() {
        return Err(fail(FpStatus::NullArgument, &format!("NULL_ARGUMENT: {name}")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FpStatus::InvalidUtf8, &format!("INVALID_UTF8: {name}")))
}

/// # Safety
/// As [`arg`], but null yields `None`.
unsafe fn opt_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, FpStatus> {
    if p.is_null() {
        Ok(None)
    } else {
        arg(p, name).map(Some)
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("NUL bytes replaced").into_raw()
}

macro_rules! tri {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(status) => return status,
        }
    };
}

/// Library version as a static string. Never free it.
#[no_mangle]
pub extern "C" fn fp_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version has no interior NUL"),
    };
    VERSION.as_ptr()
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next `fp_*` call on the same thread.
#[no_mangle]
pub extern "C" fn fp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn fp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens a control plane. `config_toml` may be null for defaults; an empty
/// `db_path` keeps all state in memory.
///
/// # Safety
/// `config_toml` must be null or a valid string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fp_plane_open(config_toml: *const c_char, out: *mut *mut FpPlane) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return fail(FpStatus::NullArgument, "NULL_ARGUMENT: out");
        }
        *out = ptr::null_mut();
        let cfg = match tri!(opt_arg(config_toml, "config_toml")) {
            Some(text) => match PlaneConfig::from_toml(text) {
                Ok(c) => c,
                Err(e) => return from_error(&e),
            },
            None => PlaneConfig::default(),
        };
        let plane = match ControlPlane::builder(cfg).build() {
            Ok(p) => p,
            Err(e) => return from_error(&e),
        };
        *out = Box::into_raw(Box::new(FpPlane {
            gateway: Gateway::new(Arc::new(plane)),
        }));
        FpStatus::Ok
    })
}

/// Closes a plane opened by [`fp_plane_open`]. Null is ignored.
///
/// # Safety
/// `plane` must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fp_plane_close(plane: *mut FpPlane) {
    if !plane.is_null() {
        drop(Box::from_raw(plane));
    }
}

/// Creates an account. `role` is `ADMIN`, `OWNER` or `EXPERIMENTER`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fp_plane_add_user(
    plane: *const FpPlane,
    username: *const c_char,
    credential: *const c_char,
    role: *const c_char,
) -> FpStatus {
    guard(|| {
        let Some(plane) = plane.as_ref() else {
            return fail(FpStatus::NullArgument, "NULL_ARGUMENT: plane");
        };
        let username = tri!(arg(username, "username"));
        let credential = tri!(arg(credential, "credential"));
        let role = tri!(arg(role, "role"));
        let Some(role) = Role::parse(role) else {
            return fail(FpStatus::InvalidArgument, &format!("VALIDATION: unknown role {role:?}"));
        };
        match plane.gateway.plane().auth().create_user(username, credential, role) {
            Ok(_) => FpStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

/// Runs one maintenance pass (liveness, command timeouts, sessions,
/// reservations).
///
/// # Safety
/// `plane` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fp_plane_sweep(plane: *const FpPlane) -> FpStatus {
    guard(|| {
        let Some(plane) = plane.as_ref() else {
            return fail(FpStatus::NullArgument, "NULL_ARGUMENT: plane");
        };
        match plane.gateway.plane().sweep() {
            Ok(_) => FpStatus::Ok,
            Err(e) => from_error(&e),
        }
    })
}

/// Sends one API request through the gateway. `bearer` and `body` may be
/// null. A request the API rejects still returns [`FpStatus::Ok`] with an
/// error response; inspect [`fp_response_status`].
///
/// # Safety
/// `body` must be valid for `body_len` bytes when non-null; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_plane_request(
    plane: *const FpPlane,
    method: *const c_char,
    path: *const c_char,
    bearer: *const c_char,
    body: *const u8,
    body_len: usize,
    out: *mut *mut FpResponse,
) -> FpStatus {
    guard(|| {
        if out.is_null() {
            return fail(FpStatus::NullArgument, "NULL_ARGUMENT: out");
        }
        *out = ptr::null_mut();
        let Some(plane) = plane.as_ref() else {
            return fail(FpStatus::NullArgument, "NULL_ARGUMENT: plane");
        };
        let method_name = tri!(arg(method, "method"));
        let Some(method) = Method::parse(method_name) else {
            return fail(FpStatus::InvalidArgument, &format!("BAD_REQUEST: unsupported method {method_name:?}"));
        };
        let path = tri!(arg(path, "path"));
        let mut req = ApiRequest::new(method, path);
        if let Some(token) = tri!(opt_arg(bearer, "bearer")) {
            req = req.bearer(token);
        }
        if !body.is_null() && body_len > 0 {
            req.body = std::slice::from_raw_parts(body, body_len).to_vec();
            if req.body.first().is_some_and(|b| *b == b'{' || *b == b'[') {
                req = req.header("content-type", "application/json");
            }
        }
        let inner = plane.gateway.handle(&req);
        *out = Box::into_raw(Box::new(FpResponse { inner }));
        FpStatus::Ok
    })
}

/// HTTP-style status code of a response.
///
/// # Safety
/// `resp` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fp_response_status(resp: *const FpResponse) -> u16 {
    resp.as_ref().map_or(0, |r| r.inner.status)
}

/// Borrowed pointer to the response body; `len` receives its length.
/// Valid until the response is freed.
///
/// # Safety
/// `resp` must be valid; `len` writable or null.
#[no_mangle]
pub unsafe extern "C" fn fp_response_body(resp: *const FpResponse, len: *mut usize) -> *const u8 {
    let Some(r) = resp.as_ref() else {
        if !len.is_null() {
            *len = 0;
        }
        return ptr::null();
    };
    if !len.is_null() {
        *len = r.inner.body.len();
    }
    r.inner.body.as_ptr()
}

/// Value of a response header as an owned string, or null when absent.
///
/// # Safety
/// `resp` and `name` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fp_response_header(resp: *const FpResponse, name: *const c_char) -> *mut c_char {
    let (Some(r), Ok(name)) = (resp.as_ref(), arg(name, "name")) else {
        return ptr::null_mut();
    };
    r.inner.get_header(name).map_or(ptr::null_mut(), |v| into_c_string(v.to_string()))
}

/// Releases a response. Null is ignored.
///
/// # Safety
/// `resp` must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fp_response_free(resp: *mut FpResponse) {
    if !resp.is_null() {
        drop(Box::from_raw(resp));
    }
}

/// Runs a harness scenario given as TOML and renders the report in
/// `format` (`table`, `csv` or `json`). On [`FpStatus::Ok`] and
/// [`FpStatus::ScenarioFailed`] `out_report` receives the rendered report.
///
/// # Safety
/// String arguments must be valid; `out_report` writable.
#[no_mangle]
pub unsafe extern "C" fn fp_harness_run(
    spec_toml: *const c_char,
    format: *const c_char,
    out_report: *mut *mut c_char,
) -> FpStatus {
    guard(|| {
        if out_report.is_null() {
            return fail(FpStatus::NullArgument, "NULL_ARGUMENT: out_report");
        }
        *out_report = ptr::null_mut();
        let spec = match ScenarioSpec::from_toml(tri!(arg(spec_toml, "spec_toml"))) {
            Ok(s) => s,
            Err(e) => return from_error(&e),
        };
        let format: ReportFormat = match tri!(opt_arg(format, "format")).unwrap_or("table").parse() {
            Ok(f) => f,
            Err(e) => return from_error(&e),
        };
        let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => return fail(FpStatus::Internal, &format!("INTERNAL: runtime: {e}")),
        };
        let report = match runtime.block_on(harness::run_scenario_report(&spec)) {
            Ok(r) => r,
            Err(e) => return from_error(&e),
        };
        let text = match harness::render(&report, format) {
            Ok(t) => t,
            Err(e) => return from_error(&e),
        };
        *out_report = into_c_string(text);
        match report.first_failure() {
            None => FpStatus::Ok,
            Some(check) => fail(FpStatus::ScenarioFailed, &format!("SCENARIO_FAILED: {}: {}", check.name, check.detail)),
        }
    })
}
