use std::ffi::{c_char, CStr, CString};
use std::ptr;

use fedplane_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = fp_last_error();
    assert!(!p.is_null(), "an error message is set");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn open() -> *mut FpPlane {
    let cfg = c("[password_hash]\nmemory_kib = 8\niterations = 1\nparallelism = 1\n");
    let mut plane = ptr::null_mut();
    assert_eq!(unsafe { fp_plane_open(cfg.as_ptr(), &mut plane) }, FpStatus::Ok);
    assert!(!plane.is_null());
    plane
}

struct Reply {
    status: u16,
    body: String,
    content_type: Option<String>,
}

fn request(plane: *const FpPlane, method: &str, path: &str, bearer: Option<&str>, body: Option<&str>) -> Reply {
    let (m, p) = (c(method), c(path));
    let bearer = bearer.map(c);
    let mut resp = ptr::null_mut();
    let (bp, bl) = body.map_or((ptr::null(), 0), |b| (b.as_ptr(), b.len()));
    let st = unsafe {
        fp_plane_request(plane, m.as_ptr(), p.as_ptr(), bearer.as_ref().map_or(ptr::null(), |b| b.as_ptr()), bp, bl, &mut resp)
    };
    assert_eq!(st, FpStatus::Ok);
    unsafe {
        let mut len = 0usize;
        let data = fp_response_body(resp, &mut len);
        let body = String::from_utf8(std::slice::from_raw_parts(data, len).to_vec()).unwrap();
        let name = c("content-type");
        let header = fp_response_header(resp, name.as_ptr());
        let content_type = (!header.is_null()).then(|| CStr::from_ptr(header).to_str().unwrap().to_string());
        fp_string_free(header);
        let reply = Reply {
            status: fp_response_status(resp),
            body,
            content_type,
        };
        fp_response_free(resp);
        reply
    }
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(fp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn login_and_query_through_the_abi() {
    let plane = open();
    let (u, cred, role) = (c("admin"), c("admin-credential"), c("admin"));
    assert_eq!(unsafe { fp_plane_add_user(plane, u.as_ptr(), cred.as_ptr(), role.as_ptr()) }, FpStatus::Ok);
    assert_eq!(unsafe { fp_plane_add_user(plane, u.as_ptr(), cred.as_ptr(), role.as_ptr()) }, FpStatus::InvalidArgument);
    assert!(last_error().starts_with("DUPLICATE"), "{}", last_error());
    let bad_role = c("wizard");
    let other = c("other");
    assert_eq!(unsafe { fp_plane_add_user(plane, other.as_ptr(), cred.as_ptr(), bad_role.as_ptr()) }, FpStatus::InvalidArgument);

    let health = request(plane, "GET", "/v1/health", None, None);
    assert_eq!(health.status, 200);
    assert_eq!(health.content_type.as_deref(), Some("application/json"));
    let login = request(plane, "POST", "/v1/auth/login", None, Some(r#"{"username":"admin","credential":"admin-credential"}"#));
    assert_eq!(login.status, 200, "{}", login.body);
    let token = login.body.split("\"token\":\"").nth(1).unwrap().split('"').next().unwrap().to_string();
    let lab = request(plane, "POST", "/v1/labs", Some(&token), Some(r#"{"name":"ABI Lab"}"#));
    assert_eq!(lab.status, 201, "{}", lab.body);
    let labs = request(plane, "GET", "/v1/labs", Some(&token), None);
    assert!(labs.body.contains("ABI Lab"));
    let denied = request(plane, "GET", "/v1/labs", None, None);
    assert_eq!(denied.status, 401);
    assert!(denied.body.contains("UNAUTHORIZED"));
    assert_eq!(unsafe { fp_plane_sweep(plane) }, FpStatus::Ok);
    unsafe { fp_plane_close(plane) };
}

#[test]
fn argument_errors() {
    let mut plane = ptr::null_mut();
    let bad = c("not = [toml");
    assert_eq!(unsafe { fp_plane_open(bad.as_ptr(), &mut plane) }, FpStatus::InvalidArgument);
    assert!(plane.is_null());
    assert!(last_error().starts_with("VALIDATION"));
    assert_eq!(unsafe { fp_plane_open(ptr::null(), ptr::null_mut()) }, FpStatus::NullArgument);

    let plane = open();
    assert!(fp_last_error().is_null(), "success clears the error");
    let mut resp = ptr::null_mut();
    let (m, p) = (c("PATCH"), c("/v1/health"));
    let st = unsafe { fp_plane_request(plane, m.as_ptr(), p.as_ptr(), ptr::null(), ptr::null(), 0, &mut resp) };
    assert_eq!(st, FpStatus::InvalidArgument);
    assert!(resp.is_null());
    let invalid = [0xffu8, 0];
    let st = unsafe { fp_plane_request(plane, invalid.as_ptr() as *const c_char, p.as_ptr(), ptr::null(), ptr::null(), 0, &mut resp) };
    assert_eq!(st, FpStatus::InvalidUtf8);
    let st = unsafe { fp_plane_request(ptr::null(), m.as_ptr(), p.as_ptr(), ptr::null(), ptr::null(), 0, &mut resp) };
    assert_eq!(st, FpStatus::NullArgument);
    unsafe {
        assert_eq!(fp_response_status(ptr::null()), 0);
        fp_response_free(ptr::null_mut());
        fp_string_free(ptr::null_mut());
        fp_plane_close(plane);
        fp_plane_close(ptr::null_mut());
    }
}

#[test]
fn harness_reports_through_the_abi() {
    let spec = c("labs = 1\nnodes_per_testbed = 2\nsession_count = 2\ndeploy_ms = 500\n");
    let fmt = c("csv");
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { fp_harness_run(spec.as_ptr(), fmt.as_ptr(), &mut out) }, FpStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { fp_string_free(out) };
    assert!(text.starts_with("index,node,latency_s\n"));
    assert_eq!(text.lines().count(), 3);

    let bad = c("labs = 0\n");
    assert_eq!(unsafe { fp_harness_run(bad.as_ptr(), ptr::null(), &mut out) }, FpStatus::InvalidArgument);
    assert!(out.is_null());
    let odd = c("yaml");
    assert_eq!(unsafe { fp_harness_run(spec.as_ptr(), odd.as_ptr(), &mut out) }, FpStatus::InvalidArgument);
    assert!(last_error().starts_with("BAD_FORMAT"));
}
