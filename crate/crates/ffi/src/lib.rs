//! C ABI over the localization engine.
//!
//! Handles are opaque; every fallible call returns an [`SklStatus`] and, on
//! failure, leaves a message retrievable with [`skl_last_error`] on the same
//! thread. Strings handed out by the library must be released with
//! [`skl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use sketchloc::service::{Engine, LocalizeRequest, ServiceError};
use sketchloc::Error;

/// A loaded, read-only model. Safe to share across threads for
/// [`skl_localize_json`] and [`skl_model_digest`].
pub struct SklModel {
    engine: Engine,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SklStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Checkpoint = 4,
    Validation = 5,
    Decode = 6,
    NotFound = 7,
    Internal = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: SklStatus, msg: &str) -> SklStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> SklStatus {
    match e {
        Error::Io { .. } => SklStatus::Io,
        Error::Checkpoint(_) | Error::DigestMismatch { .. } => SklStatus::Checkpoint,
        Error::Validation { .. } | Error::NotDivisible { .. } => SklStatus::Validation,
        Error::Decode(_) => SklStatus::Decode,
        _ => SklStatus::Internal,
    }
}

fn service_status(e: &ServiceError) -> SklStatus {
    match e.code.as_str() {
        "validation_error" | "bad_request" => SklStatus::Validation,
        "decode_error" => SklStatus::Decode,
        "not_found" => SklStatus::NotFound,
        _ => SklStatus::Internal,
    }
}

fn guarded(f: impl FnOnce() -> SklStatus) -> SklStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == SklStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(SklStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, SklStatus> {
    if p.is_null() {
        return Err(fail(SklStatus::NullArgument, &format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SklStatus::InvalidUtf8, &format!("{name} is not valid UTF-8")))
}

fn hand_out(s: String, out: *mut *mut c_char) -> SklStatus {
    match CString::new(s) {
        Ok(c) => {
            // SAFETY: callers check `out` for null before getting here.
            unsafe { *out = c.into_raw() };
            SklStatus::Ok
        }
        Err(_) => fail(SklStatus::Internal, "output contains a NUL byte"),
    }
}

/// Loads a checkpoint. On success `*out` owns a model to be released with
/// [`skl_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skl_model_load(path: *const c_char, out: *mut *mut SklModel) -> SklStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SklStatus::NullArgument, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match Engine::open(Path::new(path), None) {
            Ok(engine) => {
                *out = Box::into_raw(Box::new(SklModel { engine }));
                SklStatus::Ok
            }
            Err(e) => fail(status_of(&e), &e.to_string()),
        }
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`skl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn skl_model_free(model: *mut SklModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Architecture digest of the loaded model, as a new string.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn skl_model_digest(model: *const SklModel, out: *mut *mut c_char) -> SklStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(SklStatus::NullArgument, "model or out is null");
        }
        hand_out((*model).engine.digest().to_string(), out)
    })
}

/// Runs one localization. `request_json` uses the HTTP `/localize` body
/// schema (the image must be inline base64 PNG); `*out` receives the response
/// JSON. On a request error the message names the offending field.
///
/// # Safety
/// `model` must be a live handle, `request_json` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn skl_localize_json(
    model: *const SklModel,
    request_json: *const c_char,
    out: *mut *mut c_char,
) -> SklStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(SklStatus::NullArgument, "model or out is null");
        }
        *out = ptr::null_mut();
        let text = match str_arg(request_json, "request_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let req: LocalizeRequest = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return fail(SklStatus::Validation, &format!("request: {e}")),
        };
        match (*model).engine.localize(&req) {
            Ok(resp) => match serde_json::to_string(&resp) {
                Ok(s) => hand_out(s, out),
                Err(e) => fail(SklStatus::Internal, &e.to_string()),
            },
            Err(e) => fail(service_status(&e), &e.to_string()),
        }
    })
}

/// Frees a string returned by this library; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn skl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn skl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn skl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
