//! C ABI over the quantizer math and the integer model replay path.
//!
//! Conventions:
//! - Every fallible function returns a [`CarfStatus`]; `CARF_STATUS_OK` means
//!   the out-parameters were written. On any other status the out-parameters
//!   are untouched and [`carf_last_error`] returns a human-readable message.
//! - Handles ([`CarfQuantizer`], [`CarfIntModel`]) are opaque; create them
//!   through this API and release them with the matching `_free` function.
//!   Passing a handle after freeing it, or a pointer/length pair that does
//!   not describe a live allocation, is undefined behavior exactly as it
//!   would be for any C library.
//! - Buffers are caller-allocated; lengths count elements, not bytes.

use carf::autodiff::Tape;
use carf::error::Error;
use carf::field::forward::{build_forward, QuantMode};
use carf::intmodel::{import_integer_model, IntModel};
use carf::metrics::psnr_from_mse;
use carf::quant::{QuantParams, QuantScheme, QuantizerState};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result of every fallible call in this API.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarfStatus {
    /// Success; out-parameters hold results.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument value was outside its domain.
    InvalidArgument = 2,
    /// Quantizer parameters were outside their domain.
    InvalidQuantizer = 3,
    /// A model file was missing, malformed, or inconsistent.
    BadContainer = 4,
    /// The operating system reported an I/O failure.
    IoError = 5,
    /// An unexpected internal failure; report it.
    Internal = 6,
}

/// Quantization grid family.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarfScheme {
    /// Zero-centered grid for weights.
    SignedSymmetric = 0,
    /// Zero-anchored non-negative grid for rectified activations.
    UnsignedSymmetric = 1,
    /// Shifted grid with a trainable ceiling.
    Asymmetric = 2,
}

impl CarfScheme {
    fn to_scheme(self) -> QuantScheme {
        match self {
            CarfScheme::SignedSymmetric => QuantScheme::SignedSymmetric,
            CarfScheme::UnsignedSymmetric => QuantScheme::UnsignedSymmetric,
            CarfScheme::Asymmetric => QuantScheme::Asymmetric,
        }
    }
}

/// One fake quantizer with a resolved grid. Opaque.
pub struct CarfQuantizer {
    params: QuantParams,
}

/// An imported integer model ready for replay. Opaque.
pub struct CarfIntModel {
    inner: IntModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn fail(status: CarfStatus, msg: &str) -> CarfStatus {
    set_error(msg);
    status
}

fn fail_with(err: &Error) -> CarfStatus {
    let status = match err {
        Error::ShapeMismatch(_) | Error::InvalidArgument(_) => CarfStatus::InvalidArgument,
        Error::InvalidQuantizer(_) => CarfStatus::InvalidQuantizer,
        Error::Container(_) | Error::Json(_) => CarfStatus::BadContainer,
        Error::Io(_) => CarfStatus::IoError,
        Error::Config(_) | Error::Diverged(_) | Error::Pipeline(_) | Error::Image(_) => {
            CarfStatus::Internal
        }
    };
    fail(status, &err.to_string())
}

/// Run `f` without letting a panic unwind across the C boundary.
fn guarded(f: impl FnOnce() -> CarfStatus) -> CarfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            fail(CarfStatus::Internal, &format!("internal panic: {msg}"))
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn carf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing this thread's most recent non-OK status. The pointer
/// stays valid until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn carf_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a quantizer. `bits` is the soft bitwidth (clamped to [2, 32] and
/// rounded for the grid), `range` the representable value-range width, and
/// `ceiling` the upper range bound — consulted only by the asymmetric
/// scheme, ignored otherwise.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn carf_quantizer_new(
    scheme: CarfScheme,
    bits: f64,
    range: f64,
    ceiling: f64,
    out: *mut *mut CarfQuantizer,
) -> CarfStatus {
    guarded(|| {
        if out.is_null() {
            return fail(CarfStatus::NullArgument, "out handle pointer is null");
        }
        let scheme = scheme.to_scheme();
        let v_max = (scheme == QuantScheme::Asymmetric).then_some(ceiling);
        let state = match QuantizerState::new(scheme, bits, range, v_max) {
            Ok(state) => state,
            Err(e) => return fail_with(&e),
        };
        let params = match state.derive() {
            Ok(p) => p,
            Err(e) => return fail_with(&e),
        };
        unsafe { out.write(Box::into_raw(Box::new(CarfQuantizer { params }))) };
        CarfStatus::Ok
    })
}

/// Release a quantizer. Null is a no-op.
///
/// # Safety
/// `q` must be null or a pointer returned by [`carf_quantizer_new`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn carf_quantizer_free(q: *mut CarfQuantizer) {
    if !q.is_null() {
        drop(unsafe { Box::from_raw(q) });
    }
}

/// Effective integer bitwidth of the quantizer's grid.
///
/// # Safety
/// `q` must be a live quantizer handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carf_quantizer_bits(
    q: *const CarfQuantizer,
    out: *mut u32,
) -> CarfStatus {
    guarded(|| {
        let (Some(q), false) = (unsafe { q.as_ref() }, out.is_null()) else {
            return fail(CarfStatus::NullArgument, "quantizer or out pointer is null");
        };
        unsafe { out.write(q.params.bits) };
        CarfStatus::Ok
    })
}

unsafe fn in_out<'a>(
    input: *const f32,
    output: *mut f32,
    len: usize,
) -> Option<(&'a [f32], &'a mut [f32])> {
    if input.is_null() || output.is_null() {
        return None;
    }
    Some(unsafe {
        (
            std::slice::from_raw_parts(input, len),
            std::slice::from_raw_parts_mut(output, len),
        )
    })
}

/// Quantize-dequantize `len` values: `output[i]` is the value the quantized
/// model would see for `input[i]`.
///
/// # Safety
/// `q` must be a live handle; `input` and `output` must each point to `len`
/// readable / writable floats (they may alias exactly).
#[no_mangle]
pub unsafe extern "C" fn carf_fake_quantize(
    q: *const CarfQuantizer,
    input: *const f32,
    len: usize,
    output: *mut f32,
) -> CarfStatus {
    guarded(|| {
        let Some(q) = (unsafe { q.as_ref() }) else {
            return fail(CarfStatus::NullArgument, "quantizer handle is null");
        };
        if len == 0 {
            return CarfStatus::Ok;
        }
        let Some((input, output)) = (unsafe { in_out(input, output, len) }) else {
            return fail(CarfStatus::NullArgument, "input or output buffer is null");
        };
        q.params.fake_quantize_slice(input, output);
        CarfStatus::Ok
    })
}

/// Quantize `len` values to integer codes on the quantizer's grid.
///
/// # Safety
/// `q` must be a live handle; `input` must hold `len` floats and `codes`
/// room for `len` 64-bit integers.
#[no_mangle]
pub unsafe extern "C" fn carf_quantize(
    q: *const CarfQuantizer,
    input: *const f32,
    len: usize,
    codes: *mut i64,
) -> CarfStatus {
    guarded(|| {
        let Some(q) = (unsafe { q.as_ref() }) else {
            return fail(CarfStatus::NullArgument, "quantizer handle is null");
        };
        if len == 0 {
            return CarfStatus::Ok;
        }
        if input.is_null() || codes.is_null() {
            return fail(CarfStatus::NullArgument, "input or code buffer is null");
        }
        let input = unsafe { std::slice::from_raw_parts(input, len) };
        let out = unsafe { std::slice::from_raw_parts_mut(codes, len) };
        for (o, code) in out.iter_mut().zip(q.params.integer_quantize_slice(input)) {
            *o = code;
        }
        CarfStatus::Ok
    })
}

/// Decode `len` integer codes back to values. Codes outside the grid are
/// rejected.
///
/// # Safety
/// `q` must be a live handle; `codes` must hold `len` integers and `output`
/// room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn carf_dequantize(
    q: *const CarfQuantizer,
    codes: *const i64,
    len: usize,
    output: *mut f32,
) -> CarfStatus {
    guarded(|| {
        let Some(q) = (unsafe { q.as_ref() }) else {
            return fail(CarfStatus::NullArgument, "quantizer handle is null");
        };
        if len == 0 {
            return CarfStatus::Ok;
        }
        if codes.is_null() || output.is_null() {
            return fail(CarfStatus::NullArgument, "code or output buffer is null");
        }
        let codes = unsafe { std::slice::from_raw_parts(codes, len) };
        let output = unsafe { std::slice::from_raw_parts_mut(output, len) };
        for (o, &code) in output.iter_mut().zip(codes) {
            match q.params.dequantize(code) {
                Ok(v) => *o = v as f32,
                Err(e) => return fail_with(&e),
            }
        }
        CarfStatus::Ok
    })
}

/// Open an integer model container exported by the training pipeline.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carf_int_model_open(
    path: *const c_char,
    out: *mut *mut CarfIntModel,
) -> CarfStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return fail(CarfStatus::NullArgument, "path or out pointer is null");
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => return fail(CarfStatus::InvalidArgument, "path is not valid UTF-8"),
        };
        match import_integer_model(std::path::Path::new(path)) {
            Ok(inner) => {
                unsafe { out.write(Box::into_raw(Box::new(CarfIntModel { inner }))) };
                CarfStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Release an integer model. Null is a no-op.
///
/// # Safety
/// `m` must be null or a pointer returned by [`carf_int_model_open`] that
/// has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn carf_int_model_free(m: *mut CarfIntModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Input coordinate dimension of the model: 2 (planar) or 3 (volumetric).
///
/// # Safety
/// `m` must be a live model handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carf_int_model_coord_dim(
    m: *const CarfIntModel,
    out: *mut u32,
) -> CarfStatus {
    guarded(|| {
        let (Some(m), false) = (unsafe { m.as_ref() }, out.is_null()) else {
            return fail(CarfStatus::NullArgument, "model or out pointer is null");
        };
        unsafe { out.write(m.inner.model.config.mode.coord_dim() as u32) };
        CarfStatus::Ok
    })
}

/// Average bitwidth over the model's quantized components.
///
/// # Safety
/// `m` must be a live model handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carf_int_model_fqr(
    m: *const CarfIntModel,
    out: *mut f64,
) -> CarfStatus {
    guarded(|| {
        let (Some(m), false) = (unsafe { m.as_ref() }, out.is_null()) else {
            return fail(CarfStatus::NullArgument, "model or out pointer is null");
        };
        match carf::metrics::registry_fqr(&m.inner.registry) {
            Ok(fqr) => {
                unsafe { out.write(fqr) };
                CarfStatus::Ok
            }
            Err(e) => fail_with(&e),
        }
    })
}

/// Evaluate the integer model at `count` points.
///
/// Planar models (coordinate dimension 2) read `count * 2` floats from
/// `positions` and ignore `directions`. Volumetric models read `count * 3`
/// floats from `positions` and require `count * 3` unit view directions.
/// `rgb` receives `count * 3` floats. For volumetric models, `sigma` (if
/// non-null) receives `count` densities; planar models ignore it.
///
/// # Safety
/// `m` must be a live model handle and every non-null buffer must match the
/// sizes above.
#[no_mangle]
pub unsafe extern "C" fn carf_int_model_forward(
    m: *const CarfIntModel,
    positions: *const f32,
    directions: *const f32,
    count: usize,
    rgb: *mut f32,
    sigma: *mut f32,
) -> CarfStatus {
    guarded(|| {
        let Some(m) = (unsafe { m.as_ref() }) else {
            return fail(CarfStatus::NullArgument, "model handle is null");
        };
        if count == 0 {
            return fail(CarfStatus::InvalidArgument, "count must be at least 1");
        }
        if positions.is_null() || rgb.is_null() {
            return fail(CarfStatus::NullArgument, "position or rgb buffer is null");
        }
        let dim = m.inner.model.config.mode.coord_dim();
        let positions = unsafe { std::slice::from_raw_parts(positions, count * dim) };
        let dirs = if dim == 3 {
            if directions.is_null() {
                return fail(
                    CarfStatus::NullArgument,
                    "volumetric models require view directions",
                );
            }
            Some(unsafe { std::slice::from_raw_parts(directions, count * 3) })
        } else {
            None
        };

        let mut tape = Tape::new();
        let handles = match build_forward(
            &mut tape,
            &m.inner.model,
            &m.inner.registry,
            QuantMode::PreQuantizedParams,
            positions,
            dirs,
        ) {
            Ok(h) => h,
            Err(e) => return fail_with(&e),
        };
        let rgb_out = unsafe { std::slice::from_raw_parts_mut(rgb, count * 3) };
        rgb_out.copy_from_slice(tape.value(handles.rgb).data());
        if let (Some(node), false) = (handles.sigma, sigma.is_null()) {
            let sigma_out = unsafe { std::slice::from_raw_parts_mut(sigma, count) };
            sigma_out.copy_from_slice(tape.value(node).data());
        }
        CarfStatus::Ok
    })
}

/// Peak signal-to-noise ratio between two buffers in [0, 1] units, capped
/// at 99 dB.
///
/// # Safety
/// `a` and `b` must each hold `len` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn carf_psnr(
    a: *const f32,
    b: *const f32,
    len: usize,
    out: *mut f64,
) -> CarfStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(CarfStatus::NullArgument, "buffer or out pointer is null");
        }
        if len == 0 {
            return fail(CarfStatus::InvalidArgument, "psnr over zero samples");
        }
        let a = unsafe { std::slice::from_raw_parts(a, len) };
        let b = unsafe { std::slice::from_raw_parts(b, len) };
        let mse = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            / len as f64;
        unsafe { out.write(psnr_from_mse(mse)) };
        CarfStatus::Ok
    })
}
