//! C ABI over the `dsmyolo` crate.
//!
//! Every function returns a [`DsmStatus`]; on failure the message is kept
//! per thread and read with [`dsm_last_error`]. Models are opaque
//! [`DsmModel`] handles owned by the caller and released with
//! [`dsm_model_free`]. All numeric buffers are `f32`, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use dsmyolo::harness::letterbox;
use dsmyolo::model::{decode, load_checkpoint, save_checkpoint, Model, ModelConfig, ScaleSpec};
use dsmyolo::ssm::{
    selective_scan_blocked, selective_scan_seq, Discretization, Projection, SsmParams,
};
use dsmyolo::{Error, Tensor};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Format = 5,
    Config = 6,
    MissingParam = 7,
    Io = 8,
    /// The output buffer held fewer entries than were produced.
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsmDiscretization {
    Zoh = 0,
    Taylor = 1,
}

/// One detection in original-image pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsmDetection {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
    pub score: f32,
    pub class_id: u32,
}

/// Opaque detector handle.
pub struct DsmModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DsmStatus {
    match e {
        Error::Shape { .. } => DsmStatus::Shape,
        Error::InvalidArgument { .. } => DsmStatus::InvalidArgument,
        Error::NonFinite { .. } => DsmStatus::NonFinite,
        Error::Format(_) => DsmStatus::Format,
        Error::Config(_) => DsmStatus::Config,
        Error::MissingParam(_) => DsmStatus::MissingParam,
        Error::Io { .. } => DsmStatus::Io,
    }
}

struct Fail(DsmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: DsmStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, records any error or panic, and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DsmStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| p.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            set_error(&format!("internal panic: {msg}"));
            DsmStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(DsmStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DsmStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const DsmModel) -> Result<&'a Model<f32>, Fail> {
    non_null(m, "model")?;
    Ok(&(*m).inner)
}

unsafe fn input<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    non_null(p, what)?;
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    non_null(out, what)?;
    out.write(value);
    Ok(())
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dsm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn dsm_status_name(status: DsmStatus) -> *const c_char {
    let s: &'static CStr = match status {
        DsmStatus::Ok => c"ok",
        DsmStatus::NullPointer => c"null pointer",
        DsmStatus::InvalidArgument => c"invalid argument",
        DsmStatus::Shape => c"shape mismatch",
        DsmStatus::NonFinite => c"non-finite value",
        DsmStatus::Format => c"format error",
        DsmStatus::Config => c"config error",
        DsmStatus::MissingParam => c"missing parameter",
        DsmStatus::Io => c"io error",
        DsmStatus::BufferTooSmall => c"buffer too small",
        DsmStatus::Panic => c"internal panic",
    };
    s.as_ptr()
}

/// Build a freshly initialized model. `scale` is one of "N", "S", "M", "T".
///
/// # Safety
/// `scale` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_new(
    scale: *const c_char,
    num_classes: u32,
    seed: u64,
    out: *mut *mut DsmModel,
) -> DsmStatus {
    guard(|| {
        non_null(out, "out")?;
        let spec = ScaleSpec::from_name(c_str(scale, "scale")?, num_classes as usize)?;
        let inner = Model::build(&ModelConfig::new(spec), seed)?;
        put(out, Box::into_raw(Box::new(DsmModel { inner })), "out")
    })
}

/// Load a checkpoint directory written by the CLI or [`dsm_model_save`].
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_load(dir: *const c_char, out: *mut *mut DsmModel) -> DsmStatus {
    guard(|| {
        non_null(out, "out")?;
        let inner = load_checkpoint::<f32>(&PathBuf::from(c_str(dir, "dir")?))?;
        put(out, Box::into_raw(Box::new(DsmModel { inner })), "out")
    })
}

/// # Safety
/// `model` must come from this library; `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_save(model: *const DsmModel, dir: *const c_char) -> DsmStatus {
    guard(|| {
        Ok(save_checkpoint(
            model_ref(model)?,
            &PathBuf::from(c_str(dir, "dir")?),
        )?)
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_free(model: *mut DsmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_param_count(model: *const DsmModel, out: *mut u64) -> DsmStatus {
    guard(|| put(out, model_ref(model)?.count_params(), "out"))
}

/// Analytic FLOPs for one `height × width` image.
///
/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_flops(
    model: *const DsmModel,
    height: usize,
    width: usize,
    out: *mut u64,
) -> DsmStatus {
    guard(|| put(out, model_ref(model)?.count_flops(height, width)?, "out"))
}

/// # Safety
/// `model` must come from this library and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_num_classes(model: *const DsmModel, out: *mut u32) -> DsmStatus {
    guard(|| put(out, model_ref(model)?.num_classes() as u32, "out"))
}

/// Detect objects in one planar RGB image `[3, height, width]` with values
/// in [0, 1]. The image is letterboxed to `input_size` (a multiple of 32)
/// and boxes are mapped back to the original frame.
///
/// At most `capacity` detections, highest score first, are written to
/// `dets`; `count` receives the number produced. If that exceeds
/// `capacity` the call returns `BUFFER_TOO_SMALL` after filling the buffer.
///
/// # Safety
/// `image` must hold `3 · height · width` floats, `dets` room for
/// `capacity` entries (may be null when `capacity` is 0), `count` writable.
#[no_mangle]
pub unsafe extern "C" fn dsm_model_detect(
    model: *const DsmModel,
    image: *const f32,
    height: usize,
    width: usize,
    input_size: usize,
    conf: f32,
    max_dets: usize,
    dets: *mut DsmDetection,
    capacity: usize,
    count: *mut usize,
) -> DsmStatus {
    guard(|| {
        let model = model_ref(model)?;
        non_null(count, "count")?;
        if capacity > 0 {
            non_null(dets, "dets")?;
        }
        if input_size == 0 || !input_size.is_multiple_of(32) {
            return Err(fail(
                DsmStatus::InvalidArgument,
                format!("input_size {input_size} is not a positive multiple of 32"),
            ));
        }
        let len = 3usize
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| fail(DsmStatus::InvalidArgument, "image too large"))?;
        let img = Tensor::new(&[3, height, width], input(image, len, "image")?.to_vec())?;
        let (boxed, lb) = letterbox(&img, input_size)?;
        let fwd = model.forward(&boxed.reshape(&[1, 3, input_size, input_size])?)?;
        let found = decode(
            &fwd.maps,
            0,
            conf as f64,
            max_dets,
            (input_size, input_size),
        )?;
        let (w, h) = (width as f64, height as f64);
        let mapped: Vec<DsmDetection> = found
            .iter()
            .filter_map(|d| {
                let b = lb.to_original(d.bbox);
                let b = [
                    b[0].clamp(0.0, w),
                    b[1].clamp(0.0, h),
                    b[2].clamp(0.0, w),
                    b[3].clamp(0.0, h),
                ];
                (b[2] > b[0] && b[3] > b[1]).then_some(DsmDetection {
                    x1: b[0] as f32,
                    y1: b[1] as f32,
                    x2: b[2] as f32,
                    y2: b[3] as f32,
                    score: d.score as f32,
                    class_id: d.class as u32,
                })
            })
            .collect();
        count.write(mapped.len());
        let n = mapped.len().min(capacity);
        if n > 0 {
            ptr::copy_nonoverlapping(mapped.as_ptr(), dets, n);
        }
        if mapped.len() > capacity {
            return Err(fail(
                DsmStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", mapped.len()),
            ));
        }
        Ok(())
    })
}

/// Diagonal selective scan over one sequence of `len` steps with
/// `channels` channels and `state` state entries per channel.
///
/// Shapes: `x`, `delta` are `[len, channels]`; `a` is `[channels, state]`;
/// `b`, `p` are `[len, state]` when `per_step` is nonzero, else
/// `[channels, state]`; `q` is `[channels]`. Writes `y` `[len, channels]`
/// and, if `h_final` is non-null, the final state `[channels, state]`.
/// `block_len` 0 selects the sequential kernel, otherwise the blocked one.
///
/// # Safety
/// Every pointer must reference a buffer of the stated size.
#[no_mangle]
pub unsafe extern "C" fn dsm_selective_scan(
    len: usize,
    channels: usize,
    state: usize,
    x: *const f32,
    delta: *const f32,
    a: *const f32,
    b: *const f32,
    p: *const f32,
    q: *const f32,
    per_step: i32,
    discretization: DsmDiscretization,
    block_len: usize,
    y: *mut f32,
    h_final: *mut f32,
) -> DsmStatus {
    guard(|| {
        non_null(y, "y")?;
        let (l, d, n) = (len, channels, state);
        let t = |ptr: *const f32, shape: &[usize], what: &str| -> Result<Tensor<f32>, Fail> {
            Ok(Tensor::new(
                shape,
                input(ptr, shape.iter().product(), what)?.to_vec(),
            )?)
        };
        let proj_shape = if per_step != 0 { [l, n] } else { [d, n] };
        let proj = |ptr, what| -> Result<Projection<f32>, Fail> {
            let v = t(ptr, &proj_shape, what)?;
            Ok(if per_step != 0 {
                Projection::PerStep(v)
            } else {
                Projection::Shared(v)
            })
        };
        let params = SsmParams {
            a: t(a, &[d, n], "a")?,
            b: proj(b, "b")?,
            p: proj(p, "p")?,
            q: input(q, d, "q")?.to_vec(),
            delta: t(delta, &[l, d], "delta")?,
            discretization: match discretization {
                DsmDiscretization::Zoh => Discretization::Zoh,
                DsmDiscretization::Taylor => Discretization::Taylor,
            },
        };
        let x = t(x, &[l, d], "x")?;
        let r = if block_len == 0 {
            selective_scan_seq(&x, &params)?
        } else {
            selective_scan_blocked(&x, &params, block_len)?
        };
        ptr::copy_nonoverlapping(r.y.data().as_ptr(), y, l * d);
        if !h_final.is_null() {
            ptr::copy_nonoverlapping(r.h_final.data().as_ptr(), h_final, d * n);
        }
        Ok(())
    })
}
