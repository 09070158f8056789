//! C ABI over `stcr`. Models and clips are opaque heap handles released with
//! their `_free` function. Every fallible call returns a [`StcrStatus`]; the
//! message for the last failure on the calling thread is available through
//! [`stcr_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stcr::augment::intra_video_mixup_with;
use stcr::gradcheck::full_loss_gradient_check;
use stcr::io::{load_checkpoint, read_clip, save_checkpoint, write_clip};
use stcr::train::center_crop;
use stcr::transform::{stt_apply_clip, stt_compose, stt_inverse};
use stcr::{BackboneConfig, ModelParams, StcrError, TrainConfig, TrainState, TransformId, VideoClip};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StcrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    Io = 5,
    Numeric = 6,
    Config = 7,
    DegenerateInput = 8,
    Panic = 9,
}

/// Backbone and channel-head parameters.
pub struct StcrModel {
    params: ModelParams,
}

/// A C×T×H×W video clip of doubles.
pub struct StcrClip {
    clip: VideoClip,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(StcrStatus, String);

impl From<StcrError> for Failure {
    fn from(e: StcrError) -> Self {
        let status = match &e {
            StcrError::Dimension { .. } => StcrStatus::Dimension,
            StcrError::Argument(_) => StcrStatus::InvalidArgument,
            StcrError::Numeric(_) => StcrStatus::Numeric,
            StcrError::DegenerateInput(_) => StcrStatus::DegenerateInput,
            StcrError::Config(_) => StcrStatus::Config,
            StcrError::Format { .. } => StcrStatus::Format,
            StcrError::Io { .. } => StcrStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> StcrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StcrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            StcrStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(StcrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(StcrStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn config_arg(json: *const c_char) -> Result<BackboneConfig, Failure> {
    if json.is_null() {
        return Ok(BackboneConfig::default());
    }
    let text = CStr::from_ptr(json)
        .to_str()
        .map_err(|_| Failure(StcrStatus::InvalidArgument, "config is not UTF-8".into()))?;
    let config: BackboneConfig =
        serde_json::from_str(text).map_err(|e| Failure(StcrStatus::Config, e.to_string()))?;
    config.feature_shape()?;
    Ok(config)
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

fn transform_arg(flip: u8, rotation: u8) -> Result<TransformId, Failure> {
    Ok(TransformId::from_pair(flip, rotation)?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len` bytes) and returns the full message length excluding
/// the terminator; 0 when there is no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn stcr_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stcr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Fresh Xavier-initialized parameters, identical to a run seeded with `seed`. `config_json` is a backbone config
/// document, or null for the default backbone.
///
/// # Safety
/// `config_json` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_new(config_json: *const c_char, seed: u64, out: *mut *mut StcrModel) -> StcrStatus {
    guard(|| {
        let config = config_arg(config_json)?;
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let params = TrainState::initial(&config, &train)?.params;
        write_out(out, Box::into_raw(Box::new(StcrModel { params })))
    })
}

/// Loads a checkpoint written for the given backbone config (null: default).
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_load(
    path: *const c_char,
    config_json: *const c_char,
    out: *mut *mut StcrModel,
) -> StcrStatus {
    guard(|| {
        let path = path_arg(path)?;
        let config = config_arg(config_json)?;
        let params = load_checkpoint(&path, &config)?;
        write_out(out, Box::into_raw(Box::new(StcrModel { params })))
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_save(model: *const StcrModel, path: *const c_char) -> StcrStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        save_checkpoint(&path_arg(path)?, &model.params)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_free(model: *mut StcrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total scalar parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_num_params(model: *const StcrModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.num_params())
}

/// Writes C′, T′, H′, W′ into `dims[0..4]`.
///
/// # Safety
/// `dims` must point to 4 writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_feature_shape(model: *const StcrModel, dims: *mut usize) -> StcrStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let shape = model.params.feature_shape();
        ptr::copy_nonoverlapping(shape.as_ptr(), dims, 4);
        Ok(())
    })
}

/// The C′×T′ spatial max-pool descriptor of `clip`, row-major into `out`.
/// Clips larger than the backbone input are center-cropped. `len` must equal C′·T′.
///
/// # Safety
/// `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn stcr_model_descriptor(
    model: *const StcrModel,
    clip: *const StcrClip,
    out: *mut f64,
    len: usize,
) -> StcrStatus {
    guard(|| {
        let model = borrow(model, "model")?;
        let clip = borrow(clip, "clip")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let [_, t, h, w] = model.params.config.input_shape;
        let d = model.params.descriptor(&center_crop(&clip.clip, [t, h, w])?)?;
        if d.numel() != len {
            return Err(Failure(
                StcrStatus::Dimension,
                format!("descriptor has {} values, buffer holds {len}", d.numel()),
            ));
        }
        ptr::copy_nonoverlapping(d.data().as_ptr(), out, len);
        Ok(())
    })
}

/// Copies `dims[0]·dims[1]·dims[2]·dims[3]` doubles from `data` into a new clip.
///
/// # Safety
/// `dims` must point to 4 values and `data` to their product of doubles.
#[no_mangle]
pub unsafe extern "C" fn stcr_clip_new(dims: *const usize, data: *const f64, out: *mut *mut StcrClip) -> StcrStatus {
    guard(|| {
        if dims.is_null() || data.is_null() {
            return Err(null("dims or data"));
        }
        let d = [*dims, *dims.add(1), *dims.add(2), *dims.add(3)];
        let n = d.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| {
            Failure(StcrStatus::InvalidArgument, "clip size overflows".into())
        })?;
        let values = std::slice::from_raw_parts(data, n).to_vec();
        let clip = VideoClip::from_vec(d, values)?;
        write_out(out, Box::into_raw(Box::new(StcrClip { clip })))
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_clip_read(path: *const c_char, out: *mut *mut StcrClip) -> StcrStatus {
    guard(|| {
        let clip = read_clip(&path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(StcrClip { clip })))
    })
}

/// # Safety
/// `clip` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stcr_clip_write(clip: *const StcrClip, path: *const c_char) -> StcrStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        write_clip(&path_arg(path)?, &clip.clip)?;
        Ok(())
    })
}

/// Writes C, T, H, W into `dims[0..4]`.
///
/// # Safety
/// `dims` must point to 4 writable `size_t`.
#[no_mangle]
pub unsafe extern "C" fn stcr_clip_dims(clip: *const StcrClip, dims: *mut usize) -> StcrStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        ptr::copy_nonoverlapping(clip.clip.dims().as_ptr(), dims, 4);
        Ok(())
    })
}

/// Borrowed pointer to the clip's row-major values, valid until the clip is
/// freed; null for a null handle.
///
/// # Safety
/// `clip` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stcr_clip_data(clip: *const StcrClip) -> *const f64 {
    clip.as_ref().map_or(ptr::null(), |c| c.clip.data().as_ptr())
}

/// # Safety
/// `clip` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stcr_clip_free(clip: *mut StcrClip) {
    if !clip.is_null() {
        drop(Box::from_raw(clip));
    }
}

/// Applies the transform `(flip, rotation)` to every frame; `flip` is 0 none,
/// 1 left-right, 2 temporal, 3 both; `rotation` counts counter-clockwise
/// quarter turns.
///
/// # Safety
/// `clip` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_transform_apply(
    clip: *const StcrClip,
    flip: u8,
    rotation: u8,
    out: *mut *mut StcrClip,
) -> StcrStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        let t = transform_arg(flip, rotation)?;
        let clip = stt_apply_clip(&clip.clip, t)?;
        write_out(out, Box::into_raw(Box::new(StcrClip { clip })))
    })
}

/// Index (0..16) of the element acting like `a` followed by `b`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_transform_compose(a: u8, b: u8, out: *mut u8) -> StcrStatus {
    guard(|| {
        let (a, b) = (index_arg(a)?, index_arg(b)?);
        write_out(out, stt_compose(a, b).index() as u8)
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_transform_inverse(t: u8, out: *mut u8) -> StcrStatus {
    guard(|| write_out(out, stt_inverse(index_arg(t)?).index() as u8))
}

fn index_arg(i: u8) -> Result<TransformId, Failure> {
    if i >= 16 {
        return Err(Failure(StcrStatus::InvalidArgument, format!("transform index {i} out of range 0..16")));
    }
    Ok(TransformId::from_index(i as usize))
}

/// Blends every frame with frame `k`: `(1 - lambda) x_t + lambda x_k`.
///
/// # Safety
/// `clip` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_intra_mixup(
    clip: *const StcrClip,
    lambda: f64,
    k: usize,
    out: *mut *mut StcrClip,
) -> StcrStatus {
    guard(|| {
        let clip = borrow(clip, "clip")?;
        let clip = intra_video_mixup_with(&clip.clip, lambda, k)?;
        write_out(out, Box::into_raw(Box::new(StcrClip { clip })))
    })
}

/// Finite-difference check of the full loss on the default backbone; writes
/// the largest relative error.
///
/// # Safety
/// `out_error` must be writable.
#[no_mangle]
pub unsafe extern "C" fn stcr_gradcheck(seed: u64, eps: f64, out_error: *mut f64) -> StcrStatus {
    guard(|| {
        if !(eps > 0.0) {
            return Err(Failure(StcrStatus::InvalidArgument, "eps must be positive".into()));
        }
        let err = full_loss_gradient_check(&BackboneConfig::default(), seed, eps)?;
        write_out(out_error, err)
    })
}
