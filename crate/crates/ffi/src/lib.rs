//! C interface to the vfpt core.
//!
//! Every fallible function returns a [`VfptStatus`]; on failure the message is
//! kept per thread and can be read with [`vfpt_last_error`]. Panics never
//! cross the boundary. Handles are opaque and must be released with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use vfpt::checkpoint::load_model;
use vfpt::config::RunConfig;
use vfpt::data::Normalizer;
use vfpt::io::NamedTensors;
use vfpt::prompt::{PromptConfig, TunedModel, Variant};
use vfpt::spectral::{self, Axis, ComplexBuffer};
use vfpt::tensor::Tensor;
use vfpt::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfptStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Format = 5,
    Io = 6,
    Contract = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Tensors of one checkpoint container, in file order.
pub struct VfptCheckpoint {
    entries: NamedTensors,
}

/// A tuned model with the input normalization it was trained with.
pub struct VfptModel {
    model: TunedModel,
    normalizer: Normalizer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(VfptStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } | Error::Bounds { .. } => VfptStatus::Shape,
            Error::Config { .. } => VfptStatus::Config,
            Error::Format { .. } => VfptStatus::Format,
            Error::Io(_) => VfptStatus::Io,
            Error::Contract(_) => VfptStatus::Contract,
        };
        Fail(status, e.to_string())
    }
}

fn set_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("no interior NUL"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VfptStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            VfptStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(Some(format!("internal panic: {msg}")));
            VfptStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail(VfptStatus::NullPointer, "null pointer argument".into())
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(VfptStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn to_path(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null());
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn out<T>(p: *mut T, v: T) -> Result<(), Fail> {
    if p.is_null() {
        return Err(null());
    }
    p.write(v);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vfpt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `cap`) and returns the length needed including the NUL; 0 when
/// the last call succeeded.
///
/// # Safety
/// `buf` must be valid for `cap` bytes or null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn vfpt_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n - 1) = 0;
        }
        bytes.len()
    })
}

unsafe fn transform(
    re: *const f64,
    im: *const f64,
    n: usize,
    out_re: *mut f64,
    out_im: *mut f64,
    inverse: bool,
) -> VfptStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("length must be positive"));
        }
        let x = ComplexBuffer::new(slice(re, n)?.to_vec(), slice(im, n)?.to_vec())?;
        let y = if inverse { spectral::ifft(&x) } else { spectral::fft(&x) };
        slice_mut(out_re, n)?.copy_from_slice(&y.re);
        slice_mut(out_im, n)?.copy_from_slice(&y.im);
        Ok(())
    })
}

/// Unnormalized forward DFT of `n` complex values.
///
/// # Safety
/// All four buffers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfpt_fft(
    re: *const f64,
    im: *const f64,
    n: usize,
    out_re: *mut f64,
    out_im: *mut f64,
) -> VfptStatus {
    transform(re, im, n, out_re, out_im, false)
}

/// Inverse DFT (scaled by `1/n`), so `ifft(fft(x)) = x`.
///
/// # Safety
/// All four buffers must hold `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfpt_ifft(
    re: *const f64,
    im: *const f64,
    n: usize,
    out_re: *mut f64,
    out_im: *mut f64,
) -> VfptStatus {
    transform(re, im, n, out_re, out_im, true)
}

/// Real part of the 2D DFT of a row-major `m × d` block.
///
/// # Safety
/// `input` and `output` must hold `m·d` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfpt_fourier2d_real(input: *const f64, m: usize, d: usize, output: *mut f64) -> VfptStatus {
    guard(|| {
        let n = m.checked_mul(d).filter(|&n| n > 0).ok_or_else(|| invalid("empty block"))?;
        let p = Tensor::new(vec![m, d], slice(input, n)?.to_vec())?;
        slice_mut(output, n)?.copy_from_slice(spectral::fourier2d_real(&p).data());
        Ok(())
    })
}

/// Real part of the 1D DFT along the rows (`axis = 0`) or columns (`axis = 1`)
/// of a row-major `m × d` block.
///
/// # Safety
/// `input` and `output` must hold `m·d` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfpt_fourier1d_real(
    input: *const f64,
    m: usize,
    d: usize,
    axis: u32,
    output: *mut f64,
) -> VfptStatus {
    guard(|| {
        let axis = match axis {
            0 => Axis::Sequence,
            1 => Axis::Hidden,
            _ => return Err(invalid("axis must be 0 or 1")),
        };
        let n = m.checked_mul(d).filter(|&n| n > 0).ok_or_else(|| invalid("empty block"))?;
        let p = Tensor::new(vec![m, d], slice(input, n)?.to_vec())?;
        slice_mut(output, n)?.copy_from_slice(spectral::fourier1d_real(&p, axis).data());
        Ok(())
    })
}

/// Prompt parameters for `length` prompts of width `width` in every one of
/// `depth` layers (`deep != 0`) or the first layer only.
///
/// # Safety
/// `count` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfpt_prompt_parameter_count(
    depth: usize,
    length: usize,
    width: usize,
    deep: u32,
    count: *mut usize,
) -> VfptStatus {
    guard(|| {
        let cfg = PromptConfig {
            length,
            variant: if deep != 0 { Variant::Deep } else { Variant::Shallow },
            ..PromptConfig::default()
        };
        out(count, cfg.prompt_parameter_count(depth, width))
    })
}

/// Learning rate at `step` of a linear-warmup cosine schedule.
#[no_mangle]
pub extern "C" fn vfpt_cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    vfpt::training::cosine_lr(step, total_steps, base_lr, warmup_steps)
}

/// Runs the built-in oracle suites; `failed` receives the number of failing checks.
///
/// # Safety
/// `failed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfpt_selftest(failed: *mut u32) -> VfptStatus {
    guard(|| {
        let n = vfpt::selftest::run_all().iter().filter(|c| !c.passed).count();
        out(failed, n as u32)
    })
}

/// Loads a checkpoint container.
///
/// # Safety
/// `path` must be a NUL-terminated string and `handle` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfpt_checkpoint_load(path: *const c_char, handle: *mut *mut VfptCheckpoint) -> VfptStatus {
    guard(|| {
        let entries = vfpt::io::load(to_path(path)?)?;
        out(handle, Box::into_raw(Box::new(VfptCheckpoint { entries })))
    })
}

/// # Safety
/// `handle` must come from [`vfpt_checkpoint_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vfpt_checkpoint_free(handle: *mut VfptCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

unsafe fn entry<'a>(handle: *const VfptCheckpoint, index: usize) -> Result<&'a (String, Tensor), Fail> {
    let h = handle.as_ref().ok_or_else(null)?;
    h.entries
        .get(index)
        .ok_or_else(|| invalid(format!("index {index} out of range for {} tensors", h.entries.len())))
}

/// # Safety
/// `handle` and `len` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn vfpt_checkpoint_len(handle: *const VfptCheckpoint, len: *mut usize) -> VfptStatus {
    guard(|| out(len, handle.as_ref().ok_or_else(null)?.entries.len()))
}

/// Copies the name of tensor `index` into `buf` (NUL-terminated); `needed`
/// receives the size including the NUL. Fails with `BufferTooSmall` when `cap` is short.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `needed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfpt_checkpoint_name(
    handle: *const VfptCheckpoint,
    index: usize,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> VfptStatus {
    guard(|| {
        let (name, _) = entry(handle, index)?;
        out(needed, name.len() + 1)?;
        if cap < name.len() + 1 {
            return Err(Fail(VfptStatus::BufferTooSmall, format!("name needs {} bytes", name.len() + 1)));
        }
        let dst = slice_mut(buf.cast::<u8>(), cap)?;
        dst[..name.len()].copy_from_slice(name.as_bytes());
        dst[name.len()] = 0;
        Ok(())
    })
}

/// Shape of tensor `index`: `rank` receives its rank and the first
/// `min(rank, dims_cap)` dimensions go to `dims`.
///
/// # Safety
/// `dims` must be valid for `dims_cap` values; `rank` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfpt_checkpoint_shape(
    handle: *const VfptCheckpoint,
    index: usize,
    dims: *mut usize,
    dims_cap: usize,
    rank: *mut usize,
) -> VfptStatus {
    guard(|| {
        let (_, t) = entry(handle, index)?;
        out(rank, t.rank())?;
        let n = t.rank().min(dims_cap);
        slice_mut(dims, n)?.copy_from_slice(&t.shape()[..n]);
        Ok(())
    })
}

/// Copies the row-major values of tensor `index`; `cap` must be at least its element count.
///
/// # Safety
/// `data` must be valid for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfpt_checkpoint_data(
    handle: *const VfptCheckpoint,
    index: usize,
    data: *mut f64,
    cap: usize,
) -> VfptStatus {
    guard(|| {
        let (_, t) = entry(handle, index)?;
        if cap < t.numel() {
            return Err(Fail(VfptStatus::BufferTooSmall, format!("tensor has {} values", t.numel())));
        }
        slice_mut(data, t.numel())?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Loads a tuned model checkpoint written by `vfpt tune`. `config` is the run
/// configuration it was tuned with (the `config.toml` next to it), or null for defaults.
///
/// # Safety
/// `config` must be null or NUL-terminated, `model` NUL-terminated and `handle` valid.
#[no_mangle]
pub unsafe extern "C" fn vfpt_model_load(
    config: *const c_char,
    model: *const c_char,
    handle: *mut *mut VfptModel,
) -> VfptStatus {
    guard(|| {
        let cfg = if config.is_null() {
            RunConfig::default()
        } else {
            RunConfig::load(&to_path(config)?)?
        };
        let (model, normalizer) = load_model(&to_path(model)?, &cfg.backbone, &cfg.prompt)?;
        out(handle, Box::into_raw(Box::new(VfptModel { model, normalizer })))
    })
}

/// # Safety
/// `handle` must come from [`vfpt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vfpt_model_free(handle: *mut VfptModel) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Input geometry and class count of a loaded model.
///
/// # Safety
/// Every pointer must be valid.
#[no_mangle]
pub unsafe extern "C" fn vfpt_model_info(
    handle: *const VfptModel,
    channels: *mut usize,
    image_size: *mut usize,
    num_classes: *mut usize,
) -> VfptStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(null)?;
        let c = h.model.backbone.config();
        out(channels, c.channels)?;
        out(image_size, c.image_size)?;
        out(num_classes, h.model.head.num_classes())
    })
}

/// Logits `[batch, classes]` for raw images `[batch, channels, size, size]`
/// (row-major); the model's normalization is applied here.
///
/// # Safety
/// `images` must hold `batch·channels·size²` doubles and `logits` `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfpt_model_predict(
    handle: *const VfptModel,
    images: *const f64,
    batch: usize,
    logits: *mut f64,
    cap: usize,
) -> VfptStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(null)?;
        if batch == 0 {
            return Err(invalid("batch must be positive"));
        }
        let c = h.model.backbone.config();
        let per = c.channels * c.image_size * c.image_size;
        let classes = h.model.head.num_classes();
        if cap < batch * classes {
            return Err(Fail(VfptStatus::BufferTooSmall, format!("need {} logits", batch * classes)));
        }
        let raw = slice(images, batch * per)?;
        let imgs = raw
            .chunks(per)
            .map(|x| {
                let t = Tensor::new(vec![c.channels, c.image_size, c.image_size], x.to_vec())?;
                h.normalizer.normalize(&t)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let y = h.model.predict(&refs)?;
        slice_mut(logits, batch * classes)?.copy_from_slice(y.data());
        Ok(())
    })
}
