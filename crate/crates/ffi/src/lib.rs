//! C ABI over `rsmgan`.
//!
//! Every fallible call returns an [`RsmganStatus`]; on failure the message
//! is available from [`rsmgan_last_error`] on the same thread until the next
//! failing call. Objects cross the boundary as opaque handles that must be
//! released with their `_free` function. Panics never unwind into C; they
//! surface as [`RsmganStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use rsmgan::detect::{score_context_b, score_context_h};
use rsmgan::experiment::{run_experiment, ExperimentConfig};
use rsmgan::frame::SeriesFrame;
use rsmgan::mcm::{build_mcm, McmConfig, McmSequence, ModelInput, SquareMatrix};
use rsmgan::model::{attention_combine, ReconstructionModel};
use rsmgan::rootcause::select_elbow;
use rsmgan::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RsmganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Diverged = 4,
    Format = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
    BufferTooSmall = 9,
}

/// Correlation matrices of one series set.
pub struct RsmganMcm {
    inner: McmSequence,
}

/// A trained reconstruction model.
pub struct RsmganModel {
    inner: ReconstructionModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> RsmganStatus {
    match err {
        Error::InvalidArgument(_) => RsmganStatus::InvalidArgument,
        Error::Shape(_) => RsmganStatus::Shape,
        Error::Diverged { .. } => RsmganStatus::Diverged,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => RsmganStatus::Format,
        Error::Config(_) => RsmganStatus::Config,
        Error::Io(_) => RsmganStatus::Io,
    }
}

enum Failure {
    Status(RsmganStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn null() -> Failure {
    Failure::Status(RsmganStatus::NullPointer, "required pointer argument is null".into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RsmganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsmganStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            RsmganStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null());
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        Failure::Status(RsmganStatus::InvalidArgument, "path is not valid UTF-8".into())
    })?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rsmgan_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rsmgan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds correlation matrices from `n_series` series of `length` points,
/// stored series after series in `values`.
///
/// # Safety
/// `values` must hold `n_series * length` doubles and `windows` `n_windows`
/// entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_mcm_build(
    values: *const f64,
    n_series: usize,
    length: usize,
    windows: *const usize,
    n_windows: usize,
    step: usize,
    out: *mut *mut RsmganMcm,
) -> RsmganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let total = n_series
            .checked_mul(length)
            .ok_or_else(|| Failure::Status(RsmganStatus::InvalidArgument, "size overflow".into()))?;
        let values = input(values, total)?;
        let windows = input(windows, n_windows)?;
        let series: Vec<Vec<f64>> = values.chunks(length.max(1)).map(<[f64]>::to_vec).collect();
        let frame = SeriesFrame::regular(Default::default(), 60, series)?;
        let config = McmConfig {
            windows: windows.to_vec(),
            step,
            ..McmConfig::default()
        };
        let seq = build_mcm(&frame, &config)?;
        *out = Box::into_raw(Box::new(RsmganMcm { inner: seq }));
        Ok(())
    })
}

/// Number of steps in `mcm` (0 for NULL).
///
/// # Safety
/// `mcm` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_mcm_len(mcm: *const RsmganMcm) -> usize {
    mcm.as_ref().map_or(0, |m| m.inner.len())
}

/// Copies step `step`'s `n × n × channels` block into `out`.
///
/// # Safety
/// `mcm` must be a live handle and `out` hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_mcm_step(
    mcm: *const RsmganMcm,
    step: usize,
    out: *mut f64,
    capacity: usize,
) -> RsmganStatus {
    guard(|| {
        let m = &mcm.as_ref().ok_or_else(null)?.inner;
        if step >= m.len() {
            return Err(Failure::Status(
                RsmganStatus::InvalidArgument,
                format!("step {step} out of range (len {})", m.len()),
            ));
        }
        let block = m.at(step);
        if capacity < block.len() {
            return Err(Failure::Status(
                RsmganStatus::BufferTooSmall,
                format!("need {} doubles, got {capacity}", block.len()),
            ));
        }
        output(out, block.len())?.copy_from_slice(block);
        Ok(())
    })
}

/// # Safety
/// `mcm` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_mcm_free(mcm: *mut RsmganMcm) {
    if !mcm.is_null() {
        drop(Box::from_raw(mcm));
    }
}

/// Loads a model checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_model_load(
    path: *const c_char,
    out: *mut *mut RsmganModel,
) -> RsmganStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let model = ReconstructionModel::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(RsmganModel { inner: model }));
        Ok(())
    })
}

/// Writes `[n, channels, slots]` of the model's input.
///
/// # Safety
/// `model` must be a live handle and `out` hold 3 entries.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_model_shape(model: *const RsmganModel, out: *mut usize) -> RsmganStatus {
    guard(|| {
        let s = model.as_ref().ok_or_else(null)?.inner.shape;
        output(out, 3)?.copy_from_slice(&[s.n, s.channels, s.slots]);
        Ok(())
    })
}

/// Reconstructs one stacked input (`slots × n × n × channels`, target
/// last). `mask` holds one byte per slot (0 = masked). Writes the
/// reconstruction (`n × n × channels`) and the first-channel residual
/// (`n × n`).
///
/// # Safety
/// Buffers must have the sizes implied by [`rsmgan_model_shape`].
#[no_mangle]
pub unsafe extern "C" fn rsmgan_model_reconstruct(
    model: *const RsmganModel,
    slots: *const f64,
    mask: *const u8,
    out_reconstruction: *mut f64,
    out_residual: *mut f64,
) -> RsmganStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(null)?.inner;
        let s = model.shape;
        let slots = input(slots, s.slots * s.matrix_len())?;
        let mask = input(mask, s.slots)?;
        let inp = ModelInput {
            step: 0,
            slots: slots.to_vec(),
            slot_mask: mask.iter().map(|&b| b != 0).collect(),
        };
        let r = model
            .reconstruct(std::slice::from_ref(&inp))?
            .pop()
            .expect("one input gives one reconstruction");
        output(out_reconstruction, r.output.len())?.copy_from_slice(&r.output);
        output(out_residual, s.n * s.n)?.copy_from_slice(r.residual.data());
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_model_free(model: *mut RsmganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Anomaly score of an `n × n` residual; `holistic` selects context_h.
///
/// # Safety
/// `residual` must hold `n * n` doubles and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_score(
    residual: *const f64,
    n: usize,
    theta: f64,
    holistic: bool,
    out: *mut usize,
) -> RsmganStatus {
    guard(|| {
        let r = SquareMatrix::new(n, input(residual, n * n)?.to_vec())?;
        let v = if holistic {
            score_context_h(&r, theta)
        } else {
            score_context_b(&r, theta)
        };
        *out.as_mut().ok_or_else(null)? = v;
        Ok(())
    })
}

/// Elbow selection over `n` scores. Selected series indices (by descending
/// score) go to `out_selected`; their count to `out_k`.
///
/// # Safety
/// `scores` must hold `n` doubles, `out_selected` `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_select_elbow(
    scores: *const f64,
    n: usize,
    out_selected: *mut usize,
    capacity: usize,
    out_k: *mut usize,
) -> RsmganStatus {
    guard(|| {
        let e = select_elbow(input(scores, n)?)?;
        let k_out = out_k.as_mut().ok_or_else(null)?;
        *k_out = e.k;
        if capacity < e.k {
            return Err(Failure::Status(
                RsmganStatus::BufferTooSmall,
                format!("need room for {} indices, got {capacity}", e.k),
            ));
        }
        output(out_selected, e.k)?.copy_from_slice(&e.selected);
        Ok(())
    })
}

/// Masked softmax attention over `n_slots` states of `dim` values each
/// (current state last). Writes the combined state (`dim`) and weights
/// (`n_slots`).
///
/// # Safety
/// Buffers must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn rsmgan_attention(
    states: *const f64,
    n_slots: usize,
    dim: usize,
    mask: *const u8,
    rescale: f64,
    out_combined: *mut f64,
    out_weights: *mut f64,
) -> RsmganStatus {
    guard(|| {
        let flat = input(states, n_slots * dim)?;
        let states: Vec<Vec<f64>> = flat.chunks(dim.max(1)).map(<[f64]>::to_vec).collect();
        let mask: Vec<bool> = input(mask, n_slots)?.iter().map(|&b| b != 0).collect();
        let (combined, weights) = attention_combine(&states, &mask, rescale)?;
        output(out_combined, dim)?.copy_from_slice(&combined);
        output(out_weights, n_slots)?.copy_from_slice(&weights);
        Ok(())
    })
}

/// Runs a full experiment from a TOML config. `out_dir` may be NULL to
/// keep the configured output directory.
///
/// # Safety
/// Both strings must be NULL-terminated (or `out_dir` NULL).
#[no_mangle]
pub unsafe extern "C" fn rsmgan_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
) -> RsmganStatus {
    guard(|| {
        let mut config = ExperimentConfig::load(&path_arg(config_path)?)?;
        if !out_dir.is_null() {
            config.output_dir = path_arg(out_dir)?;
        }
        run_experiment(&config)?;
        Ok(())
    })
}
