//! C ABI over `stable-rnn-va`: load a checkpoint into an opaque handle,
//! process audio buffers, run the noise protocol and constraint checks.
//!
//! Every fallible function returns an [`SrvStatus`]; on failure the message
//! is available from [`srv_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stable_rnn_va::cells::{CellState, Model, Runner};
use stable_rnn_va::cli::{Checkpoint, VERIFY_GATE_SAMPLES};
use stable_rnn_va::constraints::verify_cell;
use stable_rnn_va::measurement::{measure_noise, NoiseProtocolConfig, ScheduleKind};
use stable_rnn_va::numerics::SeededRng;
use stable_rnn_va::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Version = 5,
    Instability = 6,
    Panic = 7,
}

/// Conditioning scenario for [`srv_model_measure_noise`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrvScenario {
    Smooth = 0,
    Random = 1,
}

/// Opaque model handle.
pub struct SrvModel {
    model: Model,
    state: CellState,
    max_abs: f64,
    protocol: NoiseProtocolConfig,
    margin: stable_rnn_va::constraints::StabilityMargin,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SrvStatus {
    match e {
        Error::Io { .. } => SrvStatus::Io,
        Error::Json(_) | Error::Wav { .. } => SrvStatus::Parse,
        Error::Version { .. } => SrvStatus::Version,
        Error::Instability { .. } | Error::Diverged { .. } => SrvStatus::Instability,
        Error::InvalidValue(_) | Error::Config(_) | Error::Validation(_) => SrvStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SrvStatus, String)>) -> SrvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SrvStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            SrvStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SrvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SrvStatus, String) {
    (SrvStatus::NullPointer, format!("{what} is null"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn srv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread ("" if none). Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn srv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint JSON file. On success `*out` owns a new handle that
/// must be released with [`srv_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srv_model_load(path: *const c_char, out: *mut *mut SrvModel) -> SrvStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SrvStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let mut ckpt = Checkpoint::load(Path::new(p)).map_err(lib_err)?;
        let model = ckpt.model.materialize();
        let handle = SrvModel {
            state: model.zero_state(),
            model,
            max_abs: ckpt.stats.max_abs,
            protocol: ckpt.config.protocol,
            margin: ckpt.model.margin,
            seed: ckpt.config.seed,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`srv_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn srv_model_free(model: *mut SrvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Hidden size of the model (0 for a null handle).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn srv_model_hidden_size(model: *const SrvModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.hidden_size())
}

/// Number of control inputs (0 for a null handle).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn srv_model_control_count(model: *const SrvModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.control_count())
}

/// Zeroes the recurrent state.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn srv_model_reset(model: *mut SrvModel) -> SrvStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        m.state = m.model.zero_state();
        Ok(())
    })
}

/// Processes `len` samples with controls held constant, continuing from the
/// current state. Audio is in the dataset's original scale: the input is
/// divided by the training max-abs and the output multiplied back.
/// `input` and `output` may alias.
///
/// # Safety
/// `input`/`output` must hold `len` doubles; `controls` must hold
/// `n_controls` doubles (may be null when `n_controls` is 0).
#[no_mangle]
pub unsafe extern "C" fn srv_model_process(
    model: *mut SrvModel,
    input: *const f64,
    output: *mut f64,
    len: usize,
    controls: *const f64,
    n_controls: usize,
) -> SrvStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if len > 0 && (input.is_null() || output.is_null()) {
            return Err(null("audio buffer"));
        }
        if n_controls != m.model.control_count() {
            return Err((
                SrvStatus::InvalidArgument,
                format!("model takes {} controls, got {n_controls}", m.model.control_count()),
            ));
        }
        let ctrl: Vec<f64> = if n_controls == 0 {
            Vec::new()
        } else if controls.is_null() {
            return Err(null("controls"));
        } else {
            std::slice::from_raw_parts(controls, n_controls).to_vec()
        };
        if ctrl.iter().any(|v| !v.is_finite()) {
            return Err((SrvStatus::InvalidArgument, "controls must be finite".to_string()));
        }
        let mut runner = Runner::new(&m.model, m.state.clone());
        for t in 0..len {
            // Read before write so aliasing buffers work.
            let x = *input.add(t) / m.max_abs;
            let y = runner.step(x, &ctrl).map_err(lib_err)?;
            if !y.is_finite() {
                return Err((SrvStatus::Instability, format!("non-finite output at sample {t}")));
            }
            *output.add(t) = y * m.max_abs;
        }
        m.state = runner.into_state();
        Ok(())
    })
}

/// Runs the checkpoint's noise protocol (normalized units) and writes the
/// energy of the modulated phase in dBFS (`-INFINITY` for zero variance).
/// Does not touch the handle's streaming state.
///
/// # Safety
/// `model` must be a live handle; `out_dbfs` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srv_model_measure_noise(
    model: *const SrvModel,
    scenario: SrvScenario,
    seed: u64,
    out_dbfs: *mut f64,
) -> SrvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_dbfs.is_null() {
            return Err(null("out_dbfs"));
        }
        let kind = match scenario {
            SrvScenario::Smooth => ScheduleKind::SmoothSweep,
            SrvScenario::Random => ScheduleKind::RandomUniform,
        };
        let r = measure_noise(&m.model, kind, &m.protocol, seed, false).map_err(lib_err)?;
        *out_dbfs = r.energy_dbfs;
        Ok(())
    })
}

/// Re-checks the stability constraints; `*out_passed` is 1 if all pass.
///
/// # Safety
/// `model` must be a live handle; `out_passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn srv_model_verify(model: *const SrvModel, out_passed: *mut i32) -> SrvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_passed.is_null() {
            return Err(null("out_passed"));
        }
        let mut rng = SeededRng::new(m.seed).split(7);
        let report = verify_cell(&m.model.cell, m.model.mode, &m.margin, VERIFY_GATE_SAMPLES, &mut rng);
        *out_passed = report.all_passed() as i32;
        Ok(())
    })
}
