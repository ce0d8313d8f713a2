//! C ABI over the pipeline: opaque config and reward-model handles, stage
//! execution and status codes. Every function returns a `CfdlgStatus`;
//! the message of the last failure on the calling thread is available from
//! `cfdlg_last_error_message`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use causal_dialogue::pipeline::{run_pipeline, run_stage, PipelineConfig, Stage, StageOutcome};
use causal_dialogue::reward::{predict_donation, DdpParams};
use causal_dialogue::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CfdlgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Dimension = 6,
    Stage = 7,
    Numeric = 8,
    Other = 9,
    Panic = 10,
}

/// Opaque pipeline configuration.
pub struct CfdlgConfig {
    inner: PipelineConfig,
}

/// Opaque trained reward model.
pub struct CfdlgReward {
    inner: DdpParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CfdlgStatus {
    match e {
        Error::Config(_) => CfdlgStatus::Config,
        Error::Io { .. } => CfdlgStatus::Io,
        Error::Parse { .. } | Error::Format(_) => CfdlgStatus::Format,
        Error::Dimension { .. } => CfdlgStatus::Dimension,
        Error::Stage { .. } => CfdlgStatus::Stage,
        Error::NonFinite { .. } => CfdlgStatus::Numeric,
        _ => CfdlgStatus::Other,
    }
}

enum Failure {
    Status(CfdlgStatus, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

/// Runs `f`, turning errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CfdlgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CfdlgStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_last_error(msg);
            s
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("panic inside causal_dialogue".into());
            CfdlgStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(CfdlgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(CfdlgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cfdlg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cfdlg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default configuration. Free with `cfdlg_config_free`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_config_new(out: *mut *mut CfdlgConfig) -> CfdlgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Box::into_raw(Box::new(CfdlgConfig {
            inner: PipelineConfig::default(),
        }));
        Ok(())
    })
}

/// Configuration read from an INI file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_config_from_file(path: *const c_char, out: *mut *mut CfdlgConfig) -> CfdlgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = PipelineConfig::from_file(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfdlgConfig { inner }));
        Ok(())
    })
}

/// Sets one config key, using the CLI flag names.
///
/// # Safety
/// `config` must come from this library; `key` and `value` must be
/// NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_config_set(
    config: *mut CfdlgConfig,
    key: *const c_char,
    value: *const c_char,
) -> CfdlgStatus {
    guard(|| {
        let cfg = config.as_mut().ok_or_else(|| null("config"))?;
        cfg.inner.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_config_free(config: *mut CfdlgConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs one named stage. `skipped` (may be null) receives 1 when the stage
/// was already complete.
///
/// # Safety
/// `config` must come from this library and `stage` be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_run_stage(
    config: *const CfdlgConfig,
    stage: *const c_char,
    skipped: *mut i32,
) -> CfdlgStatus {
    guard(|| {
        let cfg = handle(config, "config")?;
        let stage: Stage = str_arg(stage, "stage")?.parse()?;
        let outcome = run_stage(stage, &cfg.inner)?;
        if let Some(s) = skipped.as_mut() {
            *s = (outcome == StageOutcome::Skipped) as i32;
        }
        Ok(())
    })
}

/// Runs every stage. `ground_truth` (may be null) receives the final
/// cumulative predicted donation of the corpus dialogues.
///
/// # Safety
/// `config` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_run_pipeline(config: *const CfdlgConfig, ground_truth: *mut f64) -> CfdlgStatus {
    guard(|| {
        let report = run_pipeline(&handle(config, "config")?.inner)?;
        if let Some(g) = ground_truth.as_mut() {
            *g = report.ground_truth;
        }
        Ok(())
    })
}

/// Loads a reward model checkpoint. Free with `cfdlg_reward_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_reward_load(path: *const c_char, out: *mut *mut CfdlgReward) -> CfdlgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = DdpParams::load(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CfdlgReward { inner }));
        Ok(())
    })
}

/// Embedding dimension the reward model expects.
///
/// # Safety
/// `model` must come from this library and `dim` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_reward_input_dim(model: *const CfdlgReward, dim: *mut usize) -> CfdlgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *dim.as_mut().ok_or_else(|| null("dim"))? = m.inner.input_size();
        Ok(())
    })
}

/// Predicted donation of a dialogue given as `n_utterances` row-major
/// embeddings of width `dim`.
///
/// # Safety
/// `embeddings` must point to `n_utterances * dim` floats and `out` be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_reward_predict(
    model: *const CfdlgReward,
    embeddings: *const f32,
    n_utterances: usize,
    dim: usize,
    out: *mut f64,
) -> CfdlgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n_utterances
            .checked_mul(dim)
            .ok_or_else(|| Failure::Status(CfdlgStatus::Dimension, "n_utterances * dim overflows".into()))?;
        if embeddings.is_null() && len > 0 {
            return Err(null("embeddings"));
        }
        let flat: &[f32] = if len == 0 { &[] } else { std::slice::from_raw_parts(embeddings, len) };
        let seq: Vec<Vec<f64>> = flat.chunks(dim.max(1)).map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        *out = predict_donation(&m.inner, &seq)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cfdlg_reward_free(model: *mut CfdlgReward) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use causal_dialogue::numerics::rng_from_seed;

    fn message() -> String {
        unsafe { CStr::from_ptr(cfdlg_last_error_message()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn config_round_trip_and_errors() {
        unsafe {
            let mut cfg = ptr::null_mut();
            assert_eq!(cfdlg_config_new(&mut cfg), CfdlgStatus::Ok);
            assert_eq!(cfdlg_config_set(cfg, c"gamma".as_ptr(), c"0.5".as_ptr()), CfdlgStatus::Ok);
            assert_eq!((*cfg).inner.get("gamma").as_deref(), Some("0.5"));
            assert_eq!(cfdlg_config_set(cfg, c"nope".as_ptr(), c"1".as_ptr()), CfdlgStatus::Config);
            assert!(message().contains("nope"));
            assert_eq!(cfdlg_config_set(cfg, ptr::null(), c"1".as_ptr()), CfdlgStatus::NullPointer);
            assert_eq!(cfdlg_run_stage(cfg, c"bogus".as_ptr(), ptr::null_mut()), CfdlgStatus::Config);
            cfdlg_config_free(cfg);
        }
    }

    #[test]
    fn missing_inputs_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        unsafe {
            let mut cfg = ptr::null_mut();
            cfdlg_config_new(&mut cfg);
            let out = CString::new(dir.path().join("out").to_str().unwrap()).unwrap();
            cfdlg_config_set(cfg, c"out".as_ptr(), out.as_ptr());
            assert_eq!(cfdlg_run_stage(cfg, c"discover".as_ptr(), ptr::null_mut()), CfdlgStatus::Config);
            cfdlg_config_free(cfg);
        }
    }

    #[test]
    fn reward_prediction_matches_core() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ddp.ckpt");
        let params = DdpParams::new(3, 4, 20.0, &mut rng_from_seed(3));
        params.save(&path).unwrap();
        let seq: Vec<f32> = (0..9).map(|i| i as f32 * 0.1 - 0.4).collect();
        let rows: Vec<Vec<f64>> = seq.chunks(3).map(|r| r.iter().map(|&x| x as f64).collect()).collect();
        let want = predict_donation(&DdpParams::load(&path).unwrap(), &rows).unwrap();
        unsafe {
            let mut m = ptr::null_mut();
            let p = CString::new(path.to_str().unwrap()).unwrap();
            assert_eq!(cfdlg_reward_load(p.as_ptr(), &mut m), CfdlgStatus::Ok);
            let mut dim = 0;
            cfdlg_reward_input_dim(m, &mut dim);
            assert_eq!(dim, 3);
            let mut got = 0.0;
            assert_eq!(cfdlg_reward_predict(m, seq.as_ptr(), 3, 3, &mut got), CfdlgStatus::Ok);
            assert_eq!(got, want);
            assert_eq!(cfdlg_reward_predict(m, seq.as_ptr(), 2, 4, &mut got), CfdlgStatus::Dimension);
            cfdlg_reward_free(m);
            assert_eq!(cfdlg_reward_load(c"/nonexistent/x.ckpt".as_ptr(), &mut m), CfdlgStatus::Io);
        }
    }
}
