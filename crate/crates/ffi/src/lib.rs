//! C ABI over the `featadv` library.
//!
//! Objects cross the boundary as opaque handles (`FeatadvConfig`,
//! `FeatadvModel`) created and destroyed by this library. Every fallible
//! function returns a `FeatadvStatus`; on failure the message is available
//! from `featadv_last_error` on the same thread until the next call.
//! Panics are caught at the boundary and reported as
//! `FEATADV_STATUS_PANIC`.
//!
//! Tensors are dense row-major `double` arrays in `[n, c, h, w]` order and
//! label maps are `uint8_t` arrays in `[n, h, w]` order, as in the library.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use featadv::checkpoint::load_checkpoint;
use featadv::cli::{run_command, Command, PhaseArgs};
use featadv::config::RunConfig;
use featadv::losses::LabelMap;
use featadv::math::Tensor;
use featadv::perturb::{generate_adversarial, AttackContext, Domain, FeatureMap};
use featadv::train::TrainState;
use featadv::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatadvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Config = 4,
    Contract = 5,
    Shape = 6,
    Numeric = 7,
    Format = 8,
    Missing = 9,
    Io = 10,
    Panic = 11,
}

/// Domain of a feature batch passed to `featadv_perturb`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatadvDomain {
    Source = 0,
    Target = 1,
}

/// A resolved run configuration.
pub struct FeatadvConfig {
    inner: RunConfig,
}

/// A trained state (networks, optimizers, logs) loaded from a checkpoint.
pub struct FeatadvModel {
    inner: TrainState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: FeatadvStatus,
    message: String,
}

impl Failure {
    fn new(status: FeatadvStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Contract(_) | Error::NoGradientPath => FeatadvStatus::Contract,
            Error::Shape { .. } => FeatadvStatus::Shape,
            Error::NonFinite(_) | Error::NoEvaluableClasses => FeatadvStatus::Numeric,
            Error::Format { .. } => FeatadvStatus::Format,
            Error::Missing { .. } => FeatadvStatus::Missing,
            Error::Config(_) => FeatadvStatus::Config,
            Error::Io { .. } => FeatadvStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("NULs replaced"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `body`, records its error message and converts the outcome.
fn guard(body: impl FnOnce() -> FfiResult<()>) -> FeatadvStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error(None);
            FeatadvStatus::Ok
        }
        Ok(Err(f)) => {
            set_last_error(Some(f.message));
            f.status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_owned());
            set_last_error(Some(format!("panic: {msg}")));
            FeatadvStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::new(FeatadvStatus::NullPointer, format!("`{what}` is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(FeatadvStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

fn checked_len(dims: &[usize]) -> FfiResult<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::new(FeatadvStatus::InvalidArgument, format!("bad dimensions {dims:?}")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn featadv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL after a
/// successful call. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn featadv_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Frees a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn featadv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a TOML configuration (NULL or "" for the defaults).
///
/// # Safety
/// `toml` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featadv_config_new(
    toml: *const c_char,
    out: *mut *mut FeatadvConfig,
) -> FeatadvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = if toml.is_null() { "" } else { str_arg(toml, "toml")? };
        let inner = RunConfig::from_toml_str(text, &[])?;
        *out = Box::into_raw(Box::new(FeatadvConfig { inner }));
        Ok(())
    })
}

/// Applies one `key.path=value` override. The configuration is unchanged
/// when the override is rejected.
///
/// # Safety
/// `cfg` must be a live handle and `assignment` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn featadv_config_set(
    cfg: *mut FeatadvConfig,
    assignment: *const c_char,
) -> FeatadvStatus {
    guard(|| {
        let cfg = cfg.as_mut().ok_or_else(|| null("cfg"))?;
        let assignment = str_arg(assignment, "assignment")?;
        cfg.inner = RunConfig::from_toml_str(&cfg.inner.to_toml(), &[assignment.to_owned()])?;
        Ok(())
    })
}

/// Serializes the effective configuration; free the result with
/// `featadv_string_free`.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featadv_config_to_toml(
    cfg: *const FeatadvConfig,
    out: *mut *mut c_char,
) -> FeatadvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = ref_arg(cfg, "cfg")?;
        *out = CString::new(cfg.inner.to_toml())
            .map_err(|_| Failure::new(FeatadvStatus::Config, "configuration contains NUL"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `cfg` must be NULL or a handle from `featadv_config_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn featadv_config_free(cfg: *mut FeatadvConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs a subcommand (`gen-data`, `pretrain`, `adapt`, `baseline`, `eval`,
/// `ablate`, `plot`) exactly as the command-line tool would. `resume` and
/// `until` (negative for none) apply to `pretrain` and `adapt` only.
///
/// # Safety
/// `cfg` must be a live handle and `command` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn featadv_run(
    cfg: *const FeatadvConfig,
    command: *const c_char,
    resume: bool,
    until: i64,
) -> FeatadvStatus {
    guard(|| {
        let cfg = ref_arg(cfg, "cfg")?;
        let name = str_arg(command, "command")?;
        let args = PhaseArgs {
            resume,
            until: usize::try_from(until).ok(),
        };
        let command = match name {
            "gen-data" => Command::GenData,
            "pretrain" => Command::Pretrain(args),
            "adapt" => Command::Adapt(args),
            "baseline" => Command::Baseline,
            "eval" => Command::Eval,
            "ablate" => Command::Ablate,
            "plot" => Command::Plot,
            other => {
                return Err(Failure::new(
                    FeatadvStatus::InvalidArgument,
                    format!("unknown command `{other}`"),
                ))
            }
        };
        run_command(&cfg.inner, &command)?;
        Ok(())
    })
}

/// Loads a checkpoint written by `pretrain`, `adapt` or `baseline`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featadv_model_load(
    path: *const c_char,
    out: *mut *mut FeatadvModel,
) -> FeatadvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let (inner, _) = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(FeatadvModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from `featadv_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn featadv_model_free(model: *mut FeatadvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of classes the model predicts.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featadv_model_classes(
    model: *const FeatadvModel,
    out: *mut usize,
) -> FeatadvStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = model.inner.model.classes();
        Ok(())
    })
}

unsafe fn image_batch(images: *const f64, n: usize, h: usize, w: usize) -> FfiResult<Tensor> {
    if images.is_null() {
        return Err(null("images"));
    }
    let len = checked_len(&[n, 3, h, w])?;
    let data = std::slice::from_raw_parts(images, len).to_vec();
    Ok(Tensor::new(&[n, 3, h, w], data)?)
}

/// Per-pixel argmax prediction for `n` RGB images of `h × w` in `[0, 1]`.
/// Writes `n·h·w` class indices to `labels`.
///
/// # Safety
/// `images` must hold `n·3·h·w` doubles and `labels` room for `n·h·w` bytes.
#[no_mangle]
pub unsafe extern "C" fn featadv_model_predict(
    model: *const FeatadvModel,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    labels: *mut u8,
) -> FeatadvStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let x = image_batch(images, n, h, w)?;
        let pred = model.inner.model.predict(&x)?.argmax();
        ptr::copy_nonoverlapping(pred.values().as_ptr(), labels, pred.values().len());
        Ok(())
    })
}

/// Features of `n` images at the model's split point. `shape` receives the
/// four feature dimensions; `features` (which may be NULL to query the
/// shape only) receives their product in doubles.
///
/// # Safety
/// `images` must hold `n·3·h·w` doubles, `shape` room for 4 sizes and
/// `features`, when not NULL, room for the full feature tensor.
#[no_mangle]
pub unsafe extern "C" fn featadv_model_features(
    model: *const FeatadvModel,
    images: *const f64,
    n: usize,
    h: usize,
    w: usize,
    shape: *mut usize,
    features: *mut f64,
) -> FeatadvStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        if shape.is_null() {
            return Err(null("shape"));
        }
        let x = image_batch(images, n, h, w)?;
        let f = model.inner.model.extract_features(&x, Domain::Source)?;
        let dims = f.values().shape();
        ptr::copy_nonoverlapping(dims.as_ptr(), shape, 4);
        if !features.is_null() {
            let data = f.values().data();
            ptr::copy_nonoverlapping(data.as_ptr(), features, data.len());
        }
        Ok(())
    })
}

/// Adversarial copy of a feature batch under the configuration's
/// perturbation settings, with the model's classifier and discriminator as
/// the attacked networks. `labels` (`n·label_h·label_w` bytes) is required
/// for source features and must be NULL for target features.
///
/// # Safety
/// `features` and `out` must hold the product of `shape[0..4]` doubles;
/// `labels`, when not NULL, must hold `shape[0]·label_h·label_w` bytes.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn featadv_perturb(
    model: *const FeatadvModel,
    cfg: *const FeatadvConfig,
    features: *const f64,
    shape: *const usize,
    domain: FeatadvDomain,
    labels: *const u8,
    label_h: usize,
    label_w: usize,
    out: *mut f64,
) -> FeatadvStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let cfg = ref_arg(cfg, "cfg")?;
        if features.is_null() {
            return Err(null("features"));
        }
        if shape.is_null() {
            return Err(null("shape"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dims = std::slice::from_raw_parts(shape, 4);
        let len = checked_len(dims)?;
        let values = Tensor::new(dims, std::slice::from_raw_parts(features, len).to_vec())?;
        let split = model.inner.model.split();
        if cfg.inner.perturb.layer != split {
            return Err(Failure::new(
                FeatadvStatus::Contract,
                format!(
                    "configuration perturbs at {} but the model splits at {split}",
                    cfg.inner.perturb.layer
                ),
            ));
        }
        let origin = match domain {
            FeatadvDomain::Source => Domain::Source,
            FeatadvDomain::Target => Domain::Target,
        };
        let f = FeatureMap::new(values, origin, split)?;
        let y = if labels.is_null() {
            None
        } else {
            let n = checked_len(&[dims[0], label_h, label_w])?;
            let v = std::slice::from_raw_parts(labels, n).to_vec();
            Some(LabelMap::new(dims[0], label_h, label_w, v)?)
        };
        let ctx = AttackContext {
            model: &model.inner.model,
            disc: &model.inner.disc,
        };
        let (f_star, _) = generate_adversarial(&f, &cfg.inner.perturb, ctx, y.as_ref(), 0)?;
        ptr::copy_nonoverlapping(f_star.values().data().as_ptr(), out, len);
        Ok(())
    })
}
