//! C ABI over the training library: opaque handles, integer status codes,
//! and a thread-local last-error message.
//!
//! Every function returns a `w2d_status` (`W2D_OK` = 0). Outputs are written
//! through out-pointers. Handles own their data and must be released with
//! the matching `*_free` function; all `*_free` functions accept null.
//!
//! The header `include/w2d.h` is generated from these declarations at build
//! time.

#![allow(non_camel_case_types)]

use libc::{c_char, c_double, c_int, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use w2d_core::bundleio;
use w2d_core::checkpoint;
use w2d_core::datasets::{self, DatasetBundle};
use w2d_core::error::Error;
use w2d_core::eval::{self, AlgorithmChoice};
use w2d_core::model::{Model, ModelSpec};
use w2d_core::ranking::AccuracyCell;
use w2d_core::trainer::{self, Algorithm, W2DConfig};
use w2d_core::worstcase::ImportanceTarget;

/// Status codes returned by every FFI function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum w2d_status {
    W2D_OK = 0,
    W2D_ERR_NULL_ARGUMENT = 1,
    W2D_ERR_INVALID_ARGUMENT = 2,
    W2D_ERR_UTF8 = 3,
    W2D_ERR_IO = 4,
    W2D_ERR_RUNTIME = 5,
    W2D_ERR_PANIC = 6,
}

/// Training algorithm selector for `w2d_train`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum w2d_algorithm {
    W2D_ALG_ERM = 0,
    W2D_ALG_FEATURE_ONLY = 1,
    W2D_ALG_SAMPLE_ONLY = 2,
    W2D_ALG_W2D = 3,
    W2D_ALG_W2D_STAR = 4,
}

/// Training hyperparameters (mirrors the library configuration).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct w2d_train_config {
    /// Feature drop fraction in [0, 1].
    pub phi: c_double,
    /// Fraction of selected samples that receive masking, in [0, 1].
    pub beta: c_double,
    /// Worst-case sample fraction in (0, 1].
    pub rho: c_double,
    /// Whole-batch patching fraction of epochs, in [0, 1].
    pub kappa: c_double,
    /// Batch size.
    pub eta: size_t,
    pub epochs: size_t,
    pub learning_rate: c_double,
    pub seed: u64,
    /// Nonzero enables stochastic weight averaging.
    pub swa_enabled: c_int,
    pub swa_start_fraction: c_double,
    /// Plain-training epochs for the frozen ranker of the two-stage variant.
    pub w2dstar_bias_epochs: size_t,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> w2d_status {
    match err {
        Error::Io(_) => w2d_status::W2D_ERR_IO,
        Error::Config(_) | Error::Invalid(_) | Error::Shape(_) | Error::Empty(_) => {
            w2d_status::W2D_ERR_INVALID_ARGUMENT
        }
        _ => w2d_status::W2D_ERR_RUNTIME,
    }
}

fn run_ffi<F: FnOnce() -> Result<(), (w2d_status, String)>>(f: F) -> w2d_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => w2d_status::W2D_OK,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            w2d_status::W2D_ERR_PANIC
        }
    }
}

fn lib_err(e: Error) -> (w2d_status, String) {
    (status_of(&e), e.to_string())
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, (w2d_status, String)> {
    if p.is_null() {
        return Err((w2d_status::W2D_ERR_NULL_ARGUMENT, "null string".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (w2d_status::W2D_ERR_UTF8, "string is not UTF-8".into()))
}

fn nonnull<T>(p: *mut T, what: &str) -> Result<(), (w2d_status, String)> {
    if p.is_null() {
        return Err((w2d_status::W2D_ERR_NULL_ARGUMENT, format!("null {what}")));
    }
    Ok(())
}

/// Opaque dataset handle.
pub struct w2d_dataset {
    bundle: DatasetBundle,
}

/// Opaque model handle.
pub struct w2d_model {
    model: Model,
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `cap`). Returns the full message length in bytes.
#[no_mangle]
pub extern "C" fn w2d_last_error(buf: *mut c_char, cap: size_t) -> size_t {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn w2d_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// A configuration filled with the library defaults.
#[no_mangle]
pub extern "C" fn w2d_train_config_default() -> w2d_train_config {
    let d = W2DConfig::default();
    w2d_train_config {
        phi: d.phi,
        beta: d.beta,
        rho: d.rho,
        kappa: d.kappa,
        eta: d.eta,
        epochs: d.epochs,
        learning_rate: d.learning_rate,
        seed: d.seed,
        swa_enabled: 0,
        swa_start_fraction: d.swa_start_fraction,
        w2dstar_bias_epochs: d.w2dstar_bias_epochs,
    }
}

impl w2d_train_config {
    fn to_core(self) -> W2DConfig {
        W2DConfig {
            phi: self.phi,
            beta: self.beta,
            rho: self.rho,
            kappa: self.kappa,
            eta: self.eta,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            seed: self.seed,
            swa_enabled: self.swa_enabled != 0,
            swa_start_fraction: self.swa_start_fraction,
            w2dstar_bias_epochs: self.w2dstar_bias_epochs,
            importance_target: ImportanceTarget::TrueClass,
        }
    }
}

/// Generates the colored-digit environments (+90/+80/-90 by default) from a
/// deterministic digit corpus of `n_source` images.
#[no_mangle]
pub extern "C" fn w2d_dataset_cmnist(
    n_source: size_t,
    seed: u64,
    label_noise: c_double,
    out: *mut *mut w2d_dataset,
) -> w2d_status {
    run_ffi(|| {
        nonnull(out, "out pointer")?;
        let source = datasets::synth_digits(n_source, seed).map_err(lib_err)?;
        let bundle = datasets::generate_cmnist(
            &source,
            seed ^ 0x5bd1_e995,
            label_noise,
            &datasets::default_cmnist_envs(),
        )
        .map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(w2d_dataset { bundle })) };
        Ok(())
    })
}

/// Generates the synthetic two-shift benchmark (train and test environments).
#[no_mangle]
pub extern "C" fn w2d_dataset_two_shift(
    seed: u64,
    diversity_strength: c_double,
    correlation_strength: c_double,
    n_per_env: size_t,
    out: *mut *mut w2d_dataset,
) -> w2d_status {
    run_ffi(|| {
        nonnull(out, "out pointer")?;
        let bundle =
            datasets::generate_two_shift(seed, diversity_strength, correlation_strength, n_per_env)
                .map_err(lib_err)?;
        unsafe { *out = Box::into_raw(Box::new(w2d_dataset { bundle })) };
        Ok(())
    })
}

/// Loads a dataset bundle directory written by `w2d_dataset_save`.
#[no_mangle]
pub unsafe extern "C" fn w2d_dataset_load(
    dir: *const c_char,
    out: *mut *mut w2d_dataset,
) -> w2d_status {
    run_ffi(|| {
        nonnull(out, "out pointer")?;
        let dir = PathBuf::from(cstr(dir)?);
        let bundle = bundleio::load_bundle(&dir).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(w2d_dataset { bundle }));
        Ok(())
    })
}

/// Saves a dataset bundle as a directory (text manifest plus binaries).
#[no_mangle]
pub unsafe extern "C" fn w2d_dataset_save(
    dataset: *const w2d_dataset,
    dir: *const c_char,
) -> w2d_status {
    run_ffi(|| {
        nonnull(dataset as *mut w2d_dataset, "dataset")?;
        let dir = PathBuf::from(cstr(dir)?);
        bundleio::save_bundle(&(*dataset).bundle, &dir).map_err(lib_err)?;
        Ok(())
    })
}

/// Number of environments in the bundle.
#[no_mangle]
pub unsafe extern "C" fn w2d_dataset_env_count(
    dataset: *const w2d_dataset,
    out: *mut size_t,
) -> w2d_status {
    run_ffi(|| {
        nonnull(dataset as *mut w2d_dataset, "dataset")?;
        nonnull(out, "out pointer")?;
        *out = (*dataset).bundle.environments.len();
        Ok(())
    })
}

/// Copies the name of environment `index` into `buf` (NUL-terminated,
/// truncated to `cap`); writes the full length to `len` when non-null.
#[no_mangle]
pub unsafe extern "C" fn w2d_dataset_env_name(
    dataset: *const w2d_dataset,
    index: size_t,
    buf: *mut c_char,
    cap: size_t,
    len: *mut size_t,
) -> w2d_status {
    run_ffi(|| {
        nonnull(dataset as *mut w2d_dataset, "dataset")?;
        let envs = &(*dataset).bundle.environments;
        let env = envs.get(index).ok_or((
            w2d_status::W2D_ERR_INVALID_ARGUMENT,
            format!("environment index {index} out of range {}", envs.len()),
        ))?;
        let bytes = env.name.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        if !len.is_null() {
            *len = bytes.len();
        }
        Ok(())
    })
}

fn choice_of(algorithm: w2d_algorithm) -> AlgorithmChoice {
    match algorithm {
        w2d_algorithm::W2D_ALG_ERM => AlgorithmChoice::Erm,
        w2d_algorithm::W2D_ALG_FEATURE_ONLY => AlgorithmChoice::FeatureOnly,
        w2d_algorithm::W2D_ALG_SAMPLE_ONLY => AlgorithmChoice::SampleOnly,
        w2d_algorithm::W2D_ALG_W2D => AlgorithmChoice::W2d,
        w2d_algorithm::W2D_ALG_W2D_STAR => AlgorithmChoice::W2dStar,
    }
}

/// Trains a fresh fully connected model (one hidden layer of `hidden` units)
/// on the union of the bundle's training environments. With a null
/// `test_env` the last test-role environment of the bundle is used for the
/// run protocol; `out_test_accuracy` (optional) receives the protocol's
/// test-domain-validated accuracy in percent.
#[no_mangle]
pub unsafe extern "C" fn w2d_train(
    dataset: *const w2d_dataset,
    algorithm: w2d_algorithm,
    config: *const w2d_train_config,
    hidden: size_t,
    test_env: *const c_char,
    out_model: *mut *mut w2d_model,
    out_test_accuracy: *mut c_double,
) -> w2d_status {
    run_ffi(|| {
        nonnull(dataset as *mut w2d_dataset, "dataset")?;
        nonnull(config as *mut w2d_train_config, "config")?;
        nonnull(out_model, "out model")?;
        let bundle = &(*dataset).bundle;
        let cfg = (*config).to_core();
        let env0 = bundle
            .environments
            .first()
            .ok_or((w2d_status::W2D_ERR_INVALID_ARGUMENT, "empty bundle".into()))?;
        let input_shape = env0.inputs.shape()[1..].to_vec();
        let classes = env0.labels.iter().copied().max().unwrap_or(1) + 1;
        let hidden_layers = if hidden == 0 { vec![128] } else { vec![hidden] };
        let spec = ModelSpec::mlp(input_shape, &hidden_layers, classes.max(2));
        let test_env_name = if test_env.is_null() {
            bundle
                .environments
                .iter()
                .find(|e| bundle.role(&e.name) == Some(datasets::Role::Test))
                .map(|e| e.name.clone())
                .ok_or((
                    w2d_status::W2D_ERR_INVALID_ARGUMENT,
                    "bundle has no test environment".into(),
                ))?
        } else {
            cstr(test_env)?.to_string()
        };
        let opts = eval::ProtocolOptions {
            split: datasets::SplitSpec { validation_fraction: 0.2, seed: cfg.seed },
            strategy: eval::SelectionStrategy::TestDomain,
            test_env: test_env_name,
            holdout_env: None,
        };
        let outcome =
            eval::run_protocol(&spec, bundle, choice_of(algorithm), &cfg, &opts).map_err(lib_err)?;
        if !out_test_accuracy.is_null() {
            *out_test_accuracy = outcome.test_accuracy;
        }
        *out_model = Box::into_raw(Box::new(w2d_model { model: outcome.model }));
        Ok(())
    })
}

/// One training step of the integrated objective on a caller-shaped batch is
/// intentionally not exposed; training goes through `w2d_train`. This
/// function instead exposes the plain training loop on a single environment
/// for callers that manage their own evaluation protocol.
#[no_mangle]
pub unsafe extern "C" fn w2d_train_on_env(
    dataset: *const w2d_dataset,
    env_name: *const c_char,
    algorithm: w2d_algorithm,
    config: *const w2d_train_config,
    hidden: size_t,
    out_model: *mut *mut w2d_model,
) -> w2d_status {
    run_ffi(|| {
        nonnull(dataset as *mut w2d_dataset, "dataset")?;
        nonnull(config as *mut w2d_train_config, "config")?;
        nonnull(out_model, "out model")?;
        let bundle = &(*dataset).bundle;
        let name = cstr(env_name)?;
        let env = bundle.environment(name).ok_or((
            w2d_status::W2D_ERR_INVALID_ARGUMENT,
            format!("environment {name} not in bundle"),
        ))?;
        let data = env.as_batch().map_err(lib_err)?;
        let cfg = (*config).to_core();
        let classes = env.labels.iter().copied().max().unwrap_or(1) + 1;
        let hidden_layers = if hidden == 0 { vec![128] } else { vec![hidden] };
        let spec = ModelSpec::mlp(env.inputs.shape()[1..].to_vec(), &hidden_layers, classes.max(2));
        let algo = match choice_of(algorithm) {
            AlgorithmChoice::Erm => Algorithm::Erm,
            AlgorithmChoice::FeatureOnly => Algorithm::FeatureOnly,
            AlgorithmChoice::SampleOnly => Algorithm::SampleOnly,
            AlgorithmChoice::W2d => Algorithm::W2d,
            AlgorithmChoice::W2dStar => {
                let out = trainer::train_w2d_star(&spec, &data, &[], &cfg).map_err(lib_err)?;
                *out_model = Box::into_raw(Box::new(w2d_model { model: out.model }));
                return Ok(());
            }
        };
        let out = trainer::train(algo, &spec, &data, &[], &cfg).map_err(lib_err)?;
        *out_model = Box::into_raw(Box::new(w2d_model { model: out.model }));
        Ok(())
    })
}

/// Argmax accuracy (percent) of the model on one environment.
#[no_mangle]
pub unsafe extern "C" fn w2d_evaluate(
    model: *const w2d_model,
    dataset: *const w2d_dataset,
    env_name: *const c_char,
    out_accuracy: *mut c_double,
) -> w2d_status {
    run_ffi(|| {
        nonnull(model as *mut w2d_model, "model")?;
        nonnull(dataset as *mut w2d_dataset, "dataset")?;
        nonnull(out_accuracy, "out pointer")?;
        let name = cstr(env_name)?;
        let env = (*dataset).bundle.environment(name).ok_or((
            w2d_status::W2D_ERR_INVALID_ARGUMENT,
            format!("environment {name} not in bundle"),
        ))?;
        let batch = env.as_batch().map_err(lib_err)?;
        *out_accuracy = eval::evaluate_accuracy(&(*model).model, &batch).map_err(lib_err)?;
        Ok(())
    })
}

/// Saves a model checkpoint (binary plus `.manifest` text).
#[no_mangle]
pub unsafe extern "C" fn w2d_model_save(
    model: *const w2d_model,
    path: *const c_char,
) -> w2d_status {
    run_ffi(|| {
        nonnull(model as *mut w2d_model, "model")?;
        let path = PathBuf::from(cstr(path)?);
        checkpoint::save_model(&(*model).model, &path).map_err(lib_err)?;
        Ok(())
    })
}

/// Loads a model checkpoint written by `w2d_model_save`.
#[no_mangle]
pub unsafe extern "C" fn w2d_model_load(
    path: *const c_char,
    out: *mut *mut w2d_model,
) -> w2d_status {
    run_ffi(|| {
        nonnull(out, "out pointer")?;
        let path = PathBuf::from(cstr(path)?);
        let model = checkpoint::load_model(&path).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(w2d_model { model }));
        Ok(())
    })
}

/// Total parameter count of the model.
#[no_mangle]
pub unsafe extern "C" fn w2d_model_param_count(
    model: *const w2d_model,
    out: *mut size_t,
) -> w2d_status {
    run_ffi(|| {
        nonnull(model as *mut w2d_model, "model")?;
        nonnull(out, "out pointer")?;
        *out = (*model).model.params.param_count();
        Ok(())
    })
}

/// Ranking scores of `n_algorithms` rows against an ERM baseline row, all
/// over the same `n_datasets` in the same order. `means` is row-major
/// `[n_algorithms][n_datasets]`; `scores` receives one integer per row.
#[no_mangle]
pub unsafe extern "C" fn w2d_ranking_scores(
    means: *const c_double,
    n_algorithms: size_t,
    n_datasets: size_t,
    erm_means: *const c_double,
    erm_stderrs: *const c_double,
    scores: *mut c_int,
) -> w2d_status {
    run_ffi(|| {
        nonnull(means as *mut c_double, "means")?;
        nonnull(erm_means as *mut c_double, "erm means")?;
        nonnull(erm_stderrs as *mut c_double, "erm stderrs")?;
        nonnull(scores, "scores")?;
        if n_datasets == 0 {
            return Err((w2d_status::W2D_ERR_INVALID_ARGUMENT, "no datasets".into()));
        }
        let erm: Vec<AccuracyCell> = (0..n_datasets)
            .map(|d| {
                AccuracyCell::new(*erm_means.add(d), *erm_stderrs.add(d)).map_err(lib_err)
            })
            .collect::<Result<_, _>>()?;
        for a in 0..n_algorithms {
            let mut score = 0i32;
            for d in 0..n_datasets {
                let cell =
                    AccuracyCell::new(*means.add(a * n_datasets + d), 0.0).map_err(lib_err)?;
                score += w2d_core::ranking::score_cell(&cell, &erm[d]);
            }
            *scores.add(a) = score;
        }
        Ok(())
    })
}

/// Releases a dataset handle (null is a no-op).
#[no_mangle]
pub unsafe extern "C" fn w2d_dataset_free(dataset: *mut w2d_dataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Releases a model handle (null is a no-op).
#[no_mangle]
pub unsafe extern "C" fn w2d_model_free(model: *mut w2d_model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
