//! C ABI over the metametric learner.
//!
//! Every function returns an [`MmStatus`]; on failure a message is kept per
//! thread and read with [`mm_last_error`]. Handles are opaque and owned by the
//! caller until passed to their `_free` function. Feature buffers are
//! row-major `f64` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use metametric::checkpoint::Checkpoint;
use metametric::data::generate::class_id;
use metametric::data::{load_tasks, Example, TaskDataset};
use metametric::encoder::LearnerParams;
use metametric::matching::{Item, MatchingNet};
use metametric::meta::MetaParams;
use metametric::rng;
use metametric::training::{adapt_learner, evaluate, split_examples, EvalProtocol, UnrollConfig};
use metametric::Error;

/// Result of every call. Values match the command-line exit codes where the
/// failure classes coincide.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmStatus {
    Ok = 0,
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    NonFinite = 4,
    Io = 5,
    Checkpoint = 6,
    Panic = 7,
}

/// A meta-trained learner: Θ plus the current learner parameters, which
/// start as `c0` and are replaced by [`mm_model_adapt`].
pub struct MmModel {
    net: MatchingNet,
    meta: MetaParams,
    params: LearnerParams,
}

/// A list of tasks loaded from a data directory.
pub struct MmTasks {
    tasks: Vec<TaskDataset>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> MmStatus {
    match err {
        Error::Config(_) => MmStatus::Config,
        Error::NonFinite { .. } | Error::NonFiniteInput(_) => MmStatus::NonFinite,
        Error::Io(_) => MmStatus::Io,
        Error::Checkpoint(_) => MmStatus::Checkpoint,
        _ => MmStatus::Data,
    }
}

struct Fail(MmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(MmStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MmStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Fail> {
    if path.is_null() {
        return Err(invalid("path is null"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(model: *const MmModel) -> Result<&'a MmModel, Fail> {
    model.as_ref().ok_or_else(|| invalid("model is null"))
}

unsafe fn out_arg<'a, T>(out: *mut T) -> Result<&'a mut T, Fail> {
    out.as_mut().ok_or_else(|| invalid("output pointer is null"))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by `metametric train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mm_model_load(path: *const c_char, out: *mut *mut MmModel) -> MmStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let net = MatchingNet {
            encoder: ck.encoder,
            similarity: ck.similarity,
        };
        let params = ck.meta.c0.clone();
        *out = Box::into_raw(Box::new(MmModel {
            net,
            meta: ck.meta,
            params,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mm_model_free(model: *mut MmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature length the model expects.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mm_model_input_dim(model: *const MmModel, out: *mut usize) -> MmStatus {
    guard(|| {
        *out_arg(out)? = model_arg(model)?.net.encoder.input_dim;
        Ok(())
    })
}

/// Number of learner parameters.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mm_model_param_count(model: *const MmModel, out: *mut usize) -> MmStatus {
    guard(|| {
        *out_arg(out)? = model_arg(model)?.params.len();
        Ok(())
    })
}

/// Copies the current learner parameters into `out[0..len]`.
///
/// # Safety
/// `out` must hold `len` values and `len` must equal the parameter count.
#[no_mangle]
pub unsafe extern "C" fn mm_model_params(model: *const MmModel, out: *mut f64, len: usize) -> MmStatus {
    guard(|| {
        let m = model_arg(model)?;
        if len != m.params.len() {
            return Err(invalid(&format!("buffer holds {len} values, model has {}", m.params.len())));
        }
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(m.params.flat());
        Ok(())
    })
}

/// Restores the learner parameters to the meta-learned `c0`.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mm_model_reset(model: *mut MmModel) -> MmStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| invalid("model is null"))?;
        m.params = m.meta.c0.clone();
        Ok(())
    })
}

fn labelled_task(features: &[f64], labels: &[u32], dim: usize) -> TaskDataset {
    let mut task = TaskDataset::new("ffi", dim);
    for (i, (row, &label)) in features.chunks(dim).zip(labels).enumerate() {
        let c = class_id(label as usize);
        task.classes.entry(c.clone()).or_default().push(Example {
            id: format!("ffi/{i}"),
            task_id: "ffi".into(),
            class_id: c,
            features: row.to_vec(),
        });
    }
    task
}

unsafe fn rows<'a>(m: &MmModel, p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    let dim = m.net.encoder.input_dim;
    slice_arg(p, n.checked_mul(dim).ok_or_else(|| invalid("size overflow"))?, what)
}

/// Runs `steps` meta-learner updates from `c0` on `n` labelled examples and
/// keeps the result as the model's learner parameters. Each class needs at
/// least two examples; they are split in half per class into the train and
/// test roles.
///
/// # Safety
/// `features` must hold `n * input_dim` values and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn mm_model_adapt(
    model: *mut MmModel,
    features: *const f64,
    labels: *const u32,
    n: usize,
    steps: usize,
    shots: usize,
    seed: u64,
) -> MmStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| invalid("model is null"))?;
        if steps == 0 || shots == 0 {
            return Err(invalid("steps and shots must be positive"));
        }
        let x = rows(m, features, n, "features")?;
        let y = slice_arg(labels, n, "labels")?;
        let task = labelled_task(x, y, m.net.encoder.input_dim);
        if task.n_classes() < 2 {
            return Err(invalid("adaptation needs at least two classes"));
        }
        let mut r = rng::substream(seed, "ffi/adapt");
        let (d_train, d_test) = split_examples(&task, 0.5, &mut r)?;
        let config = UnrollConfig {
            steps,
            shots: shots.min(d_train.min_class_size()),
            batch_size: d_test.n_examples(),
            test_query_cap: d_test.n_examples(),
        };
        m.params = adapt_learner(&m.meta, &m.net, &d_train, &d_test, &config, &mut r)?;
        Ok(())
    })
}

/// Class probabilities for `n_query` queries given a labelled support set.
/// `out` receives `n_query * n_classes` values, one row per query.
///
/// # Safety
/// Feature buffers must hold `count * input_dim` values, `support_labels`
/// `n_support` values and `out` `n_query * n_classes` values.
#[no_mangle]
pub unsafe extern "C" fn mm_model_predict(
    model: *const MmModel,
    support_features: *const f64,
    support_labels: *const u32,
    n_support: usize,
    n_classes: usize,
    query_features: *const f64,
    n_query: usize,
    out: *mut f64,
) -> MmStatus {
    guard(|| {
        let m = model_arg(model)?;
        let dim = m.net.encoder.input_dim;
        let sx = rows(m, support_features, n_support, "support features")?;
        let sy = slice_arg(support_labels, n_support, "support labels")?;
        let qx = rows(m, query_features, n_query, "query features")?;
        if n_support == 0 || n_query == 0 {
            return Err(invalid("support and queries must not be empty"));
        }
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let support: Vec<Item> = sx
            .chunks(dim)
            .zip(sy)
            .enumerate()
            .map(|(i, (row, &l))| Item::new(format!("s{i}"), row.to_vec(), l as usize))
            .collect();
        let queries: Vec<&[f64]> = qx.chunks(dim).collect();
        let dists = m.net.predict_batch(&m.params, &support, n_classes, &queries)?;
        let out = std::slice::from_raw_parts_mut(out, n_query * n_classes);
        for (row, d) in out.chunks_mut(n_classes).zip(&dists) {
            row.copy_from_slice(&d.probs);
        }
        Ok(())
    })
}

/// Loads every task under a `metametric gen` data directory.
///
/// # Safety
/// `dir` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mm_tasks_load(dir: *const c_char, out: *mut *mut MmTasks) -> MmStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let tasks = load_tasks(&path_arg(dir)?)?;
        *out = Box::into_raw(Box::new(MmTasks { tasks }));
        Ok(())
    })
}

/// # Safety
/// `tasks` must come from [`mm_tasks_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mm_tasks_free(tasks: *mut MmTasks) {
    if !tasks.is_null() {
        drop(Box::from_raw(tasks));
    }
}

/// # Safety
/// `tasks` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mm_tasks_count(tasks: *const MmTasks, out: *mut usize) -> MmStatus {
    guard(|| {
        let t = tasks.as_ref().ok_or_else(|| invalid("tasks is null"))?;
        *out_arg(out)? = t.tasks.len();
        Ok(())
    })
}

/// Mean accuracy of the model's current parameters on `episodes` sampled
/// `n_way`-way `shots`-shot episodes of task `index` (0 for `n_way` uses
/// every class).
///
/// # Safety
/// Both handles must be live.
#[no_mangle]
pub unsafe extern "C" fn mm_tasks_evaluate(
    tasks: *const MmTasks,
    index: usize,
    model: *const MmModel,
    shots: usize,
    queries_per_class: usize,
    n_way: usize,
    episodes: usize,
    seed: u64,
    out: *mut f64,
) -> MmStatus {
    guard(|| {
        let t = tasks.as_ref().ok_or_else(|| invalid("tasks is null"))?;
        let m = model_arg(model)?;
        let out = out_arg(out)?;
        let task = t.tasks.get(index).ok_or_else(|| invalid("task index out of range"))?;
        let protocol = EvalProtocol {
            shots,
            queries_per_class,
            episodes,
            n_way: (n_way > 0).then_some(n_way),
        };
        let mut r = rng::substream(seed, &format!("ffi/eval/{}", task.task_id));
        *out = evaluate(&m.params, &m.net, task, &protocol, &mut r)?.mean;
        Ok(())
    })
}
