//! C ABI over `cmarl`.
//!
//! Every fallible function returns a [`CmarlStatus`]; on failure the message
//! is available from [`cmarl_last_error_message`] on the same thread. Handles
//! are opaque and owned by the caller, who releases them with the matching
//! `*_free` function. Strings returned through `char **` out-parameters are
//! released with [`cmarl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cmarl::acq::train;
use cmarl::harness::config::{ExperimentConfig, Instance};
use cmarl::harness::{run_experiment, Task};
use cmarl::mscore::{estimate, Adjacency, VertexHunter};
use cmarl::{Error, MembershipMatrix};
use nalgebra::DMatrix;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmarlStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// Bad argument, shape or unsatisfied assumption.
    InvalidArgument = 2,
    /// Config or JSON could not be parsed or validated.
    Config = 3,
    /// Non-finite values, singular systems or degenerate input.
    Numeric = 4,
    Io = 5,
    /// A panic was caught at the boundary.
    Panic = 6,
}

/// Membership matrix Γ (N×K, rows on the simplex).
pub struct CmarlMembership(MembershipMatrix);

/// A configured instance: MDP, memberships, features and initial policies.
pub struct CmarlInstance {
    config: ExperimentConfig,
    seed: u64,
    inner: Instance,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CmarlStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape(_) | Error::TableTooLarge { .. } | Error::EnumerationCap { .. } | Error::Assumption(_) | Error::RankDeficient { .. } => {
            CmarlStatus::InvalidArgument
        }
        Error::Config(_) | Error::Json(_) => CmarlStatus::Config,
        Error::Singular(_) | Error::NumericAbort { .. } | Error::Degenerate(_) => CmarlStatus::Numeric,
        Error::Io(_) => CmarlStatus::Io,
    }
}

struct Fail(CmarlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CmarlStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and a thread-local
/// message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CmarlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CmarlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| payload.downcast_ref::<String>().cloned()).unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            CmarlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(CmarlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(CmarlStatus::InvalidArgument, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Last error message on this thread, or null. Valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn cmarl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn cmarl_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmarl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmarl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds Γ from `n*k` row-major weights.
///
/// # Safety
/// `data` must point to `n*k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_from_rows(data: *const f64, n: usize, k: usize, out: *mut *mut CmarlMembership) -> CmarlStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let flat = std::slice::from_raw_parts(data, n * k);
        let rows: Vec<Vec<f64>> = flat.chunks(k.max(1)).take(n).map(<[f64]>::to_vec).collect();
        write_handle(out, CmarlMembership(MembershipMatrix::from_rows(&rows)?));
        Ok(())
    })
}

/// Samples `n` rows from Dirichlet(`alpha[0..k]`).
///
/// # Safety
/// `alpha` must point to `k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_dirichlet(n: usize, alpha: *const f64, k: usize, seed: u64, out: *mut *mut CmarlMembership) -> CmarlStatus {
    guard(|| {
        if alpha.is_null() {
            return Err(null("alpha"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let alpha = std::slice::from_raw_parts(alpha, k);
        write_handle(out, CmarlMembership(MembershipMatrix::dirichlet(n, alpha, seed)?));
        Ok(())
    })
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_agents(m: *const CmarlMembership) -> usize {
    m.as_ref().map_or(0, |m| m.0.n())
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_communities(m: *const CmarlMembership) -> usize {
    m.as_ref().map_or(0, |m| m.0.k())
}

/// Copies row `i` into `out[0..len]`; `len` must equal the community count.
///
/// # Safety
/// `m` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_row(m: *const CmarlMembership, i: usize, out: *mut f64, len: usize) -> CmarlStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("membership"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        if i >= m.0.n() || len != m.0.k() {
            return Err(Fail(CmarlStatus::InvalidArgument, format!("row {i} / length {len} out of range for {}x{}", m.0.n(), m.0.k())));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&m.0.row(i));
        Ok(())
    })
}

/// Γ as JSON (`{"N":…,"K":…,"rows":[…]}`).
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_to_json(m: *const CmarlMembership, out: *mut *mut c_char) -> CmarlStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("membership"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        write_string(out, serde_json::to_string(&m.0.to_json()).map_err(Error::from)?)
    })
}

/// # Safety
/// `m` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cmarl_membership_free(m: *mut CmarlMembership) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Estimates memberships from a dense symmetric 0/1 adjacency matrix
/// (`n*n`, row-major) with `k` communities. `threshold <= 0` selects the
/// default ratio threshold.
///
/// # Safety
/// `adjacency` must point to `n*n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_estimate_membership(adjacency: *const f64, n: usize, k: usize, threshold: f64, seed: u64, out: *mut *mut CmarlMembership) -> CmarlStatus {
    guard(|| {
        if adjacency.is_null() {
            return Err(null("adjacency"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let data = std::slice::from_raw_parts(adjacency, n * n);
        let adj = Adjacency::from_matrix(DMatrix::from_row_slice(n, n, data))?;
        let threshold = (threshold > 0.0).then_some(threshold);
        let est = estimate(&adj.matrix, k, threshold, seed, VertexHunter::Spa)?;
        write_handle(out, CmarlMembership(est.gamma));
        Ok(())
    })
}

/// Builds the instance described by a JSON config (merged over the preset of
/// its `kind`) for one seed.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_new(config_json: *const c_char, seed: u64, out: *mut *mut CmarlInstance) -> CmarlStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config = ExperimentConfig::from_json(text)?;
        config.validate()?;
        let inner = Instance::build(&config, seed)?;
        write_handle(out, CmarlInstance { config, seed, inner });
        Ok(())
    })
}

/// # Safety
/// `inst` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_agents(inst: *const CmarlInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.inner.mdp.num_agents())
}

/// # Safety
/// `inst` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_states(inst: *const CmarlInstance) -> usize {
    inst.as_ref().map_or(0, |i| i.inner.mdp.num_states())
}

/// Copy of the instance's membership matrix.
///
/// # Safety
/// `inst` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_membership(inst: *const CmarlInstance, out: *mut *mut CmarlMembership) -> CmarlStatus {
    guard(|| {
        let inst = inst.as_ref().ok_or_else(|| null("instance"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        write_handle(out, CmarlMembership(inst.inner.gamma.clone()));
        Ok(())
    })
}

/// Exact long-run average reward of the initial policies (small instances
/// only).
///
/// # Safety
/// `inst` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_average_return(inst: *const CmarlInstance, out: *mut f64) -> CmarlStatus {
    guard(|| {
        let inst = inst.as_ref().ok_or_else(|| null("instance"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = cmarl::oracle::global_average_return(&inst.inner.mdp, &inst.inner.policies)?;
        Ok(())
    })
}

/// Trains the community Q-critic actor-critic on the instance and returns
/// the trace as CSV. The instance itself is not modified.
///
/// # Safety
/// `inst` must be a live handle; `trace_csv` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_train_q(inst: *const CmarlInstance, trace_csv: *mut *mut c_char) -> CmarlStatus {
    guard(|| {
        let inst = inst.as_ref().ok_or_else(|| null("instance"))?;
        if trace_csv.is_null() {
            return Err(null("trace_csv"));
        }
        let i = &inst.inner;
        let run = train(&i.mdp, &i.gamma, &i.phi, i.policies.clone(), &inst.config.train_config(inst.seed))?;
        write_string(trace_csv, run.trace.to_csv())
    })
}

/// # Safety
/// `inst` must be null or a live handle; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cmarl_instance_free(inst: *mut CmarlInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Runs a whole experiment as the CLI does. `task` is a subcommand name
/// (`train-q`, `train-v`, `train-active`, `compare-baseline`, `oracle`,
/// `transfer`, `estimate-membership`). When `out_dir` is non-null it
/// overrides the config's output directory. On success `artifacts_json`
/// receives the per-seed artifacts and the cross-seed report.
///
/// # Safety
/// String arguments must be NUL-terminated (`out_dir` may be null);
/// `artifacts_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmarl_run_experiment(config_json: *const c_char, task: *const c_char, out_dir: *const c_char, artifacts_json: *mut *mut c_char) -> CmarlStatus {
    guard(|| {
        let text = str_arg(config_json, "config_json")?;
        let task_name = str_arg(task, "task")?;
        if artifacts_json.is_null() {
            return Err(null("artifacts_json"));
        }
        let task: Task = serde_json::from_value(serde_json::Value::String(task_name.into())).map_err(|_| Fail(CmarlStatus::InvalidArgument, format!("unknown task {task_name:?}")))?;
        let mut cfg = ExperimentConfig::from_json(text)?;
        if !out_dir.is_null() {
            cfg.out_dir = Path::new(str_arg(out_dir, "out_dir")?).display().to_string();
        }
        let out = run_experiment(&cfg, task)?;
        let value = serde_json::json!({ "dir": out.dir.display().to_string(), "artifacts": out.artifacts, "report": out.report });
        write_string(artifacts_json, value.to_string())
    })
}
