//! C ABI over a trained checkpoint and the metric helpers.
//!
//! Every fallible call returns a [`PrlStatus`]. On failure the message is
//! kept per thread and read back with [`prl_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use prl::data::{cumulative_rewards, padded_context, DataError, DiscountMode, StepRewardAverages, PAD};
use prl::eval::{hr_ndcg, rank_items, rank_of};
use prl::model::{Checkpoint, CheckpointError, ModelError, PromptBatch, PrlModel as Model};
use prl::tensor::TensorError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    Panic = 6,
}

/// Discount convention of [`prl_cumulative_rewards`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrlDiscount {
    /// Discount indexed by absolute step.
    Absolute = 0,
    /// Discount relative to the current step.
    Relative = 1,
}

/// Opaque handle to a loaded checkpoint.
pub struct PrlModel {
    model: Model,
    step_rewards: Option<StepRewardAverages>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(PrlStatus, String);

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure(PrlStatus::InvalidArgument, msg.into())
    }

    fn null(what: &str) -> Self {
        Failure(PrlStatus::NullPointer, format!("{what} is null"))
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match e {
            ModelError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)) => PrlStatus::Numerical,
            _ => PrlStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => Failure(PrlStatus::Io, e.to_string()),
            CheckpointError::Model(m) => m.into(),
            other => Failure(PrlStatus::Format, other.to_string()),
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::invalid(e.to_string())
    }
}

/// Runs `f`, records any failure or panic, and returns its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PrlStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PrlStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or valid for `len` reads.
unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or valid for `len` writes.
unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a>(model: *const PrlModel) -> Result<&'a PrlModel, Failure> {
    model.as_ref().ok_or_else(|| Failure::null("model"))
}

impl PrlModel {
    fn logits(&self, items: &[u32], step: usize, reward: f64) -> Result<Vec<f64>, Failure> {
        let n = self.model.config().n_items;
        if items.is_empty() {
            return Err(Failure::invalid("history is empty"));
        }
        if let Some(&bad) = items.iter().find(|&&i| i == PAD || i as usize > n) {
            return Err(Failure::invalid(format!("item {bad} outside 1..={n}")));
        }
        if step == 0 {
            return Err(Failure::invalid("steps start at 1"));
        }
        if !reward.is_finite() {
            return Err(Failure::invalid(format!("reward {reward} is not finite")));
        }
        let mut batch = PromptBatch::default();
        batch.push(padded_context(items), step, reward);
        Ok(self.model.score(&batch)?)
    }
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn prl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn prl_model_load(path: *const c_char, out: *mut *mut PrlModel) -> PrlStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::null("path"));
        }
        let out = out.as_mut().ok_or_else(|| Failure::null("out"))?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::invalid("path is not UTF-8"))?;
        let ck = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(PrlModel {
            model: ck.model,
            step_rewards: ck.step_rewards,
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`prl_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn prl_model_free(model: *mut PrlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of candidate items; valid item indices are `1..=n`. Returns 0 for
/// a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn prl_model_num_items(model: *const PrlModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config().n_items)
}

/// Average cumulative reward of training prompts at `step`, scaled by `mu`:
/// the default inference reward.
///
/// # Safety
/// `model` must be a live handle and `out` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn prl_model_inference_reward(
    model: *const PrlModel,
    step: usize,
    mu: f64,
    out: *mut f64,
) -> PrlStatus {
    guard(|| {
        let m = handle(model)?;
        let out = out.as_mut().ok_or_else(|| Failure::null("out"))?;
        if step == 0 || !mu.is_finite() {
            return Err(Failure::invalid("step must be at least 1 and mu finite"));
        }
        let averages = m
            .step_rewards
            .as_ref()
            .ok_or_else(|| Failure(PrlStatus::Format, "checkpoint carries no step rewards".into()))?;
        *out = mu * averages.get(step);
        Ok(())
    })
}

/// Next-item logits for a history `items[0..len]` (oldest first) at `step`
/// under prompt reward `reward`. `logits[i]` scores item `i + 1`;
/// `logits_len` must equal [`prl_model_num_items`].
///
/// # Safety
/// `items` valid for `len` reads, `logits` for `logits_len` writes.
#[no_mangle]
pub unsafe extern "C" fn prl_model_score(
    model: *const PrlModel,
    items: *const u32,
    len: usize,
    step: usize,
    reward: f64,
    logits: *mut f64,
    logits_len: usize,
) -> PrlStatus {
    guard(|| {
        let m = handle(model)?;
        let n = m.model.config().n_items;
        if logits_len != n {
            return Err(Failure::invalid(format!("logits buffer holds {logits_len}, need {n}")));
        }
        let scores = m.logits(input(items, len, "items")?, step, reward)?;
        output(logits, logits_len, "logits")?.copy_from_slice(&scores);
        Ok(())
    })
}

/// Writes the `k` highest-scoring items, best first, ties broken by the
/// smaller index. `k` may not exceed [`prl_model_num_items`].
///
/// # Safety
/// `items` valid for `len` reads, `out` for `k` writes.
#[no_mangle]
pub unsafe extern "C" fn prl_model_recommend(
    model: *const PrlModel,
    items: *const u32,
    len: usize,
    step: usize,
    reward: f64,
    out: *mut u32,
    k: usize,
) -> PrlStatus {
    guard(|| {
        let m = handle(model)?;
        let n = m.model.config().n_items;
        if k == 0 || k > n {
            return Err(Failure::invalid(format!("k = {k} outside 1..={n}")));
        }
        let scores = m.logits(input(items, len, "items")?, step, reward)?;
        output(out, k, "out")?.copy_from_slice(&rank_items(&scores)[..k]);
        Ok(())
    })
}

/// Cumulative rewards `R_1..R_n` of immediate rewards `rewards[0..n]` with
/// discount `lambda` in `[0, 1]`. `mode` is a [`PrlDiscount`] value.
///
/// # Safety
/// `rewards` valid for `n` reads, `out` for `n` writes.
#[no_mangle]
pub unsafe extern "C" fn prl_cumulative_rewards(
    rewards: *const f64,
    n: usize,
    lambda: f64,
    mode: u32,
    out: *mut f64,
) -> PrlStatus {
    guard(|| {
        let mode = match mode {
            m if m == PrlDiscount::Absolute as u32 => DiscountMode::Absolute,
            m if m == PrlDiscount::Relative as u32 => DiscountMode::Relative,
            other => return Err(Failure::invalid(format!("unknown discount mode {other}"))),
        };
        let rewards = input(rewards, n, "rewards")?;
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Failure::invalid("rewards must be finite"));
        }
        let values = cumulative_rewards(rewards, lambda, mode)?;
        output(out, n, "out")?.copy_from_slice(&values);
        Ok(())
    })
}

/// Hit and NDCG at cutoff `k` of item `target` (1-based) under `logits[0..n]`.
///
/// # Safety
/// `logits` valid for `n` reads; `hit` and `ndcg` valid for one write each.
#[no_mangle]
pub unsafe extern "C" fn prl_hr_ndcg(
    logits: *const f64,
    n: usize,
    target: u32,
    k: usize,
    hit: *mut f64,
    ndcg: *mut f64,
) -> PrlStatus {
    guard(|| {
        let logits = input(logits, n, "logits")?;
        if target == 0 || target as usize > n {
            return Err(Failure::invalid(format!("target {target} outside 1..={n}")));
        }
        if logits.iter().any(|v| v.is_nan()) {
            return Err(Failure(PrlStatus::Numerical, "logits contain NaN".into()));
        }
        let hit = hit.as_mut().ok_or_else(|| Failure::null("hit"))?;
        let ndcg = ndcg.as_mut().ok_or_else(|| Failure::null("ndcg"))?;
        (*hit, *ndcg) = hr_ndcg(rank_of(logits, target), k);
        Ok(())
    })
}
