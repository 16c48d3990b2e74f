//! C interface to the epochal simulator.
//!
//! Every fallible call returns an [`EpochalStatus`]; on failure the message is
//! available from [`epochal_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use epochal::lattice::{pr_atomic_analytic, reliability_table, AtomicityClass, BinaryModelParams, EpochPoint};
use epochal::optimizer::{adamw_step, moment_skew, AdamWHyperparams, EpochTypedOptimizerState, StepMode};
use epochal::protocols::{
    run_bilateral, run_naive, BilateralConfig, CrashPlan, Decision, FaultProfile, NaiveCheckpointConfig,
    ProtocolOutcome,
};
use epochal::sim::{DelayPolicy, SimConfig, Simulation, VirtualTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Simulation = 3,
    TypeViolation = 4,
    Optimizer = 5,
    Panic = 99,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: EpochalStatus, msg: impl Into<String>) -> EpochalStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> EpochalStatus) -> EpochalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(EpochalStatus::Panic, "internal panic"),
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn epochal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn epochal_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Pr[atomic] = q^n + (1-q)^n.
///
/// # Safety
/// `out` must be a valid pointer to a double.
#[no_mangle]
pub unsafe extern "C" fn epochal_pr_atomic(q: f64, n: u64, out: *mut f64) -> EpochalStatus {
    guard(|| {
        if out.is_null() {
            return fail(EpochalStatus::NullPointer, "out is null");
        }
        match BinaryModelParams::new(q, n) {
            Ok(p) => {
                *out = pr_atomic_analytic(p);
                EpochalStatus::Ok
            }
            Err(e) => fail(EpochalStatus::InvalidArgument, e.to_string()),
        }
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct EpochalReliabilityRow {
    pub q: f64,
    pub n: u64,
    pub pr_atomic: f64,
    pub published: f64,
}

#[no_mangle]
pub extern "C" fn epochal_reliability_row_count() -> usize {
    reliability_table().len()
}

/// # Safety
/// `out` must be a valid pointer to an `EpochalReliabilityRow`.
#[no_mangle]
pub unsafe extern "C" fn epochal_reliability_row(index: usize, out: *mut EpochalReliabilityRow) -> EpochalStatus {
    guard(|| {
        if out.is_null() {
            return fail(EpochalStatus::NullPointer, "out is null");
        }
        let rows = reliability_table();
        let Some(r) = rows.get(index) else {
            return fail(EpochalStatus::InvalidArgument, format!("row {index} out of range"));
        };
        *out = EpochalReliabilityRow {
            q: r.q,
            n: r.n,
            pr_atomic: pr_atomic_analytic(BinaryModelParams { q: r.q, n: r.n }),
            published: r.published,
        };
        EpochalStatus::Ok
    })
}

/// First-moment difference caused by restoring the moment one epoch behind
/// a fresh state: `beta1 * (1 - beta1) * g`, elementwise.
///
/// # Safety
/// `g` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn epochal_moment_skew(g: *const f64, len: usize, beta1: f64, out: *mut f64) -> EpochalStatus {
    guard(|| {
        if len > 0 && (g.is_null() || out.is_null()) {
            return fail(EpochalStatus::NullPointer, "g or out is null");
        }
        if !(0.0..1.0).contains(&beta1) {
            return fail(EpochalStatus::InvalidArgument, format!("beta1 must be in [0, 1), got {beta1}"));
        }
        if len == 0 {
            return EpochalStatus::Ok;
        }
        let g = std::slice::from_raw_parts(g, len);
        let dm = moment_skew(g, beta1);
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&dm);
        EpochalStatus::Ok
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochalProtocol {
    Naive = 0,
    Bilateral = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EpochalRunConfig {
    pub protocol: EpochalProtocol,
    pub components: usize,
    pub seed: u64,
    pub delay_lo: u64,
    pub delay_hi: u64,
    /// Per-component crash probability; crashes land on random stages.
    pub crash_prob: f64,
    pub epoch: u64,
    /// Naive only.
    pub boundary: u64,
    /// Bilateral only.
    pub ack_timeout: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochalDecisionKind {
    Committed = 0,
    RolledBack = 1,
    NoDecision = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochalClass {
    Top = 0,
    BottomAll = 1,
    Mixed = 2,
}

/// Per-component durable point: -1 for e-1, 0 for bottom, 1 for e.
pub type EpochalPoint = i8;

/// Finished protocol run.
pub struct EpochalRun {
    outcome: ProtocolOutcome,
}

/// Builds and runs one protocol execution.
///
/// # Safety
/// `config` must be valid; `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn epochal_run_protocol(config: *const EpochalRunConfig, out: *mut *mut EpochalRun) -> EpochalStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            return fail(EpochalStatus::NullPointer, "config or out is null");
        }
        *out = ptr::null_mut();
        let c = *config;
        if !(0.0..=1.0).contains(&c.crash_prob) {
            return fail(EpochalStatus::InvalidArgument, "crash_prob must be in [0, 1]");
        }
        let delay = DelayPolicy::UniformRandom { lo: c.delay_lo, hi: c.delay_hi };
        let mut sim = match Simulation::new(SimConfig::new(c.components, delay, c.seed)) {
            Ok(s) => s,
            Err(e) => return fail(EpochalStatus::InvalidArgument, e.to_string()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed);
        let plan = CrashPlan::random(c.components, &FaultProfile::every_stage(c.crash_prob), &mut rng);
        let result = plan.apply(&mut sim).and_then(|()| match c.protocol {
            EpochalProtocol::Naive => run_naive(&mut sim, &NaiveCheckpointConfig::new(c.epoch, VirtualTime(c.boundary))),
            EpochalProtocol::Bilateral => run_bilateral(&mut sim, &BilateralConfig::new(c.epoch, c.ack_timeout)),
        });
        match result {
            Ok(outcome) => {
                *out = Box::into_raw(Box::new(EpochalRun { outcome }));
                EpochalStatus::Ok
            }
            Err(e) => fail(EpochalStatus::Simulation, e.to_string()),
        }
    })
}

/// # Safety
/// `run` must come from `epochal_run_protocol` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn epochal_run_free(run: *mut EpochalRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `run` must be a live handle; `kind` and `epoch` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn epochal_run_decision(
    run: *const EpochalRun,
    kind: *mut EpochalDecisionKind,
    epoch: *mut u64,
) -> EpochalStatus {
    if run.is_null() || kind.is_null() || epoch.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    let (k, e) = match (*run).outcome.decision {
        Decision::Committed(e) => (EpochalDecisionKind::Committed, e),
        Decision::RolledBack(e) => (EpochalDecisionKind::RolledBack, e),
        Decision::NoDecision => (EpochalDecisionKind::NoDecision, (*run).outcome.epoch),
    };
    *kind = k;
    *epoch = e;
    EpochalStatus::Ok
}

/// # Safety
/// `run` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn epochal_run_class(run: *const EpochalRun, out: *mut EpochalClass) -> EpochalStatus {
    if run.is_null() || out.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    *out = match (*run).outcome.vector_class() {
        AtomicityClass::Top => EpochalClass::Top,
        AtomicityClass::BottomAll => EpochalClass::BottomAll,
        AtomicityClass::Mixed => EpochalClass::Mixed,
    };
    EpochalStatus::Ok
}

/// Copies the final epoch vector into `out` (capacity `cap`) and stores the
/// component count in `len`. Pass `out = NULL` to query the length.
///
/// # Safety
/// `run` must be a live handle; `out` must hold `cap` entries when non-null.
#[no_mangle]
pub unsafe extern "C" fn epochal_run_vector(
    run: *const EpochalRun,
    out: *mut EpochalPoint,
    cap: usize,
    len: *mut usize,
) -> EpochalStatus {
    if run.is_null() || len.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    let v = (*run).outcome.final_vector.entries();
    *len = v.len();
    if out.is_null() {
        return EpochalStatus::Ok;
    }
    if cap < v.len() {
        return fail(EpochalStatus::InvalidArgument, format!("buffer holds {cap}, need {}", v.len()));
    }
    let dst = std::slice::from_raw_parts_mut(out, v.len());
    for (d, p) in dst.iter_mut().zip(v) {
        *d = match p {
            EpochPoint::EMinus1 => -1,
            EpochPoint::Bottom => 0,
            EpochPoint::E => 1,
        };
    }
    EpochalStatus::Ok
}

/// Hash of the run's event trace; equal configs give equal hashes.
///
/// # Safety
/// `run` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn epochal_run_trace_hash(run: *const EpochalRun, out: *mut u64) -> EpochalStatus {
    if run.is_null() || out.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    *out = (*run).outcome.trace.hash();
    EpochalStatus::Ok
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EpochalAdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[no_mangle]
pub extern "C" fn epochal_adamw_default() -> EpochalAdamW {
    let d = AdamWHyperparams::default();
    EpochalAdamW {
        beta1: d.beta1,
        beta2: d.beta2,
        lr: d.lr,
        eps: d.eps,
        weight_decay: d.weight_decay,
    }
}

/// Optimizer state with per-field epoch tags.
pub struct EpochalOptimizer {
    state: EpochTypedOptimizerState,
}

/// # Safety
/// `w` must point to `dim` doubles; `out` must be a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_new(
    w: *const f64,
    dim: usize,
    rng: u64,
    out: *mut *mut EpochalOptimizer,
) -> EpochalStatus {
    guard(|| {
        if w.is_null() || out.is_null() {
            return fail(EpochalStatus::NullPointer, "w or out is null");
        }
        if dim == 0 {
            return fail(EpochalStatus::InvalidArgument, "dim must be positive");
        }
        let w = std::slice::from_raw_parts(w, dim).to_vec();
        *out = Box::into_raw(Box::new(EpochalOptimizer {
            state: EpochTypedOptimizerState::new(w, rng),
        }));
        EpochalStatus::Ok
    })
}

/// # Safety
/// `opt` must come from `epochal_optimizer_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_free(opt: *mut EpochalOptimizer) {
    if !opt.is_null() {
        drop(Box::from_raw(opt));
    }
}

/// One AdamW step. With `strict` set, a state whose tags disagree is
/// rejected with `TypeViolation` and left unchanged.
///
/// # Safety
/// `opt` must be live; `grad` must point to `dim` doubles; `hyper` valid.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_step(
    opt: *mut EpochalOptimizer,
    grad: *const f64,
    dim: usize,
    hyper: *const EpochalAdamW,
    strict: bool,
) -> EpochalStatus {
    guard(|| {
        if opt.is_null() || grad.is_null() || hyper.is_null() {
            return fail(EpochalStatus::NullPointer, "null argument");
        }
        let h = *hyper;
        let hyper = AdamWHyperparams {
            beta1: h.beta1,
            beta2: h.beta2,
            lr: h.lr,
            eps: h.eps,
            weight_decay: h.weight_decay,
        };
        let g = std::slice::from_raw_parts(grad, dim);
        let mode = if strict { StepMode::Strict } else { StepMode::Coerce };
        let opt = &mut *opt;
        match adamw_step(&opt.state, g, &hyper, mode) {
            Ok(next) => {
                opt.state = next;
                EpochalStatus::Ok
            }
            Err(e @ epochal::OptimizerError::TypeViolation(_)) => fail(EpochalStatus::TypeViolation, e.to_string()),
            Err(e) => fail(EpochalStatus::Optimizer, e.to_string()),
        }
    })
}

/// Replaces the first moment with `m` and tags it one epoch behind the
/// weights, as a checkpoint restored from two different epochs would be.
///
/// # Safety
/// `opt` must be live; `m` must point to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_lag_moment(
    opt: *mut EpochalOptimizer,
    m: *const f64,
    dim: usize,
) -> EpochalStatus {
    if opt.is_null() || m.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    let opt = &mut *opt;
    if dim != opt.state.dim() {
        return fail(EpochalStatus::InvalidArgument, format!("dim {dim} != {}", opt.state.dim()));
    }
    if opt.state.epoch() == 0 {
        return fail(EpochalStatus::InvalidArgument, "state at epoch 0 has no previous moment");
    }
    let m = std::slice::from_raw_parts(m, dim).to_vec();
    opt.state = opt.state.with_lagged_moment(m);
    EpochalStatus::Ok
}

/// # Safety
/// `opt` must be live; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_weights(
    opt: *const EpochalOptimizer,
    out: *mut f64,
    cap: usize,
) -> EpochalStatus {
    if opt.is_null() || out.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    let w = &(*opt).state.w;
    if cap < w.len() {
        return fail(EpochalStatus::InvalidArgument, format!("buffer holds {cap}, need {}", w.len()));
    }
    std::slice::from_raw_parts_mut(out, w.len()).copy_from_slice(w);
    EpochalStatus::Ok
}

/// # Safety
/// `opt` must be live; `out` must hold `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_moment(
    opt: *const EpochalOptimizer,
    out: *mut f64,
    cap: usize,
) -> EpochalStatus {
    if opt.is_null() || out.is_null() {
        return fail(EpochalStatus::NullPointer, "null argument");
    }
    let m = &(*opt).state.m;
    if cap < m.len() {
        return fail(EpochalStatus::InvalidArgument, format!("buffer holds {cap}, need {}", m.len()));
    }
    std::slice::from_raw_parts_mut(out, m.len()).copy_from_slice(m);
    EpochalStatus::Ok
}

/// Epoch of the weights, or `u64::MAX` for a null handle.
///
/// # Safety
/// `opt` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_epoch(opt: *const EpochalOptimizer) -> u64 {
    if opt.is_null() {
        return u64::MAX;
    }
    (*opt).state.epoch()
}

/// True when every field carries the same epoch tag.
///
/// # Safety
/// `opt` must be live or null.
#[no_mangle]
pub unsafe extern "C" fn epochal_optimizer_is_consistent(opt: *const EpochalOptimizer) -> bool {
    !opt.is_null() && (*opt).state.is_consistent()
}
