//! C ABI over the core solvers: opaque handles, integer status codes, and
//! caller-owned output buffers. Every function is panic-safe; failures leave
//! a message readable through `klc_last_error_message`.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};

use klc::blocks::{self, BlocksConfig, BlocksSolver, PlanResult};
use klc::chain::{self, ChainProblem, ControlSolution};
use klc::pathint::{mc_optimal_cost, ContinuousDynamics, Drift, PathProblem, StateCost};

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlcStatus {
    KlcOk = 0,
    /// A dimension or table shape did not match.
    KlcShapeError = 1,
    /// A value was outside its valid domain.
    KlcDomainError = 2,
    /// An enumeration or flattening budget was exceeded.
    KlcBudgetError = 3,
    /// Every trajectory from the start state has infinite cost.
    KlcNoFiniteCost = 4,
    /// Queried a state with no admissible behavior.
    KlcDeadState = 5,
    /// A distribution places mass outside the free dynamics' support.
    KlcSupportError = 6,
    /// Monte Carlo estimation failed to produce a finite estimate.
    KlcEstimationError = 7,
    /// An iterative solver stopped before meeting its tolerance.
    KlcNonConvergence = 8,
    /// Problem-file or artifact parsing failed.
    KlcParseError = 9,
    KlcIoError = 10,
    /// A required pointer argument was null.
    KlcNullPointer = 11,
    /// An internal invariant failed; state may be inconsistent.
    KlcPanic = 12,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_last_error(message: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.to_string());
}

fn status_of(error: &klc::Error) -> KlcStatus {
    use klc::Error::*;
    match error {
        Shape(_) => KlcStatus::KlcShapeError,
        Domain(_) => KlcStatus::KlcDomainError,
        Budget(_) => KlcStatus::KlcBudgetError,
        NoFiniteCost(_) => KlcStatus::KlcNoFiniteCost,
        DeadState(_) => KlcStatus::KlcDeadState,
        Support(_) => KlcStatus::KlcSupportError,
        Estimation(_) => KlcStatus::KlcEstimationError,
        NonConvergence(_) => KlcStatus::KlcNonConvergence,
        Parse(_) => KlcStatus::KlcParseError,
        Io(_) => KlcStatus::KlcIoError,
    }
}

fn fail(error: &klc::Error) -> KlcStatus {
    set_last_error(&error.to_string());
    status_of(error)
}

/// Run a body that may panic, converting panics into `KlcPanic`.
fn guarded(body: impl FnOnce() -> KlcStatus) -> KlcStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic");
            KlcStatus::KlcPanic
        }
    }
}

macro_rules! require_nonnull {
    ($($ptr:expr),+) => {
        $(
            if $ptr.is_null() {
                set_last_error(concat!(stringify!($ptr), " is null"));
                return KlcStatus::KlcNullPointer;
            }
        )+
    };
}

/// Copy the message of the most recent error on this thread into `buffer`
/// (NUL-terminated, truncated to `capacity`). Returns the full message
/// length, not counting the terminator; call with capacity 0 to size a
/// buffer.
#[no_mangle]
pub unsafe extern "C" fn klc_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let message = e.borrow();
        let bytes = message.as_bytes();
        if !buffer.is_null() && capacity > 0 {
            let n = bytes.len().min(capacity - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buffer.cast::<u8>(), n);
            *buffer.add(n) = 0;
        }
        bytes.len()
    })
}

// ---------------------------------------------------------------------------
// chains

/// A finite-state control problem (opaque).
pub struct KlcChain {
    inner: ChainProblem,
}

/// A solved chain: optimal cost, per-step distributions, slice marginals
/// (opaque).
pub struct KlcSolution {
    solution: ControlSolution,
    marginals: Vec<Vec<f64>>,
}

/// Build a chain problem.
///
/// `kernels` holds `horizon` row-major `num_states x num_states` transition
/// matrices back to back; rows may sum to less than one (lost mass is an
/// implicit dead end). `costs` holds `horizon + 1` slices of `num_states`
/// state costs; `INFINITY` forbids a state. On success `*out` owns the
/// problem; release it with `klc_chain_free`.
#[no_mangle]
pub unsafe extern "C" fn klc_chain_new(
    num_states: usize,
    horizon: usize,
    kernels: *const f64,
    costs: *const f64,
    out: *mut *mut KlcChain,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(kernels, costs, out);
        let kernel_slices = (0..horizon)
            .map(|t| {
                std::slice::from_raw_parts(
                    kernels.add(t * num_states * num_states),
                    num_states * num_states,
                )
                .to_vec()
            })
            .collect();
        let cost_slices = (0..=horizon)
            .map(|t| std::slice::from_raw_parts(costs.add(t * num_states), num_states).to_vec())
            .collect();
        match ChainProblem::new(num_states, horizon, kernel_slices, cost_slices) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(KlcChain { inner }));
                KlcStatus::KlcOk
            }
            Err(e) => fail(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn klc_chain_free(chain: *mut KlcChain) {
    if !chain.is_null() {
        drop(Box::from_raw(chain));
    }
}

/// Solve a chain from `start`; on success `*out` owns the solution.
#[no_mangle]
pub unsafe extern "C" fn klc_chain_solve(
    chain: *const KlcChain,
    start: usize,
    out: *mut *mut KlcSolution,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(chain, out);
        let problem = &(*chain).inner;
        if start >= problem.num_states() {
            set_last_error("start state out of range");
            return KlcStatus::KlcDomainError;
        }
        let potentials = chain::build_potentials(problem);
        let messages = chain::backward_pass(&potentials);
        let solved = chain::solve(problem, start)
            .and_then(|s| Ok((s, chain::optimal_marginals(&messages, &potentials, start)?)));
        match solved {
            Ok((solution, marginals)) => {
                *out = Box::into_raw(Box::new(KlcSolution {
                    solution,
                    marginals,
                }));
                KlcStatus::KlcOk
            }
            Err(e) => fail(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn klc_solution_free(solution: *mut KlcSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// The optimal expected cost `-log Z(start)`.
#[no_mangle]
pub unsafe extern "C" fn klc_solution_optimal_cost(
    solution: *const KlcSolution,
    out: *mut f64,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(solution, out);
        *out = (*solution).solution.optimal_cost;
        KlcStatus::KlcOk
    })
}

/// Marginal of the optimally controlled state at slice `t` (`0..=horizon`),
/// written into `buffer` of length `num_states`.
#[no_mangle]
pub unsafe extern "C" fn klc_solution_marginal(
    solution: *const KlcSolution,
    t: usize,
    buffer: *mut f64,
    capacity: usize,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(solution, buffer);
        let s = &*solution;
        let Some(slice) = s.marginals.get(t) else {
            set_last_error("slice index out of range");
            return KlcStatus::KlcDomainError;
        };
        if capacity < slice.len() {
            set_last_error("buffer too small");
            return KlcStatus::KlcShapeError;
        }
        std::ptr::copy_nonoverlapping(slice.as_ptr(), buffer, slice.len());
        KlcStatus::KlcOk
    })
}

/// Optimal step distribution `p(. | x^t = x)`, written into `buffer` of
/// length `num_states`. Fails with `KlcDeadState` when `x` is unreachable or
/// forbidden at `t`.
#[no_mangle]
pub unsafe extern "C" fn klc_solution_step_distribution(
    solution: *const KlcSolution,
    t: usize,
    x: usize,
    buffer: *mut f64,
    capacity: usize,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(solution, buffer);
        let s = &*solution;
        let Some(row) = s.solution.step_distributions.get(t).and_then(|s| s.get(x)) else {
            set_last_error("time or state index out of range");
            return KlcStatus::KlcDomainError;
        };
        let Some(dist) = row else {
            set_last_error("state has no admissible behavior at this slice");
            return KlcStatus::KlcDeadState;
        };
        if capacity < dist.len() {
            set_last_error("buffer too small");
            return KlcStatus::KlcShapeError;
        }
        std::ptr::copy_nonoverlapping(dist.as_ptr(), buffer, dist.len());
        KlcStatus::KlcOk
    })
}

// ---------------------------------------------------------------------------
// blocks world

/// A solved blocks-world planning problem (opaque).
pub struct KlcBlocksPlan {
    plan: PlanResult,
    locations: usize,
    blocks: usize,
}

/// Plan on a ring of `locations` stacks holding `blocks` blocks in total.
///
/// `initial` lists each stack's height (or pass null for the symmetric
/// split). `use_cvm` selects the variational solver instead of exact
/// flattening. On success `*out` owns the plan; release it with
/// `klc_blocks_plan_free`. Returns `KlcNonConvergence` when the variational
/// solver stops at its iteration cap (no plan is returned).
#[no_mangle]
pub unsafe extern "C" fn klc_blocks_plan(
    locations: usize,
    blocks: usize,
    horizon: usize,
    lambda: f64,
    initial: *const usize,
    use_cvm: bool,
    out: *mut *mut KlcBlocksPlan,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(out);
        let config = if initial.is_null() {
            match BlocksConfig::symmetric(locations, blocks, horizon, lambda) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            }
        } else {
            let config = BlocksConfig {
                locations,
                blocks,
                horizon,
                lambda,
                initial: std::slice::from_raw_parts(initial, locations).to_vec(),
            };
            if let Err(e) = config.validate() {
                return fail(&e);
            }
            config
        };
        let solver = if use_cvm {
            BlocksSolver::Cvm
        } else {
            BlocksSolver::Exact
        };
        match blocks::plan(&config, solver, None) {
            Ok(plan) => {
                if !plan.converged {
                    set_last_error("variational solver stopped before meeting tolerance");
                    return KlcStatus::KlcNonConvergence;
                }
                *out = Box::into_raw(Box::new(KlcBlocksPlan {
                    plan,
                    locations,
                    blocks,
                }));
                KlcStatus::KlcOk
            }
            Err(e) => fail(&e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn klc_blocks_plan_free(plan: *mut KlcBlocksPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// The plan's optimal expected cost `-log Z(x^0)`.
#[no_mangle]
pub unsafe extern "C" fn klc_blocks_plan_optimal_cost(
    plan: *const KlcBlocksPlan,
    out: *mut f64,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(plan, out);
        *out = (*plan).plan.optimal_cost;
        KlcStatus::KlcOk
    })
}

/// Height distribution of stack `location` at slice `t` (`0..=horizon`),
/// written into `buffer` of length `blocks + 1`.
#[no_mangle]
pub unsafe extern "C" fn klc_blocks_plan_location_marginal(
    plan: *const KlcBlocksPlan,
    t: usize,
    location: usize,
    buffer: *mut f64,
    capacity: usize,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(plan, buffer);
        let p = &*plan;
        if location >= p.locations || t >= p.plan.location_marginals.len() {
            set_last_error("slice or location index out of range");
            return KlcStatus::KlcDomainError;
        }
        if capacity < p.blocks + 1 {
            set_last_error("buffer too small");
            return KlcStatus::KlcShapeError;
        }
        let dist = &p.plan.location_marginals[t][location];
        std::ptr::copy_nonoverlapping(dist.as_ptr(), buffer, dist.len());
        KlcStatus::KlcOk
    })
}

/// Posterior over the moved stack (`stack_buffer`, length `locations`) and
/// the direction (`direction_buffer`, length 3 for -1, 0, +1) at transition
/// `t` (`1..=horizon`).
#[no_mangle]
pub unsafe extern "C" fn klc_blocks_plan_selectors(
    plan: *const KlcBlocksPlan,
    t: usize,
    stack_buffer: *mut f64,
    stack_capacity: usize,
    direction_buffer: *mut f64,
    direction_capacity: usize,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(plan, stack_buffer, direction_buffer);
        let p = &*plan;
        let Some(sel) = p.plan.selectors.iter().find(|s| s.slice == t) else {
            set_last_error("transition index out of range");
            return KlcStatus::KlcDomainError;
        };
        if stack_capacity < sel.k.len() || direction_capacity < sel.l.len() {
            set_last_error("buffer too small");
            return KlcStatus::KlcShapeError;
        }
        std::ptr::copy_nonoverlapping(sel.k.as_ptr(), stack_buffer, sel.k.len());
        std::ptr::copy_nonoverlapping(sel.l.as_ptr(), direction_buffer, sel.l.len());
        KlcStatus::KlcOk
    })
}

// ---------------------------------------------------------------------------
// path-integral problems

/// Monte Carlo estimate of the optimal cost of a linear-Gaussian problem
/// with a quadratic terminal cost `alpha/2 |x|^2`.
///
/// `noise` is the row-major `dimension x dimension` process covariance;
/// `drift` is a row-major linear drift matrix or null for none; `x0` is the
/// start state. Trajectory `i` always uses generator stream `i`, so the
/// estimate depends on `seed` but not on `threads`.
#[no_mangle]
pub unsafe extern "C" fn klc_path_mc_optimal_cost(
    dimension: usize,
    horizon: usize,
    noise: *const f64,
    drift: *const f64,
    alpha: f64,
    x0: *const f64,
    samples: usize,
    seed: u64,
    threads: usize,
    out_cost: *mut f64,
    out_standard_error: *mut f64,
) -> KlcStatus {
    guarded(|| {
        require_nonnull!(noise, x0, out_cost, out_standard_error);
        let noise = std::slice::from_raw_parts(noise, dimension * dimension).to_vec();
        let drift = if drift.is_null() {
            Drift::Zero
        } else {
            Drift::Linear(std::slice::from_raw_parts(drift, dimension * dimension).to_vec())
        };
        let start = std::slice::from_raw_parts(x0, dimension);
        let estimate = ContinuousDynamics::new(dimension, drift, noise)
            .and_then(|dynamics| {
                PathProblem::new(dynamics, horizon, StateCost::QuadraticTerminal { alpha })
            })
            .and_then(|problem| mc_optimal_cost(&problem, start, samples, seed, threads));
        match estimate {
            Ok(est) => {
                *out_cost = est.cost;
                *out_standard_error = est.standard_error;
                KlcStatus::KlcOk
            }
            Err(e) => fail(&e),
        }
    })
}
