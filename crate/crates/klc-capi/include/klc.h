/* C interface to the klc solvers; generated by cbindgen. */

#ifndef KLC_H
#define KLC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum KlcStatus {
  KLC_OK = 0,
  /**
   * A dimension or table shape did not match.
   */
  KLC_SHAPE_ERROR = 1,
  /**
   * A value was outside its valid domain.
   */
  KLC_DOMAIN_ERROR = 2,
  /**
   * An enumeration or flattening budget was exceeded.
   */
  KLC_BUDGET_ERROR = 3,
  /**
   * Every trajectory from the start state has infinite cost.
   */
  KLC_NO_FINITE_COST = 4,
  /**
   * Queried a state with no admissible behavior.
   */
  KLC_DEAD_STATE = 5,
  /**
   * A distribution places mass outside the free dynamics' support.
   */
  KLC_SUPPORT_ERROR = 6,
  /**
   * Monte Carlo estimation failed to produce a finite estimate.
   */
  KLC_ESTIMATION_ERROR = 7,
  /**
   * An iterative solver stopped before meeting its tolerance.
   */
  KLC_NON_CONVERGENCE = 8,
  /**
   * Problem-file or artifact parsing failed.
   */
  KLC_PARSE_ERROR = 9,
  KLC_IO_ERROR = 10,
  /**
   * A required pointer argument was null.
   */
  KLC_NULL_POINTER = 11,
  /**
   * An internal invariant failed; state may be inconsistent.
   */
  KLC_PANIC = 12,
} KlcStatus;

/**
 * A solved blocks-world planning problem (opaque).
 */
typedef struct KlcBlocksPlan KlcBlocksPlan;

/**
 * A finite-state control problem (opaque).
 */
typedef struct KlcChain KlcChain;

/**
 * A solved chain: optimal cost, per-step distributions, slice marginals
 * (opaque).
 */
typedef struct KlcSolution KlcSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the message of the most recent error on this thread into `buffer`
 * (NUL-terminated, truncated to `capacity`). Returns the full message
 * length, not counting the terminator; call with capacity 0 to size a
 * buffer.
 */
size_t klc_last_error_message(char *buffer, size_t capacity);

/**
 * Build a chain problem.
 *
 * `kernels` holds `horizon` row-major `num_states x num_states` transition
 * matrices back to back; rows may sum to less than one (lost mass is an
 * implicit dead end). `costs` holds `horizon + 1` slices of `num_states`
 * state costs; `INFINITY` forbids a state. On success `*out` owns the
 * problem; release it with `klc_chain_free`.
 */
enum KlcStatus klc_chain_new(size_t num_states,
                             size_t horizon,
                             const double *kernels,
                             const double *costs,
                             struct KlcChain **out);

void klc_chain_free(struct KlcChain *chain);

/**
 * Solve a chain from `start`; on success `*out` owns the solution.
 */
enum KlcStatus klc_chain_solve(const struct KlcChain *chain,
                               size_t start,
                               struct KlcSolution **out);

void klc_solution_free(struct KlcSolution *solution);

/**
 * The optimal expected cost `-log Z(start)`.
 */
enum KlcStatus klc_solution_optimal_cost(const struct KlcSolution *solution, double *out);

/**
 * Marginal of the optimally controlled state at slice `t` (`0..=horizon`),
 * written into `buffer` of length `num_states`.
 */
enum KlcStatus klc_solution_marginal(const struct KlcSolution *solution,
                                     size_t t,
                                     double *buffer,
                                     size_t capacity);

/**
 * Optimal step distribution `p(. | x^t = x)`, written into `buffer` of
 * length `num_states`. Fails with `KlcDeadState` when `x` is unreachable or
 * forbidden at `t`.
 */
enum KlcStatus klc_solution_step_distribution(const struct KlcSolution *solution,
                                              size_t t,
                                              size_t x,
                                              double *buffer,
                                              size_t capacity);

/**
 * Plan on a ring of `locations` stacks holding `blocks` blocks in total.
 *
 * `initial` lists each stack's height (or pass null for the symmetric
 * split). `use_cvm` selects the variational solver instead of exact
 * flattening. On success `*out` owns the plan; release it with
 * `klc_blocks_plan_free`. Returns `KlcNonConvergence` when the variational
 * solver stops at its iteration cap (no plan is returned).
 */
enum KlcStatus klc_blocks_plan(size_t locations,
                               size_t blocks,
                               size_t horizon,
                               double lambda,
                               const size_t *initial,
                               bool use_cvm,
                               struct KlcBlocksPlan **out);

void klc_blocks_plan_free(struct KlcBlocksPlan *plan);

/**
 * The plan's optimal expected cost `-log Z(x^0)`.
 */
enum KlcStatus klc_blocks_plan_optimal_cost(const struct KlcBlocksPlan *plan, double *out);

/**
 * Height distribution of stack `location` at slice `t` (`0..=horizon`),
 * written into `buffer` of length `blocks + 1`.
 */
enum KlcStatus klc_blocks_plan_location_marginal(const struct KlcBlocksPlan *plan,
                                                 size_t t,
                                                 size_t location,
                                                 double *buffer,
                                                 size_t capacity);

/**
 * Posterior over the moved stack (`stack_buffer`, length `locations`) and
 * the direction (`direction_buffer`, length 3 for -1, 0, +1) at transition
 * `t` (`1..=horizon`).
 */
enum KlcStatus klc_blocks_plan_selectors(const struct KlcBlocksPlan *plan,
                                         size_t t,
                                         double *stack_buffer,
                                         size_t stack_capacity,
                                         double *direction_buffer,
                                         size_t direction_capacity);

/**
 * Monte Carlo estimate of the optimal cost of a linear-Gaussian problem
 * with a quadratic terminal cost `alpha/2 |x|^2`.
 *
 * `noise` is the row-major `dimension x dimension` process covariance;
 * `drift` is a row-major linear drift matrix or null for none; `x0` is the
 * start state. Trajectory `i` always uses generator stream `i`, so the
 * estimate depends on `seed` but not on `threads`.
 */
enum KlcStatus klc_path_mc_optimal_cost(size_t dimension,
                                        size_t horizon,
                                        const double *noise,
                                        const double *drift,
                                        double alpha,
                                        const double *x0,
                                        size_t samples,
                                        uint64_t seed,
                                        size_t threads,
                                        double *out_cost,
                                        double *out_standard_error);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* KLC_H */
