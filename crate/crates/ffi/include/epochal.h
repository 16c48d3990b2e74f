#ifndef EPOCHAL_H
#define EPOCHAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EpochalStatus {
  EPOCHAL_STATUS_OK = 0,
  EPOCHAL_STATUS_NULL_POINTER = 1,
  EPOCHAL_STATUS_INVALID_ARGUMENT = 2,
  EPOCHAL_STATUS_SIMULATION = 3,
  EPOCHAL_STATUS_TYPE_VIOLATION = 4,
  EPOCHAL_STATUS_OPTIMIZER = 5,
  EPOCHAL_STATUS_PANIC = 99,
} EpochalStatus;

typedef enum EpochalProtocol {
  EPOCHAL_PROTOCOL_NAIVE = 0,
  EPOCHAL_PROTOCOL_BILATERAL = 1,
} EpochalProtocol;

typedef enum EpochalDecisionKind {
  EPOCHAL_DECISION_KIND_COMMITTED = 0,
  EPOCHAL_DECISION_KIND_ROLLED_BACK = 1,
  EPOCHAL_DECISION_KIND_NO_DECISION = 2,
} EpochalDecisionKind;

typedef enum EpochalClass {
  EPOCHAL_CLASS_TOP = 0,
  EPOCHAL_CLASS_BOTTOM_ALL = 1,
  EPOCHAL_CLASS_MIXED = 2,
} EpochalClass;

/**
 * Optimizer state with per-field epoch tags.
 */
typedef struct EpochalOptimizer EpochalOptimizer;

/**
 * Finished protocol run.
 */
typedef struct EpochalRun EpochalRun;

typedef struct EpochalReliabilityRow {
  double q;
  uint64_t n;
  double pr_atomic;
  double published;
} EpochalReliabilityRow;

typedef struct EpochalRunConfig {
  enum EpochalProtocol protocol;
  size_t components;
  uint64_t seed;
  uint64_t delay_lo;
  uint64_t delay_hi;
  /**
   * Per-component crash probability; crashes land on random stages.
   */
  double crash_prob;
  uint64_t epoch;
  /**
   * Naive only.
   */
  uint64_t boundary;
  /**
   * Bilateral only.
   */
  uint64_t ack_timeout;
} EpochalRunConfig;

/**
 * Per-component durable point: -1 for e-1, 0 for bottom, 1 for e.
 */
typedef int8_t EpochalPoint;

typedef struct EpochalAdamW {
  double beta1;
  double beta2;
  double lr;
  double eps;
  double weight_decay;
} EpochalAdamW;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *epochal_last_error(void);

void epochal_clear_error(void);

/**
 * Pr[atomic] = q^n + (1-q)^n.
 *
 * # Safety
 * `out` must be a valid pointer to a double.
 */
enum EpochalStatus epochal_pr_atomic(double q, uint64_t n, double *out);

size_t epochal_reliability_row_count(void);

/**
 * # Safety
 * `out` must be a valid pointer to an `EpochalReliabilityRow`.
 */
enum EpochalStatus epochal_reliability_row(size_t index, struct EpochalReliabilityRow *out);

/**
 * First-moment difference caused by restoring the moment one epoch behind
 * a fresh state: `beta1 * (1 - beta1) * g`, elementwise.
 *
 * # Safety
 * `g` and `out` must each point to `len` doubles.
 */
enum EpochalStatus epochal_moment_skew(const double *g, size_t len, double beta1, double *out);

/**
 * Builds and runs one protocol execution.
 *
 * # Safety
 * `config` must be valid; `out` must be a valid pointer to a handle slot.
 */
enum EpochalStatus epochal_run_protocol(const struct EpochalRunConfig *config,
                                        struct EpochalRun **out);

/**
 * # Safety
 * `run` must come from `epochal_run_protocol` and not be used afterwards.
 */
void epochal_run_free(struct EpochalRun *run);

/**
 * # Safety
 * `run` must be a live handle; `kind` and `epoch` must be valid pointers.
 */
enum EpochalStatus epochal_run_decision(const struct EpochalRun *run,
                                        enum EpochalDecisionKind *kind,
                                        uint64_t *epoch);

/**
 * # Safety
 * `run` must be a live handle; `out` a valid pointer.
 */
enum EpochalStatus epochal_run_class(const struct EpochalRun *run, enum EpochalClass *out);

/**
 * Copies the final epoch vector into `out` (capacity `cap`) and stores the
 * component count in `len`. Pass `out = NULL` to query the length.
 *
 * # Safety
 * `run` must be a live handle; `out` must hold `cap` entries when non-null.
 */
enum EpochalStatus epochal_run_vector(const struct EpochalRun *run,
                                      EpochalPoint *out,
                                      size_t cap,
                                      size_t *len);

/**
 * Hash of the run's event trace; equal configs give equal hashes.
 *
 * # Safety
 * `run` must be a live handle; `out` a valid pointer.
 */
enum EpochalStatus epochal_run_trace_hash(const struct EpochalRun *run, uint64_t *out);

struct EpochalAdamW epochal_adamw_default(void);

/**
 * # Safety
 * `w` must point to `dim` doubles; `out` must be a valid handle slot.
 */
enum EpochalStatus epochal_optimizer_new(const double *w,
                                         size_t dim,
                                         uint64_t rng,
                                         struct EpochalOptimizer **out);

/**
 * # Safety
 * `opt` must come from `epochal_optimizer_new` and not be used afterwards.
 */
void epochal_optimizer_free(struct EpochalOptimizer *opt);

/**
 * One AdamW step. With `strict` set, a state whose tags disagree is
 * rejected with `TypeViolation` and left unchanged.
 *
 * # Safety
 * `opt` must be live; `grad` must point to `dim` doubles; `hyper` valid.
 */
enum EpochalStatus epochal_optimizer_step(struct EpochalOptimizer *opt,
                                          const double *grad,
                                          size_t dim,
                                          const struct EpochalAdamW *hyper,
                                          bool strict);

/**
 * Replaces the first moment with `m` and tags it one epoch behind the
 * weights, as a checkpoint restored from two different epochs would be.
 *
 * # Safety
 * `opt` must be live; `m` must point to `dim` doubles.
 */
enum EpochalStatus epochal_optimizer_lag_moment(struct EpochalOptimizer *opt,
                                                const double *m,
                                                size_t dim);

/**
 * # Safety
 * `opt` must be live; `out` must hold `cap` doubles.
 */
enum EpochalStatus epochal_optimizer_weights(const struct EpochalOptimizer *opt,
                                             double *out,
                                             size_t cap);

/**
 * # Safety
 * `opt` must be live; `out` must hold `cap` doubles.
 */
enum EpochalStatus epochal_optimizer_moment(const struct EpochalOptimizer *opt,
                                            double *out,
                                            size_t cap);

/**
 * Epoch of the weights, or `u64::MAX` for a null handle.
 *
 * # Safety
 * `opt` must be live or null.
 */
uint64_t epochal_optimizer_epoch(const struct EpochalOptimizer *opt);

/**
 * True when every field carries the same epoch tag.
 *
 * # Safety
 * `opt` must be live or null.
 */
bool epochal_optimizer_is_consistent(const struct EpochalOptimizer *opt);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EPOCHAL_H */
