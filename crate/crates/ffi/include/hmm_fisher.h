#ifndef HMM_FISHER_H
#define HMM_FISHER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfStatus {
  HF_STATUS_OK = 0,
  HF_STATUS_NULL_POINTER = 1,
  HF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Parameters outside the model's region, or a uniform ergodicity failure.
   */
  HF_STATUS_ASSUMPTION = 3,
  /**
   * The operation needs a finite alphabet or exceeds a size limit.
   */
  HF_STATUS_CAPABILITY = 4,
  HF_STATUS_SINGULAR_INFORMATION = 5,
  HF_STATUS_NUMERICAL = 6,
  HF_STATUS_PANIC = 7,
} HfStatus;

/**
 * Opaque model handle.
 */
typedef struct HfModel HfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *hf_last_error(void);

/**
 * Builds catalog model `name` ("M1", "M2", "M3-point", "M4") at `theta`, or
 * at its default point when `theta` is null.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `theta`, when not null, must point
 * to `theta_len` doubles; `out` must be writable.
 */
enum HfStatus hf_model_new(const char *name,
                           const double *theta,
                           uintptr_t theta_len,
                           struct HfModel **out);

/**
 * # Safety
 * `model` must come from [`hf_model_new`] and not have been freed. Null is
 * accepted.
 */
void hf_model_free(struct HfModel *model);

/**
 * Parameter dimension `p`, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uintptr_t hf_model_param_dim(const struct HfModel *model);

/**
 * Stationary log-likelihood of `y[0..n]`.
 *
 * # Safety
 * `model` must be a live handle, `y` must point to `n` doubles and `out`
 * must be writable.
 */
enum HfStatus hf_stationary_loglik(const struct HfModel *model,
                                   const double *y,
                                   uintptr_t n,
                                   double *out);

/**
 * Stationary log-likelihood with its gradient (`p` doubles) and Hessian
 * (`p × p`). `score` and `hessian` may be null to skip them.
 *
 * # Safety
 * As [`hf_stationary_loglik`]; non-null `score`/`hessian` must hold `p` and
 * `p * p` doubles.
 */
enum HfStatus hf_score_hessian(const struct HfModel *model,
                               const double *y,
                               uintptr_t n,
                               double *loglik,
                               double *score,
                               double *hessian);

/**
 * `I_{Y_1^n}` by exact enumeration (finite alphabets only).
 *
 * # Safety
 * `model` must be a live handle and `info` must hold `p * p` doubles.
 */
enum HfStatus hf_info_exact(const struct HfModel *model, uintptr_t n, double *info);

/**
 * Asymptotic information as the limit of the one-step conditional
 * information with `memory` past observations, averaged over `replicates`
 * windows. `stderr` (entrywise, `p × p`) may be null.
 *
 * # Safety
 * `model` must be a live handle; `info` and non-null `stderr` must hold
 * `p * p` doubles.
 */
enum HfStatus hf_info_asymptotic(const struct HfModel *model,
                                 uintptr_t memory,
                                 uintptr_t replicates,
                                 uint64_t seed,
                                 double *info,
                                 double *stderr);

/**
 * Eigen-decomposition verdict on a symmetric `p × p` matrix: writes the
 * smallest eigenvalue, the numerical rank and 1 when the matrix is
 * nonsingular under threshold `max(tau_rel · λ_max, tau_abs)`, else 0.
 *
 * # Safety
 * `matrix` must hold `p * p` doubles; the outputs must be writable.
 */
enum HfStatus hf_singularity(const double *matrix,
                             uintptr_t p,
                             double tau_rel,
                             double tau_abs,
                             double *lambda_min,
                             uintptr_t *rank,
                             int32_t *nonsingular);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HMM_FISHER_H */
