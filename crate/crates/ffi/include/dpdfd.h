#ifndef DPDFD_H
#define DPDFD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DpdfdStatus {
  DPDFD_STATUS_OK = 0,
  DPDFD_STATUS_NULL_POINTER = 1,
  DPDFD_STATUS_DIMENSION = 2,
  DPDFD_STATUS_VALIDATION = 3,
  DPDFD_STATUS_DEGENERATE = 4,
  DPDFD_STATUS_DOMAIN = 5,
  DPDFD_STATUS_INFEASIBLE = 6,
  DPDFD_STATUS_NUMERICAL = 7,
  DPDFD_STATUS_IO = 8,
  DPDFD_STATUS_FORMAT = 9,
  DPDFD_STATUS_PANIC = 10,
} DpdfdStatus;

typedef enum DpdfdAccounting {
  DPDFD_ACCOUNTING_ABSOLUTE = 0,
  DPDFD_ACCOUNTING_CONSISTENT = 1,
} DpdfdAccounting;

typedef enum DpdfdBoundMode {
  DPDFD_BOUND_MODE_NORMALIZE = 0,
  DPDFD_BOUND_MODE_CLIP = 1,
} DpdfdBoundMode;

// Opaque model handle.
typedef struct DpdfdModel DpdfdModel;

// Opaque Gaussian noise stream.
typedef struct DpdfdNoiseSource DpdfdNoiseSource;

typedef struct DpdfdAccountingParams {
  double norm_bound;
  uint64_t classes;
  uint64_t batch;
  uint64_t iterations;
  double noise_scale;
  double delta;
  enum DpdfdAccounting mode;
} DpdfdAccountingParams;

typedef struct DpdfdMechanismConfig {
  double norm_bound;
  double noise_scale;
  double stability;
  enum DpdfdBoundMode mode;
} DpdfdMechanismConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`) and returns the full message length.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
uintptr_t dpdfd_last_error(char *buf, uintptr_t len);

// # Safety
// `result` must be a valid pointer.
enum DpdfdStatus dpdfd_sensitivity(double norm_bound, uint64_t classes, double *result);

// # Safety
// `params` and `result` must be valid pointers.
enum DpdfdStatus dpdfd_rdp_per_query(const struct DpdfdAccountingParams *params,
                                     double lambda,
                                     double *result);

// # Safety
// `result` must be a valid pointer.
enum DpdfdStatus dpdfd_rdp_to_dp(double eps_rdp, double lambda, double delta, double *result);

// ε minimized over the standard order grid. `lambda_star` receives NaN when
// nothing was spent; it may be null.
//
// # Safety
// `params` and `epsilon` must be valid pointers; `lambda_star` may be null.
enum DpdfdStatus dpdfd_optimal_epsilon(const struct DpdfdAccountingParams *params,
                                       double *epsilon,
                                       double *lambda_star);

// Smallest σ meeting `target` ε; `params.noise_scale` is ignored.
//
// # Safety
// `params` and `sigma` must be valid pointers.
enum DpdfdStatus dpdfd_calibrate_sigma(double target,
                                       const struct DpdfdAccountingParams *params,
                                       double *sigma);

// Largest iteration count within `budget`; `params.iterations` is ignored.
//
// # Safety
// `params` and `iterations` must be valid pointers.
enum DpdfdStatus dpdfd_max_iterations(double budget,
                                      const struct DpdfdAccountingParams *params,
                                      uint64_t *iterations);

// Creates a noise stream; free it with [`dpdfd_noise_source_free`].
struct DpdfdNoiseSource *dpdfd_noise_source_new(uint64_t seed);

// # Safety
// `source` must be null or a handle from [`dpdfd_noise_source_new`] that has
// not been freed.
void dpdfd_noise_source_free(struct DpdfdNoiseSource *source);

// Sanitizes `batch` row-major gradients of length `dim` into `result`
// (length `dim`).
//
// # Safety
// `grads` must hold `batch·dim` values, `result` `dim` values; `cfg` and
// `source` must be valid.
enum DpdfdStatus dpdfd_sanitize_batch(const double *grads,
                                      uintptr_t batch,
                                      uintptr_t dim,
                                      const struct DpdfdMechanismConfig *cfg,
                                      struct DpdfdNoiseSource *source,
                                      double *result);

// Loads a JSON checkpoint; free the handle with [`dpdfd_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `model` a valid pointer.
enum DpdfdStatus dpdfd_model_load(const char *path, struct DpdfdModel **model);

// # Safety
// `model` must be null or a live handle from [`dpdfd_model_load`].
void dpdfd_model_free(struct DpdfdModel *model);

// # Safety
// `model`, `input_dim` and `output_dim` must be valid pointers.
enum DpdfdStatus dpdfd_model_dims(const struct DpdfdModel *model,
                                  uintptr_t *input_dim,
                                  uintptr_t *output_dim);

// Forward pass on `rows` row-major inputs; writes `rows·output_dim` logits.
//
// # Safety
// `inputs` must hold `rows·input_dim` values and `logits`
// `rows·output_dim` values.
enum DpdfdStatus dpdfd_model_forward(const struct DpdfdModel *model,
                                     const double *inputs,
                                     uintptr_t rows,
                                     double *logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPDFD_H */
