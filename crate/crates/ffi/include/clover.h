#ifndef CLOVER_H
#define CLOVER_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum CloverStatus {
  CLOVER_STATUS_OK = 0,
  CLOVER_STATUS_NULL_POINTER = 1,
  CLOVER_STATUS_INVALID_ARGUMENT = 2,
  CLOVER_STATUS_SHAPE_MISMATCH = 3,
  CLOVER_STATUS_INVALID_HIERARCHY = 4,
  CLOVER_STATUS_DATA_ERROR = 5,
  CLOVER_STATUS_NUMERICAL_FAILURE = 6,
  CLOVER_STATUS_IO_ERROR = 7,
  CLOVER_STATUS_UTF8_ERROR = 8,
  CLOVER_STATUS_PANIC = 9,
} CloverStatus;

/**
 * Opaque aggregation matrix built from a hierarchy description.
 */
typedef struct CloverHierarchy CloverHierarchy;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t clover_last_error(char *buf, size_t len);

/**
 * Parse a TOML hierarchy description and build its aggregation matrix.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` a valid pointer.
 */
enum CloverStatus clover_hierarchy_from_toml(const char *toml, struct CloverHierarchy **out);

/**
 * Release a handle; null is ignored.
 *
 * # Safety
 * `h` must come from [`clover_hierarchy_from_toml`] and not be used again.
 */
void clover_hierarchy_free(struct CloverHierarchy *h);

/**
 * Number of hierarchy rows and bottom series.
 *
 * # Safety
 * `h` must be a live handle; outputs valid pointers.
 */
enum CloverStatus clover_hierarchy_dims(const struct CloverHierarchy *h,
                                        size_t *n_rows,
                                        size_t *n_bottom);

/**
 * Copy the `n_rows × n_bottom` 0/1 matrix into `out`.
 *
 * # Safety
 * `out` must be valid for `len` values.
 */
enum CloverStatus clover_hierarchy_matrix(const struct CloverHierarchy *h, double *out, size_t len);

/**
 * Aggregate `[n_bottom, width]` bottom values to `[n_rows, width]`.
 *
 * # Safety
 * Buffers must be valid for their stated lengths.
 */
enum CloverStatus clover_hierarchy_aggregate(const struct CloverHierarchy *h,
                                             const double *bottom,
                                             size_t bottom_len,
                                             size_t width,
                                             double *out,
                                             size_t out_len);

/**
 * Fair sample CRPS of `n` samples against `y`.
 *
 * # Safety
 * `samples` must be valid for `n` values; `out` a valid pointer.
 */
enum CloverStatus clover_crps(double y, const double *samples, size_t n, double *out);

/**
 * Closed-form CRPS of `N(mu, sigma²)` at `y`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CloverStatus clover_crps_normal(double y, double mu, double sigma, double *out);

/**
 * Pinball loss at level `q`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CloverStatus clover_quantile_loss(double y, double q, double pred, double *out);

/**
 * Fair energy score of `[dim, n]` samples (one column per sample) against `y[dim]`.
 *
 * # Safety
 * `y` must be valid for `dim` values, `samples` for `dim * n`.
 */
enum CloverStatus clover_energy_score(const double *y,
                                      size_t dim,
                                      const double *samples,
                                      size_t n,
                                      double beta,
                                      double *out);

/**
 * Draw coherent samples from the factor model.
 *
 * `mu` and `sigma` are `[n_bottom, n_horizons]`, `loadings` is
 * `[n_bottom, n_factors, n_horizons]`; `out` receives
 * `[n_rows, n_horizons, n_samples]`. Deterministic in `seed`.
 *
 * # Safety
 * Buffers must be valid for the lengths implied by the dimensions.
 */
enum CloverStatus clover_factor_sample(const struct CloverHierarchy *h,
                                       const double *mu,
                                       const double *sigma,
                                       const double *loadings,
                                       size_t n_factors,
                                       size_t n_horizons,
                                       size_t n_samples,
                                       uint64_t seed,
                                       double *out,
                                       size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLOVER_H */
