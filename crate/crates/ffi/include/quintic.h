#ifndef QUINTIC_H
#define QUINTIC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code of every call. Values 2 to 4 agree with the CLI exit codes.
 */
typedef enum QuinticStatus {
  QUINTIC_STATUS_OK = 0,
  QUINTIC_STATUS_NULL_POINTER = 1,
  QUINTIC_STATUS_INVALID_INPUT = 2,
  QUINTIC_STATUS_RESOURCE_CAP = 3,
  QUINTIC_STATUS_NUMERICAL = 4,
  QUINTIC_STATUS_IO = 5,
  QUINTIC_STATUS_PANIC = 6,
} QuinticStatus;

/**
 * Periodic grid.
 */
typedef struct QuinticGrid QuinticGrid;

/**
 * Separable kernel.
 */
typedef struct QuinticKernel QuinticKernel;

/**
 * One-particle field on a grid.
 */
typedef struct QuinticWave QuinticWave;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty when none failed.
 */
const char *quintic_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *quintic_version(void);

/**
 * # Safety
 * `out_grid` must be a valid pointer.
 */
enum QuinticStatus quintic_grid_new(size_t dim,
                                    size_t points,
                                    double length,
                                    struct QuinticGrid **out_grid);

/**
 * Number of nodes `M^d`.
 *
 * # Safety
 * `grid` must come from [`quintic_grid_new`]; `out_len` must be valid.
 */
enum QuinticStatus quintic_grid_len(const struct QuinticGrid *grid, size_t *out_len);

/**
 * # Safety
 * `grid` must come from [`quintic_grid_new`] and not be used afterwards.
 */
void quintic_grid_free(struct QuinticGrid *grid);

/**
 * Normalized Gaussian packet centred at the origin with momentum along the first axis.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_wave_gaussian(const struct QuinticGrid *grid,
                                         double width,
                                         double momentum,
                                         struct QuinticWave **out_wave);

/**
 * Field from `len = M^d` real and imaginary parts in row-major node order.
 *
 * # Safety
 * `re` and `im` must point to `len` doubles.
 */
enum QuinticStatus quintic_wave_from_values(const struct QuinticGrid *grid,
                                            const double *re,
                                            const double *im,
                                            size_t len,
                                            struct QuinticWave **out_wave);

/**
 * Copies the `len = M^d` node values out.
 *
 * # Safety
 * `re` and `im` must point to writable buffers of `len` doubles.
 */
enum QuinticStatus quintic_wave_values(const struct QuinticWave *wave,
                                       double *re,
                                       double *im,
                                       size_t len);

/**
 * `h^d sum |phi|^2`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_wave_mass(const struct QuinticWave *wave, double *out_mass);

/**
 * Time attached to the field.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_wave_time(const struct QuinticWave *wave, double *out_t);

/**
 * # Safety
 * `wave` must come from this library and not be used afterwards.
 */
void quintic_wave_free(struct QuinticWave *wave);

/**
 * Strang evolution to `total` with couplings `b0 + lambda3` (quintic) and `lambda2` (cubic).
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_nls_evolve(const struct QuinticWave *wave,
                                      double b0,
                                      double lambda2,
                                      double lambda3,
                                      double dt,
                                      double total,
                                      struct QuinticWave **out_wave);

/**
 * `|phi><phi|^{(x)k}`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_kernel_factorized(const struct QuinticWave *wave,
                                             size_t k,
                                             struct QuinticKernel **out_kernel);

/**
 * Sobolev-weighted Hilbert-Schmidt norm.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_kernel_norm(const struct QuinticKernel *kernel,
                                       double alpha,
                                       double *out_norm);

/**
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_kernel_order(const struct QuinticKernel *kernel, size_t *out_order);

/**
 * `B_{j;k+1,k+2} gamma`, with `j` 1-based.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_kernel_contract(const struct QuinticKernel *kernel,
                                           size_t j,
                                           struct QuinticKernel **out_kernel);

/**
 * `U(t) gamma U(t)^*`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum QuinticStatus quintic_kernel_free_propagate(const struct QuinticKernel *kernel,
                                                 double t,
                                                 struct QuinticKernel **out_kernel);

/**
 * # Safety
 * `kernel` must come from this library and not be used afterwards.
 */
void quintic_kernel_free(struct QuinticKernel *kernel);

/**
 * `prod_{j=1}^n (r + 2j - 2)`.
 *
 * # Safety
 * `out_count` must be valid.
 */
enum QuinticStatus quintic_board_map_count(size_t r, size_t n, uint64_t *out_count);

/**
 * Exhaustive number of upper-echelon maps, refusing more than `cap` maps.
 *
 * # Safety
 * `out_count` must be valid.
 */
enum QuinticStatus quintic_board_count_echelon(size_t r,
                                               size_t n,
                                               uint64_t cap,
                                               uint64_t *out_count);

/**
 * Canonical form of the map `picks[0..n]` under the deterministic move order.
 * Writes the canonical picks and the sigma (both length `n`) and the move count.
 *
 * # Safety
 * `picks`, `out_picks` and `out_sigma` must hold `n` entries.
 */
enum QuinticStatus quintic_board_to_echelon(size_t r,
                                            const size_t *picks,
                                            size_t n,
                                            size_t budget,
                                            size_t *out_picks,
                                            size_t *out_sigma,
                                            size_t *out_moves);

/**
 * `int dy <P - y>^{-(2 - 2 alpha)} <y>^{-2}` over `R^d`, `P` of length `d`.
 * A divergent integral reports `converged = 0` and an infinite value.
 *
 * # Safety
 * `p` must hold `d` doubles; out-pointers must be valid.
 */
enum QuinticStatus quintic_crucialint(double alpha,
                                      size_t d,
                                      const double *p,
                                      double *out_value,
                                      double *out_error,
                                      int32_t *out_converged);

/**
 * Runs a named experiment as the CLI would. `config_toml` may be `NULL` for
 * defaults; `has_seed = 0` keeps the configured or default seed.
 *
 * # Safety
 * String arguments must be NUL-terminated.
 */
enum QuinticStatus quintic_run_experiment(const char *name,
                                          const char *config_toml,
                                          const char *out_dir,
                                          uint64_t seed,
                                          int32_t has_seed,
                                          size_t threads);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUINTIC_H */
