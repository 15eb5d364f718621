#ifndef RSMGAN_H
#define RSMGAN_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum RsmganStatus {
  RSMGAN_STATUS_OK = 0,
  RSMGAN_STATUS_NULL_POINTER = 1,
  RSMGAN_STATUS_INVALID_ARGUMENT = 2,
  RSMGAN_STATUS_SHAPE = 3,
  RSMGAN_STATUS_DIVERGED = 4,
  RSMGAN_STATUS_FORMAT = 5,
  RSMGAN_STATUS_CONFIG = 6,
  RSMGAN_STATUS_IO = 7,
  RSMGAN_STATUS_PANIC = 8,
  RSMGAN_STATUS_BUFFER_TOO_SMALL = 9,
} RsmganStatus;

/**
 * Correlation matrices of one series set.
 */
typedef struct RsmganMcm RsmganMcm;

/**
 * A trained reconstruction model.
 */
typedef struct RsmganModel RsmganModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *rsmgan_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rsmgan_version(void);

/**
 * Builds correlation matrices from `n_series` series of `length` points,
 * stored series after series in `values`.
 *
 * # Safety
 * `values` must hold `n_series * length` doubles and `windows` `n_windows`
 * entries; `out` must be writable.
 */
enum RsmganStatus rsmgan_mcm_build(const double *values,
                                   size_t n_series,
                                   size_t length,
                                   const size_t *windows,
                                   size_t n_windows,
                                   size_t step,
                                   struct RsmganMcm **out);

/**
 * Number of steps in `mcm` (0 for NULL).
 *
 * # Safety
 * `mcm` must be NULL or a live handle.
 */
size_t rsmgan_mcm_len(const struct RsmganMcm *mcm);

/**
 * Copies step `step`'s `n × n × channels` block into `out`.
 *
 * # Safety
 * `mcm` must be a live handle and `out` hold `capacity` doubles.
 */
enum RsmganStatus rsmgan_mcm_step(const struct RsmganMcm *mcm,
                                  size_t step,
                                  double *out,
                                  size_t capacity);

/**
 * # Safety
 * `mcm` must be NULL or a handle not yet freed.
 */
void rsmgan_mcm_free(struct RsmganMcm *mcm);

/**
 * Loads a model checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum RsmganStatus rsmgan_model_load(const char *path, struct RsmganModel **out);

/**
 * Writes `[n, channels, slots]` of the model's input.
 *
 * # Safety
 * `model` must be a live handle and `out` hold 3 entries.
 */
enum RsmganStatus rsmgan_model_shape(const struct RsmganModel *model, size_t *out);

/**
 * Reconstructs one stacked input (`slots × n × n × channels`, target
 * last). `mask` holds one byte per slot (0 = masked). Writes the
 * reconstruction (`n × n × channels`) and the first-channel residual
 * (`n × n`).
 *
 * # Safety
 * Buffers must have the sizes implied by [`rsmgan_model_shape`].
 */
enum RsmganStatus rsmgan_model_reconstruct(const struct RsmganModel *model,
                                           const double *slots,
                                           const uint8_t *mask,
                                           double *out_reconstruction,
                                           double *out_residual);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void rsmgan_model_free(struct RsmganModel *model);

/**
 * Anomaly score of an `n × n` residual; `holistic` selects context_h.
 *
 * # Safety
 * `residual` must hold `n * n` doubles and `out` be writable.
 */
enum RsmganStatus rsmgan_score(const double *residual,
                               size_t n,
                               double theta,
                               bool holistic,
                               size_t *out);

/**
 * Elbow selection over `n` scores. Selected series indices (by descending
 * score) go to `out_selected`; their count to `out_k`.
 *
 * # Safety
 * `scores` must hold `n` doubles, `out_selected` `capacity` entries.
 */
enum RsmganStatus rsmgan_select_elbow(const double *scores,
                                      size_t n,
                                      size_t *out_selected,
                                      size_t capacity,
                                      size_t *out_k);

/**
 * Masked softmax attention over `n_slots` states of `dim` values each
 * (current state last). Writes the combined state (`dim`) and weights
 * (`n_slots`).
 *
 * # Safety
 * Buffers must have the stated sizes.
 */
enum RsmganStatus rsmgan_attention(const double *states,
                                   size_t n_slots,
                                   size_t dim,
                                   const uint8_t *mask,
                                   double rescale,
                                   double *out_combined,
                                   double *out_weights);

/**
 * Runs a full experiment from a TOML config. `out_dir` may be NULL to
 * keep the configured output directory.
 *
 * # Safety
 * Both strings must be NULL-terminated (or `out_dir` NULL).
 */
enum RsmganStatus rsmgan_run_experiment(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RSMGAN_H */
