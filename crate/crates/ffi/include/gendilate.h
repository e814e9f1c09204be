#ifndef GENDILATE_H
#define GENDILATE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GdStatus {
  GD_STATUS_OK = 0,
  GD_STATUS_NULL_POINTER = 1,
  GD_STATUS_INVALID_ARGUMENT = 2,
  GD_STATUS_SHAPE_MISMATCH = 3,
  GD_STATUS_NON_FINITE = 4,
  GD_STATUS_PARSE = 5,
  GD_STATUS_CONFIG = 6,
  GD_STATUS_DIVERGED = 7,
  GD_STATUS_IO = 8,
  GD_STATUS_PANIC = 9,
} GdStatus;

/**
 * Dilation mask parameters (separable or general).
 */
typedef struct GdMask GdMask;

/**
 * Result of a training run.
 */
typedef struct GdReport GdReport;

/**
 * Dense row-major `f64` tensor.
 */
typedef struct GdTensor GdTensor;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * Valid until the next library call on the same thread.
 */
const char *gd_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gd_version(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void gd_string_free(char *s);

/**
 * Creates a tensor by copying `len` values laid out row-major in `shape`.
 *
 * # Safety
 * `shape` must point to `ndim` values and `data` to `len` values.
 */
enum GdStatus gd_tensor_new(const size_t *shape,
                            size_t ndim,
                            const double *data,
                            size_t len,
                            struct GdTensor **out);

/**
 * # Safety
 * `t` must be null or a live handle from this library.
 */
void gd_tensor_free(struct GdTensor *t);

/**
 * Number of dimensions, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t gd_tensor_ndim(const struct GdTensor *t);

/**
 * Number of elements, or 0 for a null handle.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
size_t gd_tensor_len(const struct GdTensor *t);

/**
 * Copies the shape into `out`, which holds `cap` entries.
 *
 * # Safety
 * `t` must be a live handle and `out` must hold `cap` values.
 */
enum GdStatus gd_tensor_shape(const struct GdTensor *t, size_t *out, size_t cap);

/**
 * Borrowed pointer to the row-major values; valid while `t` lives.
 *
 * # Safety
 * `t` must be null or a live handle.
 */
const double *gd_tensor_data(const struct GdTensor *t);

/**
 * Single-channel 1-D or 2-D dilated convolution with stride 1.
 * `same_padding` selects zero padding that keeps the input extent;
 * `correlation` false flips the kernel.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum GdStatus gd_conv_direct(const struct GdTensor *input,
                             const struct GdTensor *kernel,
                             size_t dilation,
                             bool same_padding,
                             bool correlation,
                             struct GdTensor **out);

/**
 * Barrier value `exp(10(x − 0.5)) + αx`; α must lie in [−0.1, 0.1].
 *
 * # Safety
 * `out` must be writable.
 */
enum GdStatus gd_barrier(double x, double alpha, double *out);

/**
 * Separable mask from row and column logit vectors with a per-axis
 * budget.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum GdStatus gd_mask_separable(const struct GdTensor *rows,
                                const struct GdTensor *cols,
                                size_t budget_rows,
                                size_t budget_cols,
                                struct GdMask **out);

/**
 * General mask from a logit matrix; the active-cell budget is
 * `budget_rows * budget_cols`.
 *
 * # Safety
 * `logits` must be live; `out` must be writable.
 */
enum GdStatus gd_mask_general(const struct GdTensor *logits,
                              size_t budget_rows,
                              size_t budget_cols,
                              struct GdMask **out);

/**
 * # Safety
 * `m` must be null or a live handle.
 */
void gd_mask_free(struct GdMask *m);

/**
 * Soft mask `σ(·)` as a new tensor.
 *
 * # Safety
 * `m` must be live; `out` must be writable.
 */
enum GdStatus gd_mask_soft(const struct GdMask *m, struct GdTensor **out);

/**
 * Binary mask under `threshold`, capped at the budget. `feasible` is set
 * to false when entries had to be dropped to meet the budget.
 *
 * # Safety
 * `m` must be live; `out` and `feasible` must be writable.
 */
enum GdStatus gd_mask_binarize(const struct GdMask *m,
                               double threshold,
                               struct GdTensor **out,
                               bool *feasible);

/**
 * Precision and recall of a learned binary mask against a reference.
 *
 * # Safety
 * Handles must be live; outputs must be writable.
 */
enum GdStatus gd_recovery_score(const struct GdTensor *learned,
                                const struct GdTensor *truth,
                                double *precision,
                                double *recall);

/**
 * Trains a model described by an experiment config in JSON. Nothing is
 * written to disk.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum GdStatus gd_experiment_run(const char *config_json, struct GdReport **out);

/**
 * # Safety
 * `r` must be null or a live handle.
 */
void gd_report_free(struct GdReport *r);

/**
 * Per-epoch metrics in CSV form; free with `gd_string_free`.
 *
 * # Safety
 * `r` must be live; `out` must be writable.
 */
enum GdStatus gd_report_metrics_csv(const struct GdReport *r, char **out);

/**
 * Summary document as JSON; free with `gd_string_free`.
 *
 * # Safety
 * `r` must be live; `out` must be writable.
 */
enum GdStatus gd_report_summary_json(const struct GdReport *r, char **out);

/**
 * Final test accuracy and whether every binarized mask met its budget.
 *
 * # Safety
 * `r` must be live; outputs must be writable.
 */
enum GdStatus gd_report_final(const struct GdReport *r, double *val_accuracy, bool *feasible);

/**
 * Binarized mask of `layer`/`channel` from a finished run.
 *
 * # Safety
 * `r` must be live; `out` must be writable.
 */
enum GdStatus gd_report_mask(const struct GdReport *r,
                             size_t layer,
                             size_t channel,
                             struct GdTensor **out);

/**
 * Runs the full gradient suite. Writes the worst relative error and the
 * number of failing (case, seed) pairs.
 *
 * # Safety
 * Outputs must be writable.
 */
enum GdStatus gd_gradcheck_all(double *max_error, size_t *failures);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GENDILATE_H */
