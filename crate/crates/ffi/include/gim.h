#ifndef GIM_H
#define GIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>

/**
 * Result codes shared by every fallible call.
 */
typedef enum GimStatus {
  GIM_STATUS_OK = 0,
  GIM_STATUS_NULL_POINTER = 1,
  GIM_STATUS_INVALID_UTF8 = 2,
  GIM_STATUS_IO = 3,
  GIM_STATUS_PARSE = 4,
  GIM_STATUS_DIMENSION_MISMATCH = 5,
  GIM_STATUS_UNCALIBRATED = 6,
  GIM_STATUS_INVALID_ARGUMENT = 7,
  GIM_STATUS_PANIC = 8,
} GimStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct GimModel GimModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model file. On success `*out_model` owns a handle that must be
 * released with `gim_model_free`.
 */
enum GimStatus gim_model_load(const char *path, struct GimModel **out_model);

/**
 * Releases a handle from `gim_model_load`. Null is ignored.
 */
void gim_model_free(struct GimModel *model);

/**
 * Number of input features, or 0 for a null handle.
 */
size_t gim_model_input_dim(const struct GimModel *model);

/**
 * Number of classes, or 0 for a null handle.
 */
size_t gim_model_num_classes(const struct GimModel *model);

/**
 * Width of the trunk output, or 0 for a null handle.
 */
size_t gim_model_output_dim(const struct GimModel *model);

/**
 * True for Gaussian isolation models, false for softmax baselines.
 */
bool gim_model_is_gaussian(const struct GimModel *model);

/**
 * Writes the calibrated OOD threshold.
 */
enum GimStatus gim_model_threshold(const struct GimModel *model, double *out_threshold);

/**
 * Classifies `n_rows` row-major inputs of `gim_model_input_dim` features
 * each. `out_classes` and `out_scores` receive one entry per row; the score
 * is the OOD confidence (higher means more in-distribution).
 */
enum GimStatus gim_model_predict(const struct GimModel *model,
                                 const double *inputs,
                                 size_t len,
                                 size_t n_rows,
                                 size_t *out_classes,
                                 double *out_scores);

/**
 * Flags each of `n_rows` inputs as out-of-distribution (score below the
 * calibrated threshold).
 */
enum GimStatus gim_model_is_ood(const struct GimModel *model,
                                const double *inputs,
                                size_t len,
                                size_t n_rows,
                                bool *out_flags);

/**
 * AUROC of in-distribution against out-of-distribution scores.
 */
enum GimStatus gim_auroc(const double *in_scores,
                         size_t n_in,
                         const double *out_scores,
                         size_t n_out,
                         double *out_auroc);

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *gim_last_error_message(void);

/**
 * Library version as a NUL-terminated string.
 */
const char *gim_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GIM_H */
