#ifndef SEGCORE_H
#define SEGCORE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SegStatus {
  SEG_STATUS_OK = 0,
  SEG_STATUS_NULL_POINTER = 1,
  SEG_STATUS_INVALID_ARGUMENT = 2,
  SEG_STATUS_SHAPE = 3,
  SEG_STATUS_FORMAT = 4,
  SEG_STATUS_IO = 5,
  SEG_STATUS_LABEL_RANGE = 6,
  SEG_STATUS_UNDEFINED = 7,
  SEG_STATUS_NON_FINITE = 8,
  SEG_STATUS_BUFFER_TOO_SMALL = 9,
  SEG_STATUS_PANIC = 10,
} SegStatus;

/**
 * Opaque model handle.
 */
typedef struct SegModel SegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until
 * the next failing call on the same thread.
 */
const char *seg_last_error(void);

/**
 * Builds a model. `family` is one of unet, resunet, segnet, fcn8, fcn16,
 * fcn32; `depth` 0 selects the family default.
 *
 * # Safety
 * `family` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SegStatus seg_model_build(const char *family,
                               size_t depth,
                               size_t base_filters,
                               size_t num_classes,
                               size_t input_size,
                               uint64_t seed,
                               struct SegModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SegStatus seg_model_load(const char *path, struct SegModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum SegStatus seg_model_save(const struct SegModel *model, const char *path);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle from this library.
 */
void seg_model_free(struct SegModel *model);

/**
 * Writes input channels, class count, input size and trainable parameter
 * count; any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null outputs must be valid.
 */
enum SegStatus seg_model_info(const struct SegModel *model,
                              size_t *in_channels,
                              size_t *num_classes,
                              size_t *input_size,
                              size_t *parameters);

/**
 * Channel-softmax probabilities for one planar `(c, h, w)` image.
 * `out` receives `num_classes · h · w` values, class-major.
 *
 * # Safety
 * `image` must hold `in_channels · height · width` doubles and `out`
 * `out_len` doubles.
 */
enum SegStatus seg_model_probabilities(const struct SegModel *model,
                                       const double *image,
                                       size_t height,
                                       size_t width,
                                       double *out,
                                       size_t out_len);

/**
 * Per-pixel argmax labels, row-major `h · w` bytes.
 *
 * # Safety
 * As [`seg_model_probabilities`], with `labels` holding `labels_len` bytes.
 */
enum SegStatus seg_model_predict(const struct SegModel *model,
                                 const double *image,
                                 size_t height,
                                 size_t width,
                                 uint8_t *labels,
                                 size_t labels_len);

/**
 * Quadratic-weighted kappa of a row-major `k × k` confusion matrix
 * (rows truth, columns prediction).
 *
 * # Safety
 * `counts` must hold `k · k` values; `out` must be valid.
 */
enum SegStatus seg_quadratic_kappa(const uint64_t *counts,
                                   size_t k,
                                   bool exclude_background,
                                   double *out);

/**
 * Smoothed Dice coefficient of two equally long planes.
 *
 * # Safety
 * `p` and `g` must hold `len` doubles; `out` must be valid.
 */
enum SegStatus seg_dice_coefficient(const double *p, const double *g, size_t len, double *out);

/**
 * Writes a synthetic dataset and `manifest.tsv` under `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string.
 */
enum SegStatus seg_synth_generate(const char *dir, size_t count, size_t size, uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGCORE_H */
