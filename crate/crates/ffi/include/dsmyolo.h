/* Generated by cbindgen from crates/ffi. Do not edit. */

#ifndef DSMYOLO_H
#define DSMYOLO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DsmDiscretization {
  DSM_DISCRETIZATION_ZOH = 0,
  DSM_DISCRETIZATION_TAYLOR = 1,
} DsmDiscretization;

/**
 * Result code of every call.
 */
typedef enum DsmStatus {
  DSM_STATUS_OK = 0,
  DSM_STATUS_NULL_POINTER = 1,
  DSM_STATUS_INVALID_ARGUMENT = 2,
  DSM_STATUS_SHAPE = 3,
  DSM_STATUS_NON_FINITE = 4,
  DSM_STATUS_FORMAT = 5,
  DSM_STATUS_CONFIG = 6,
  DSM_STATUS_MISSING_PARAM = 7,
  DSM_STATUS_IO = 8,
  /**
   * The output buffer held fewer entries than were produced.
   */
  DSM_STATUS_BUFFER_TOO_SMALL = 9,
  DSM_STATUS_PANIC = 10,
} DsmStatus;

/**
 * Opaque detector handle.
 */
typedef struct DsmModel DsmModel;

/**
 * One detection in original-image pixels.
 */
typedef struct DsmDetection {
  float x1;
  float y1;
  float x2;
  float y2;
  float score;
  uint32_t class_id;
} DsmDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * Valid until the next call into this library on the same thread.
 */
const char *dsm_last_error(void);

/**
 * Static name of a status code.
 */
const char *dsm_status_name(enum DsmStatus status);

/**
 * Build a freshly initialized model. `scale` is one of "N", "S", "M", "T".
 *
 * # Safety
 * `scale` must be a NUL-terminated string and `out` writable.
 */
enum DsmStatus dsm_model_new(const char *scale,
                             uint32_t num_classes,
                             uint64_t seed,
                             struct DsmModel **out);

/**
 * Load a checkpoint directory written by the CLI or [`dsm_model_save`].
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` writable.
 */
enum DsmStatus dsm_model_load(const char *dir, struct DsmModel **out);

/**
 * # Safety
 * `model` must come from this library; `dir` must be a NUL-terminated string.
 */
enum DsmStatus dsm_model_save(const struct DsmModel *model, const char *dir);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void dsm_model_free(struct DsmModel *model);

/**
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum DsmStatus dsm_model_param_count(const struct DsmModel *model, uint64_t *out);

/**
 * Analytic FLOPs for one `height × width` image.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum DsmStatus dsm_model_flops(const struct DsmModel *model,
                               size_t height,
                               size_t width,
                               uint64_t *out);

/**
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum DsmStatus dsm_model_num_classes(const struct DsmModel *model, uint32_t *out);

/**
 * Detect objects in one planar RGB image `[3, height, width]` with values
 * in [0, 1]. The image is letterboxed to `input_size` (a multiple of 32)
 * and boxes are mapped back to the original frame.
 *
 * At most `capacity` detections, highest score first, are written to
 * `dets`; `count` receives the number produced. If that exceeds
 * `capacity` the call returns `BUFFER_TOO_SMALL` after filling the buffer.
 *
 * # Safety
 * `image` must hold `3 · height · width` floats, `dets` room for
 * `capacity` entries (may be null when `capacity` is 0), `count` writable.
 */
enum DsmStatus dsm_model_detect(const struct DsmModel *model,
                                const float *image,
                                size_t height,
                                size_t width,
                                size_t input_size,
                                float conf,
                                size_t max_dets,
                                struct DsmDetection *dets,
                                size_t capacity,
                                size_t *count);

/**
 * Diagonal selective scan over one sequence of `len` steps with
 * `channels` channels and `state` state entries per channel.
 *
 * Shapes: `x`, `delta` are `[len, channels]`; `a` is `[channels, state]`;
 * `b`, `p` are `[len, state]` when `per_step` is nonzero, else
 * `[channels, state]`; `q` is `[channels]`. Writes `y` `[len, channels]`
 * and, if `h_final` is non-null, the final state `[channels, state]`.
 * `block_len` 0 selects the sequential kernel, otherwise the blocked one.
 *
 * # Safety
 * Every pointer must reference a buffer of the stated size.
 */
enum DsmStatus dsm_selective_scan(size_t len,
                                  size_t channels,
                                  size_t state,
                                  const float *x,
                                  const float *delta,
                                  const float *a,
                                  const float *b,
                                  const float *p,
                                  const float *q,
                                  int32_t per_step,
                                  enum DsmDiscretization discretization,
                                  size_t block_len,
                                  float *y,
                                  float *h_final);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DSMYOLO_H */
