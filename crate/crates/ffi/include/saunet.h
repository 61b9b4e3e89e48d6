#ifndef SAUNET_H
#define SAUNET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Attention maps accepted by [`saunet_attention_map`].
 */
typedef enum SaunetMap {
  SAUNET_MAP_ALPHA1 = 0,
  SAUNET_MAP_ALPHA2 = 1,
  SAUNET_MAP_ALPHA3 = 2,
  SAUNET_MAP_SPATIAL_D2 = 3,
  SAUNET_MAP_SPATIAL_D3 = 4,
  SAUNET_MAP_SHAPE = 5,
} SaunetMap;

/**
 * Result code of every fallible call.
 */
typedef enum SaunetStatus {
  SAUNET_STATUS_OK = 0,
  SAUNET_STATUS_NULL_POINTER = 1,
  SAUNET_STATUS_INVALID_ARGUMENT = 2,
  SAUNET_STATUS_IO = 3,
  SAUNET_STATUS_FORMAT = 4,
  SAUNET_STATUS_CONFIG = 5,
  SAUNET_STATUS_SHAPE = 6,
  SAUNET_STATUS_NON_FINITE = 7,
  /**
   * The requested map does not exist in this model (no shape stream).
   */
  SAUNET_STATUS_UNAVAILABLE = 8,
  SAUNET_STATUS_PANIC = 9,
} SaunetStatus;

/**
 * Opaque model handle.
 */
typedef struct SaunetModel SaunetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *saunet_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *saunet_last_error(void);

/**
 * Loads a checkpoint (and its `.json` config sidecar) into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SaunetStatus saunet_model_load(const char *path, struct SaunetModel **out);

/**
 * Releases a handle from [`saunet_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a live handle, and is invalid afterwards.
 */
void saunet_model_free(struct SaunetModel *model);

/**
 * Number of output classes, background included.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SaunetStatus saunet_model_num_classes(const struct SaunetModel *model, uint32_t *out);

/**
 * Whether the model has the gated shape stream (and so α and shape maps).
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SaunetStatus saunet_model_has_shape_stream(const struct SaunetModel *model, bool *out);

/**
 * Segments one raw `height×width` slice (row-major, already at the model's
 * pixel spacing, sides multiples of 8) into per-pixel class labels.
 *
 * # Safety
 * `image` must hold `height·width` floats and `labels` room for as many bytes.
 */
enum SaunetStatus saunet_segment(const struct SaunetModel *model,
                                 const float *image,
                                 size_t height,
                                 size_t width,
                                 uint8_t *labels);

/**
 * Writes one attention map (a [`SaunetMap`] value) of the slice into `out`,
 * bilinearly resized to `height×width`. Values lie in [0, 1].
 *
 * # Safety
 * `image` must hold `height·width` floats and `out` room for as many.
 */
enum SaunetStatus saunet_attention_map(const struct SaunetModel *model,
                                       const float *image,
                                       size_t height,
                                       size_t width,
                                       uint32_t which,
                                       float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAUNET_H */
