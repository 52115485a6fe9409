#ifndef SPACE_H
#define SPACE_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum {
  SPACE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SPACE_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad input: unreadable or incompatible checkpoint, missing calibration.
   */
  SPACE_STATUS_CONFIG = 2,
  /**
   * Arguments that break an operation's contract (sizes, empty inputs, NaN).
   */
  SPACE_STATUS_INVALID_ARGUMENT = 3,
  SPACE_STATUS_IO = 4,
  /**
   * Any other failure, including a caught panic.
   */
  SPACE_STATUS_INTERNAL = 5,
} SpaceStatus;

/**
 * A loaded model. Opaque to C.
 */
typedef struct SpaceModel SpaceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call into this library.
 */
const char *space_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *space_version(void);

/**
 * Load a checkpoint written by `space train`. The model must be calibrated
 * before it can score.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SpaceStatus space_model_load(const char *path, SpaceModel **out);

/**
 * Release a handle from [`space_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`space_model_load`] and not be used afterwards.
 */
void space_model_free(SpaceModel *model);

/**
 * Side length the networks resize every image to.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
SpaceStatus space_model_input_size(const SpaceModel *model, uint32_t *out);

/**
 * Whether the model carries calibration statistics (1) or not (0).
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
SpaceStatus space_model_is_calibrated(const SpaceModel *model, uint8_t *out);

/**
 * Score an interleaved 8-bit RGB image of `width × height` pixels (rows
 * top to bottom, no padding).
 *
 * Writes the image score to `score_out`. When `map_out` is non-null it
 * receives the `height × width` total anomaly map in row-major order.
 *
 * # Safety
 * `rgb` must hold `3·width·height` bytes, `map_out` (if non-null) room for
 * `width·height` floats, and `model` must be a live handle.
 */
SpaceStatus space_score_rgb(const SpaceModel *model,
                            const uint8_t *rgb,
                            uint32_t width,
                            uint32_t height,
                            float *score_out,
                            float *map_out);

/**
 * Probability that an anomalous score exceeds a normal one, ties counted half.
 *
 * # Safety
 * `normal` and `anomalous` must hold `n_normal` and `n_anomalous` doubles.
 */
SpaceStatus space_auroc(const double *normal,
                        uintptr_t n_normal,
                        const double *anomalous,
                        uintptr_t n_anomalous,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPACE_H */
