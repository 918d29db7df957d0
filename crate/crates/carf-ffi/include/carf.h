/* C interface to the carf learned-bitwidth quantization library. */

#ifndef CARF_H
#define CARF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Quantization grid family.
 */
typedef enum CarfScheme {
  /**
   * Zero-centered grid for weights.
   */
  CARF_SCHEME_SIGNED_SYMMETRIC = 0,
  /**
   * Zero-anchored non-negative grid for rectified activations.
   */
  CARF_SCHEME_UNSIGNED_SYMMETRIC = 1,
  /**
   * Shifted grid with a trainable ceiling.
   */
  CARF_SCHEME_ASYMMETRIC = 2,
} CarfScheme;

/**
 * Result of every fallible call in this API.
 */
typedef enum CarfStatus {
  /**
   * Success; out-parameters hold results.
   */
  CARF_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  CARF_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument value was outside its domain.
   */
  CARF_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Quantizer parameters were outside their domain.
   */
  CARF_STATUS_INVALID_QUANTIZER = 3,
  /**
   * A model file was missing, malformed, or inconsistent.
   */
  CARF_STATUS_BAD_CONTAINER = 4,
  /**
   * The operating system reported an I/O failure.
   */
  CARF_STATUS_IO_ERROR = 5,
  /**
   * An unexpected internal failure; report it.
   */
  CARF_STATUS_INTERNAL = 6,
} CarfStatus;

/**
 * An imported integer model ready for replay. Opaque.
 */
typedef struct CarfIntModel CarfIntModel;

/**
 * One fake quantizer with a resolved grid. Opaque.
 */
typedef struct CarfQuantizer CarfQuantizer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *carf_version(void);

/**
 * Message describing this thread's most recent non-OK status. The pointer
 * stays valid until the next failing call on the same thread. Never null.
 */
const char *carf_last_error(void);

/**
 * Create a quantizer. `bits` is the soft bitwidth (clamped to [2, 32] and
 * rounded for the grid), `range` the representable value-range width, and
 * `ceiling` the upper range bound — consulted only by the asymmetric
 * scheme, ignored otherwise.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum CarfStatus carf_quantizer_new(enum CarfScheme scheme,
                                   double bits,
                                   double range,
                                   double ceiling,
                                   struct CarfQuantizer **out);

/**
 * Release a quantizer. Null is a no-op.
 *
 * # Safety
 * `q` must be null or a pointer returned by [`carf_quantizer_new`] that has
 * not been freed yet.
 */
void carf_quantizer_free(struct CarfQuantizer *q);

/**
 * Effective integer bitwidth of the quantizer's grid.
 *
 * # Safety
 * `q` must be a live quantizer handle; `out` must be writable.
 */
enum CarfStatus carf_quantizer_bits(const struct CarfQuantizer *q, uint32_t *out);

/**
 * Quantize-dequantize `len` values: `output[i]` is the value the quantized
 * model would see for `input[i]`.
 *
 * # Safety
 * `q` must be a live handle; `input` and `output` must each point to `len`
 * readable / writable floats (they may alias exactly).
 */
enum CarfStatus carf_fake_quantize(const struct CarfQuantizer *q,
                                   const float *input,
                                   uintptr_t len,
                                   float *output);

/**
 * Quantize `len` values to integer codes on the quantizer's grid.
 *
 * # Safety
 * `q` must be a live handle; `input` must hold `len` floats and `codes`
 * room for `len` 64-bit integers.
 */
enum CarfStatus carf_quantize(const struct CarfQuantizer *q,
                              const float *input,
                              uintptr_t len,
                              int64_t *codes);

/**
 * Decode `len` integer codes back to values. Codes outside the grid are
 * rejected.
 *
 * # Safety
 * `q` must be a live handle; `codes` must hold `len` integers and `output`
 * room for `len` floats.
 */
enum CarfStatus carf_dequantize(const struct CarfQuantizer *q,
                                const int64_t *codes,
                                uintptr_t len,
                                float *output);

/**
 * Open an integer model container exported by the training pipeline.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CarfStatus carf_int_model_open(const char *path, struct CarfIntModel **out);

/**
 * Release an integer model. Null is a no-op.
 *
 * # Safety
 * `m` must be null or a pointer returned by [`carf_int_model_open`] that
 * has not been freed yet.
 */
void carf_int_model_free(struct CarfIntModel *m);

/**
 * Input coordinate dimension of the model: 2 (planar) or 3 (volumetric).
 *
 * # Safety
 * `m` must be a live model handle; `out` must be writable.
 */
enum CarfStatus carf_int_model_coord_dim(const struct CarfIntModel *m, uint32_t *out);

/**
 * Average bitwidth over the model's quantized components.
 *
 * # Safety
 * `m` must be a live model handle; `out` must be writable.
 */
enum CarfStatus carf_int_model_fqr(const struct CarfIntModel *m, double *out);

/**
 * Evaluate the integer model at `count` points.
 *
 * Planar models (coordinate dimension 2) read `count * 2` floats from
 * `positions` and ignore `directions`. Volumetric models read `count * 3`
 * floats from `positions` and require `count * 3` unit view directions.
 * `rgb` receives `count * 3` floats. For volumetric models, `sigma` (if
 * non-null) receives `count` densities; planar models ignore it.
 *
 * # Safety
 * `m` must be a live model handle and every non-null buffer must match the
 * sizes above.
 */
enum CarfStatus carf_int_model_forward(const struct CarfIntModel *m,
                                       const float *positions,
                                       const float *directions,
                                       uintptr_t count,
                                       float *rgb,
                                       float *sigma);

/**
 * Peak signal-to-noise ratio between two buffers in [0, 1] units, capped
 * at 99 dB.
 *
 * # Safety
 * `a` and `b` must each hold `len` floats; `out` must be writable.
 */
enum CarfStatus carf_psnr(const float *a, const float *b, uintptr_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CARF_H */
