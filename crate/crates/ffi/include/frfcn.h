#ifndef FRFCN_H
#define FRFCN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of an FFI call.
 */
typedef enum FrfcnStatus {
  FRFCN_STATUS_OK = 0,
  FRFCN_STATUS_NULL_POINTER = 1,
  FRFCN_STATUS_INVALID_ARGUMENT = 2,
  FRFCN_STATUS_SHAPE = 3,
  FRFCN_STATUS_IO = 4,
  FRFCN_STATUS_CORRUPT = 5,
  FRFCN_STATUS_NON_FINITE = 6,
  FRFCN_STATUS_PANIC = 7,
} FrfcnStatus;

/**
 * Opaque model handle.
 */
typedef struct FrfcnModel FrfcnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *frfcn_last_error(void);

/**
 * Builds a freshly initialised model. `kind` is one of `fcn`, `squeezefcn`,
 * `frfcn`, `baseline`; `height`/`width` give the frame size (0 keeps the
 * default 94x168).
 *
 * # Safety
 * `kind` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FrfcnStatus frfcn_model_build(const char *kind,
                                   uint32_t height,
                                   uint32_t width,
                                   uint64_t seed,
                                   struct FrfcnModel **out);

/**
 * Loads a checkpoint written by `frfcn train` or [`frfcn_model_save`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum FrfcnStatus frfcn_model_load(const char *path, struct FrfcnModel **out);

/**
 * # Safety
 * `model` must come from this library and `path` be NUL-terminated.
 */
enum FrfcnStatus frfcn_model_save(struct FrfcnModel *model, const char *path);

/**
 * Trainable scalar count.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum FrfcnStatus frfcn_model_param_count(const struct FrfcnModel *model, uint64_t *out);

/**
 * Floats per input sample: 6 stacked frames of `channels * height * width`
 * values in `[0, 1]`, oldest first.
 *
 * # Safety
 * `model` must come from this library and `out` be writable.
 */
enum FrfcnStatus frfcn_model_input_len(const struct FrfcnModel *model, size_t *out);

/**
 * Eval-mode prediction for `batch` samples. `input` holds
 * `batch * input_len` floats; `output` receives `batch * 24` floats laid out
 * as `[batch][12 steps][steering, motor]`.
 *
 * # Safety
 * The buffers must be valid for the stated lengths.
 */
enum FrfcnStatus frfcn_model_predict(struct FrfcnModel *model,
                                     const float *input,
                                     size_t input_len,
                                     size_t batch,
                                     float *output,
                                     size_t output_len);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void frfcn_model_free(struct FrfcnModel *model);

/**
 * Autonomy score `(t - 6n) / t`, clamped at zero.
 */
double frfcn_autonomy(double seconds, uint32_t failures);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FRFCN_H */
