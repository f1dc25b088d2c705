#ifndef STABLE_RNN_VA_H
#define STABLE_RNN_VA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SrvStatus {
  SRV_STATUS_OK = 0,
  SRV_STATUS_NULL_POINTER = 1,
  SRV_STATUS_INVALID_ARGUMENT = 2,
  SRV_STATUS_IO = 3,
  SRV_STATUS_PARSE = 4,
  SRV_STATUS_VERSION = 5,
  SRV_STATUS_INSTABILITY = 6,
  SRV_STATUS_PANIC = 7,
} SrvStatus;

/**
 * Conditioning scenario for [`srv_model_measure_noise`].
 */
typedef enum SrvScenario {
  SRV_SCENARIO_SMOOTH = 0,
  SRV_SCENARIO_RANDOM = 1,
} SrvScenario;

/**
 * Opaque model handle.
 */
typedef struct SrvModel SrvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *srv_version(void);

/**
 * Message of the last failed call on this thread ("" if none). Valid until
 * the next failing call on the same thread.
 */
const char *srv_last_error_message(void);

/**
 * Loads a checkpoint JSON file. On success `*out` owns a new handle that
 * must be released with [`srv_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SrvStatus srv_model_load(const char *path, struct SrvModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`srv_model_load`] and not be used afterwards.
 */
void srv_model_free(struct SrvModel *model);

/**
 * Hidden size of the model (0 for a null handle).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t srv_model_hidden_size(const struct SrvModel *model);

/**
 * Number of control inputs (0 for a null handle).
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t srv_model_control_count(const struct SrvModel *model);

/**
 * Zeroes the recurrent state.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum SrvStatus srv_model_reset(struct SrvModel *model);

/**
 * Processes `len` samples with controls held constant, continuing from the
 * current state. Audio is in the dataset's original scale: the input is
 * divided by the training max-abs and the output multiplied back.
 * `input` and `output` may alias.
 *
 * # Safety
 * `input`/`output` must hold `len` doubles; `controls` must hold
 * `n_controls` doubles (may be null when `n_controls` is 0).
 */
enum SrvStatus srv_model_process(struct SrvModel *model,
                                 const double *input,
                                 double *output,
                                 size_t len,
                                 const double *controls,
                                 size_t n_controls);

/**
 * Runs the checkpoint's noise protocol (normalized units) and writes the
 * energy of the modulated phase in dBFS (`-INFINITY` for zero variance).
 * Does not touch the handle's streaming state.
 *
 * # Safety
 * `model` must be a live handle; `out_dbfs` must be writable.
 */
enum SrvStatus srv_model_measure_noise(const struct SrvModel *model,
                                       enum SrvScenario scenario,
                                       uint64_t seed,
                                       double *out_dbfs);

/**
 * Re-checks the stability constraints; `*out_passed` is 1 if all pass.
 *
 * # Safety
 * `model` must be a live handle; `out_passed` must be writable.
 */
enum SrvStatus srv_model_verify(const struct SrvModel *model, int32_t *out_passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STABLE_RNN_VA_H */
