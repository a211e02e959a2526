#ifndef SAG_H
#define SAG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SagStatus {
  SAG_STATUS_OK = 0,
  SAG_STATUS_NULL_POINTER = 1,
  SAG_STATUS_INVALID_ARGUMENT = 2,
  SAG_STATUS_IO = 3,
  SAG_STATUS_DATA = 4,
  SAG_STATUS_NUMERIC = 5,
  SAG_STATUS_MODEL = 6,
  SAG_STATUS_BUFFER_TOO_SMALL = 7,
  SAG_STATUS_PANIC = 8,
} SagStatus;

/**
 * Loaded basin: topology plus dataset.
 */
typedef struct SagDataset SagDataset;

/**
 * Loaded checkpoint.
 */
typedef struct SagModel SagModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call on the same thread.
 */
const char *sag_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sag_version(void);

/**
 * Loads the dataset directory `dir`. With `with_release` false the release
 * and profile tables are not read.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum SagStatus sag_dataset_load(const char *dir, bool with_release, struct SagDataset **out);

/**
 * # Safety
 * `dataset` must come from [`sag_dataset_load`] or be null.
 */
void sag_dataset_free(struct SagDataset *dataset);

/**
 * Writes the segment, reservoir and day counts.
 *
 * # Safety
 * `dataset` must be a live handle; outputs must be writable.
 */
enum SagStatus sag_dataset_shape(const struct SagDataset *dataset,
                                 size_t *n_segments,
                                 size_t *n_reservoirs,
                                 size_t *n_days);

/**
 * Loads a checkpoint file written by `sag train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SagStatus sag_model_load(const char *path, struct SagModel **out);

/**
 * # Safety
 * `model` must come from [`sag_model_load`] or be null.
 */
void sag_model_free(struct SagModel *model);

/**
 * Predicts every segment and day of `dataset` into `out`, segment-major
 * (`out[i * n_days + t]`). `len` must be at least `n_segments * n_days`.
 *
 * # Safety
 * Handles must be live; `out` must point to `len` writable doubles.
 */
enum SagStatus sag_model_predict(const struct SagModel *model,
                                 const struct SagDataset *dataset,
                                 double *out,
                                 size_t len);

/**
 * Flow-weighted release temperature over `len` outlet layers.
 *
 * # Safety
 * `flows` and `temps` must point to `len` doubles; `out` must be writable.
 */
enum SagStatus sag_flow_average_temperature(const double *flows,
                                            const double *temps,
                                            size_t len,
                                            double *out);

/**
 * Runs the canonical gradient check (`size` 0 = tiny, 1 = small) and
 * writes the maximum relative error.
 *
 * # Safety
 * `max_relative_error` must be writable.
 */
enum SagStatus sag_gradcheck(uint32_t size, double *max_relative_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAG_H */
