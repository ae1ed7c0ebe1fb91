#ifndef CCR_H
#define CCR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CcrStatus {
  CCR_STATUS_OK = 0,
  CCR_STATUS_NULL_POINTER = 1,
  CCR_STATUS_INVALID_ARGUMENT = 2,
  CCR_STATUS_PARSE = 3,
  CCR_STATUS_VALIDATION = 4,
  CCR_STATUS_DIMENSION = 5,
  CCR_STATUS_NON_FINITE = 6,
  CCR_STATUS_IO = 7,
  CCR_STATUS_MISSING_DATA = 8,
  CCR_STATUS_PANIC = 9,
} CcrStatus;

/**
 * A loaded task dataset.
 */
typedef struct CcrDataset CcrDataset;

/**
 * A linear or CORAL probe.
 */
typedef struct CcrProbe CcrProbe;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *ccr_last_error_message(void);

/**
 * Kendall's tau between two orderings of `n` items (item indices, best first).
 *
 * # Safety
 * `pred` and `gold` must point to `n` readable values; `out` must be writable.
 */
enum CcrStatus ccr_kendall_tau(const size_t *pred, const size_t *gold, size_t n, double *out);

/**
 * Writes the `k` centered, decreasing CORAL thresholds for `(alpha, beta)`.
 *
 * # Safety
 * `out` must have room for `k` values.
 */
enum CcrStatus ccr_coral_biases(double alpha, double beta, size_t k, double *out);

/**
 * Loads a task-list JSON document; filtered tasks are dropped.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CcrStatus ccr_dataset_load(const char *path, struct CcrDataset **out);

/**
 * Number of tasks, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t ccr_dataset_task_count(const struct CcrDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void ccr_dataset_free(struct CcrDataset *ds);

/**
 * Loads a probe JSON document.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CcrStatus ccr_probe_load(const char *path, struct CcrProbe **out);

/**
 * Writes the probe as JSON.
 *
 * # Safety
 * `probe` must be a live handle; `path` a NUL-terminated string.
 */
enum CcrStatus ccr_probe_save(const struct CcrProbe *probe, const char *path);

/**
 * Input dimension, or 0 for a null handle.
 *
 * # Safety
 * `probe` must be null or a live handle.
 */
size_t ccr_probe_dim(const struct CcrProbe *probe);

/**
 * Scores the `n` items of one task given as a row-major `n × dim` matrix.
 *
 * # Safety
 * `vectors` must hold `n * dim` values and `out` room for `n`.
 */
enum CcrStatus ccr_probe_item_scores(const struct CcrProbe *probe,
                                     const double *vectors,
                                     size_t n,
                                     size_t dim,
                                     double *out);

/**
 * # Safety
 * `probe` must be null or a handle not yet freed.
 */
void ccr_probe_free(struct CcrProbe *probe);

/**
 * Trains a probe on one task of `ds` from an activation dump. `method` is a
 * method name such as `"TripletCCR-S"` or `"origCCS-P"`; `epochs` of 0
 * keeps the default.
 *
 * # Safety
 * `ds` must be a live handle; strings NUL-terminated; `out` writable.
 */
enum CcrStatus ccr_train_from_dump(const struct CcrDataset *ds,
                                   size_t task_index,
                                   const char *dump_path,
                                   const char *method,
                                   size_t epochs,
                                   uint64_t seed,
                                   struct CcrProbe **out);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *ccr_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCR_H */
