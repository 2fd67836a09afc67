#ifndef NEDVAE_H
#define NEDVAE_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum NedStatus {
  NED_STATUS_OK = 0,
  NED_STATUS_NULL_ARGUMENT = 1,
  NED_STATUS_INVALID_UTF8 = 2,
  NED_STATUS_DATA_ERROR = 3,
  NED_STATUS_NUMERIC_ERROR = 4,
  NED_STATUS_IO_ERROR = 5,
} NedStatus;

/**
 * Opaque dataset handle.
 */
typedef struct NedDataset NedDataset;

/**
 * Opaque trained-model handle (a full checkpoint).
 */
typedef struct NedModel NedModel;

/**
 * Metric scores produced by `ned_eval_metrics`.
 */
typedef struct NedMetricReport {
  double beta_m;
  double factor_m;
  double dci;
  double modularity;
} NedMetricReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. Never null;
 * empty before any failure. The pointer is invalidated by the next
 * failing call on the same thread.
 */
const char *ned_last_error(void);

/**
 * Generate a synthetic dataset with default factor grids.
 * `family` is "er" or "ws".
 *
 * # Safety
 * `family` must be a valid C string; `out` must be a valid pointer.
 */
enum NedStatus ned_dataset_generate(const char *family,
                                    uint32_t n,
                                    uint32_t samples,
                                    uint64_t seed,
                                    struct NedDataset **out);

/**
 * Read a JSON-Lines dataset file.
 *
 * # Safety
 * `path` must be a valid C string; `out` must be a valid pointer.
 */
enum NedStatus ned_dataset_read(const char *path, struct NedDataset **out);

/**
 * Write a dataset as JSON-Lines.
 *
 * # Safety
 * `ds` must be a live dataset handle; `path` a valid C string.
 */
enum NedStatus ned_dataset_write(const struct NedDataset *ds, const char *path);

/**
 * Number of records in a dataset; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
uintptr_t ned_dataset_len(const struct NedDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle returned by this library, not yet freed.
 */
void ned_dataset_free(struct NedDataset *ds);

/**
 * Train a model on the dataset. `variant` is one of the objective names
 * (for example "NED-VAE" or "GDVAE-baseline"); weights stay at their
 * defaults.
 *
 * # Safety
 * `ds` must be a live dataset handle; `variant` a valid C string; `out` a
 * valid pointer.
 */
enum NedStatus ned_train(const struct NedDataset *ds,
                         const char *variant,
                         uint32_t iterations,
                         uint32_t batch_size,
                         uint64_t seed,
                         struct NedModel **out);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a valid C string; `out` a valid pointer.
 */
enum NedStatus ned_checkpoint_load(const char *path, struct NedModel **out);

/**
 * Save a checkpoint file.
 *
 * # Safety
 * `model` must be a live model handle; `path` a valid C string.
 */
enum NedStatus ned_checkpoint_save(const struct NedModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle returned by this library, not yet freed.
 */
void ned_model_free(struct NedModel *model);

/**
 * Score a trained model on a dataset with default metric parameters.
 *
 * # Safety
 * `model` and `ds` must be live handles; `out` a valid pointer.
 */
enum NedStatus ned_eval_metrics(const struct NedModel *model,
                                const struct NedDataset *ds,
                                uint64_t seed,
                                struct NedMetricReport *out);

/**
 * Write the full latent-traversal effect profile (all groups, all
 * dimensions, default grid) as CSV.
 *
 * # Safety
 * `model` must be a live model handle; `out_path` a valid C string.
 */
enum NedStatus ned_effect_profile_csv(const struct NedModel *model,
                                      const char *out_path,
                                      uint64_t s_seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEDVAE_H */
