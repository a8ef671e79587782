#ifndef TOOLGATE_H
#define TOOLGATE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TgStatus {
  TG_STATUS_OK = 0,
  TG_STATUS_NULL_ARGUMENT = 1,
  TG_STATUS_INVALID_UTF8 = 2,
  TG_STATUS_CONFIG = 3,
  TG_STATUS_IO = 4,
  TG_STATUS_INTEGRITY = 5,
  TG_STATUS_VERSION = 6,
  TG_STATUS_DATASET = 7,
  TG_STATUS_NUMERIC = 8,
  TG_STATUS_SHAPE = 9,
  TG_STATUS_OUT_OF_RANGE = 10,
  TG_STATUS_PANIC = 11,
} TgStatus;

/**
 * A loaded benchmark: source training split plus target test splits.
 */
typedef struct TgDataset TgDataset;

/**
 * A fine-tuning run together with the data it trains on.
 */
typedef struct TgRun TgRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null when the last
 * call succeeded. Valid until the next call on the same thread.
 */
const char *tg_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tg_version(void);

/**
 * Loads a dumped dataset directory, or regenerates one from a manifest file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum TgStatus tg_dataset_load(const char *path, struct TgDataset **out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `out` must be writable.
 */
enum TgStatus tg_dataset_train_count(const struct TgDataset *ds, size_t *out);

/**
 * # Safety
 * `ds` must be a live dataset handle; `out` must be writable.
 */
enum TgStatus tg_dataset_target_count(const struct TgDataset *ds, size_t *out);

/**
 * # Safety
 * `ds` must be null or a handle from [`tg_dataset_load`] not yet freed.
 */
void tg_dataset_free(struct TgDataset *ds);

/**
 * Reads a run config, pretrains the backbone and prepares a run. `mode`
 * may be null to keep the config's mode.
 *
 * # Safety
 * `config_path` must be a NUL-terminated string, `mode` null or one, and
 * `out` writable.
 */
enum TgStatus tg_run_new(const char *config_path,
                         const char *mode,
                         uint64_t seed,
                         struct TgRun **out);

/**
 * Restores a run from a checkpoint file, training on `dataset_path`.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum TgStatus tg_run_load(const char *checkpoint_path,
                          const char *dataset_path,
                          struct TgRun **out);

/**
 * Trains up to iteration `until` (clamped to the configured total).
 *
 * # Safety
 * `run` must be a live run handle.
 */
enum TgStatus tg_run_train_until(struct TgRun *run, size_t until);

/**
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum TgStatus tg_run_iteration(const struct TgRun *run, size_t *out);

/**
 * Loss of the most recent update; fails before the first one.
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum TgStatus tg_run_last_loss(const struct TgRun *run, double *out);

/**
 * Scalars currently receiving updates.
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum TgStatus tg_run_trainable_params(const struct TgRun *run, size_t *out);

/**
 * Evaluates the current model on every target domain and writes the mean
 * mIoU.
 *
 * # Safety
 * `run` must be a live run handle; `out` must be writable.
 */
enum TgStatus tg_run_target_miou(const struct TgRun *run, double *out);

/**
 * # Safety
 * `run` must be a live run handle; `path` a NUL-terminated string.
 */
enum TgStatus tg_run_save(const struct TgRun *run, const char *path);

/**
 * # Safety
 * `run` must be null or a handle from [`tg_run_new`]/[`tg_run_load`] not
 * yet freed.
 */
void tg_run_free(struct TgRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOOLGATE_H */
