#ifndef GLADCF_H
#define GLADCF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum GladcfStatus {
  GLADCF_STATUS_OK = 0,
  // A required pointer argument was null.
  GLADCF_STATUS_NULL_ARGUMENT = 1,
  // Bad argument value: invalid UTF-8, unknown option, out-of-range index.
  GLADCF_STATUS_INVALID_ARGUMENT = 2,
  GLADCF_STATUS_IO = 3,
  GLADCF_STATUS_FORMAT = 4,
  GLADCF_STATUS_DATASET_NOT_FOUND = 5,
  GLADCF_STATUS_SHAPE = 6,
  GLADCF_STATUS_UNDEFINED_METRIC = 7,
  GLADCF_STATUS_NON_FINITE = 8,
  // Rust panic caught at the boundary.
  GLADCF_STATUS_INTERNAL = 9,
} GladcfStatus;

// Experiment configuration, seeded with per-dataset defaults.
typedef struct GladcfConfig GladcfConfig;

// Loaded graph dataset.
typedef struct GladcfDataset GladcfDataset;

// Trained detector parameters.
typedef struct GladcfModel GladcfModel;

// Cross-validation report.
typedef struct GladcfReport GladcfReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null if the last call succeeded.
// The pointer stays valid until the next call into this library on the
// same thread.
const char *gladcf_last_error(void);

// Library version as a static NUL-terminated string.
const char *gladcf_version(void);

// Load a TU-format dataset directory.
//
// `feature_mode` is one of `identity`, `db`, `ldp`; null means `identity`.
// Graphs whose TU label equals `anomaly_label` are treated as anomalous.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum GladcfStatus gladcf_dataset_load(const char *dir,
                                      const char *feature_mode,
                                      int64_t anomaly_label,
                                      struct GladcfDataset **out);

// # Safety
// `ds` must come from [`gladcf_dataset_load`] or be null.
void gladcf_dataset_free(struct GladcfDataset *ds);

// Number of graphs, 0 for a null handle.
//
// # Safety
// `ds` must be a live handle or null.
size_t gladcf_dataset_len(const struct GladcfDataset *ds);

// Node feature width, 0 for a null handle.
//
// # Safety
// `ds` must be a live handle or null.
size_t gladcf_dataset_feature_dim(const struct GladcfDataset *ds);

// Copy binary labels (0 normal, 1 anomalous) into `out`.
//
// # Safety
// `out` must hold at least `len` bytes.
enum GladcfStatus gladcf_dataset_labels(const struct GladcfDataset *ds, uint8_t *out, size_t len);

// New configuration with the defaults for `dataset`.
//
// # Safety
// `dataset` must be NUL-terminated; `out` must be writable.
enum GladcfStatus gladcf_config_new(const char *dataset, struct GladcfConfig **out);

// Set one option using the same keys as the CLI config file
// (`seed`, `folds`, `epochs`, `beta`, `variant`, ...).
//
// # Safety
// `cfg` must be live; strings must be NUL-terminated.
enum GladcfStatus gladcf_config_set(struct GladcfConfig *cfg, const char *key, const char *value);

// # Safety
// `cfg` must come from [`gladcf_config_new`] or be null.
void gladcf_config_free(struct GladcfConfig *cfg);

// Run stratified cross-validation on an already loaded dataset.
// Feature settings in `cfg` are ignored; the dataset's own features are used.
//
// # Safety
// Handles must be live; `out` must be writable.
enum GladcfStatus gladcf_run_cv(const struct GladcfDataset *ds,
                                const struct GladcfConfig *cfg,
                                struct GladcfReport **out);

// # Safety
// `report` must come from [`gladcf_run_cv`] or be null.
void gladcf_report_free(struct GladcfReport *report);

// Mean fold AUC, NaN for a null handle.
//
// # Safety
// `report` must be live or null.
double gladcf_report_mean_auc(const struct GladcfReport *report);

// Population standard deviation of fold AUCs, NaN for a null handle.
//
// # Safety
// `report` must be live or null.
double gladcf_report_std_auc(const struct GladcfReport *report);

// # Safety
// `report` must be live or null.
size_t gladcf_report_num_folds(const struct GladcfReport *report);

// # Safety
// `report` must be live; `out` must be writable.
enum GladcfStatus gladcf_report_fold_auc(const struct GladcfReport *report,
                                         size_t fold,
                                         double *out);

// Write the report as JSON.
//
// # Safety
// `report` must be live; `path` must be NUL-terminated.
enum GladcfStatus gladcf_report_write_json(const struct GladcfReport *report, const char *path);

// Load a fold checkpoint (`model.json`).
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum GladcfStatus gladcf_model_load(const char *path, struct GladcfModel **out);

// # Safety
// `model` must come from [`gladcf_model_load`] or be null.
void gladcf_model_free(struct GladcfModel *model);

// Anomaly scores in (0, 1) for every graph of `ds`.
//
// # Safety
// Handles must be live; `out` must hold at least `len` doubles.
enum GladcfStatus gladcf_model_score(const struct GladcfModel *model,
                                     const struct GladcfDataset *ds,
                                     double *out,
                                     size_t len);

// ROC-AUC of `scores` against binary `labels` (1 = anomalous).
//
// # Safety
// `scores` and `labels` must hold `n` elements; `out` must be writable.
enum GladcfStatus gladcf_compute_auc(const double *scores,
                                     const uint8_t *labels,
                                     size_t n,
                                     double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLADCF_H */
