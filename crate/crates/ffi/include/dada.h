#ifndef DADA_H
#define DADA_H

/* Generated by cbindgen at build time. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum DadaStatus {
  DADA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  DADA_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  DADA_STATUS_INVALID_UTF8 = 2,
  /**
   * Arguments, data or a training config were rejected.
   */
  DADA_STATUS_INVALID = 3,
  /**
   * A file could not be read or written.
   */
  DADA_STATUS_IO = 4,
  /**
   * Parse error in CSV, JSON or a checkpoint.
   */
  DADA_STATUS_PARSE = 5,
  /**
   * A failure inside the library that is not the caller's fault.
   */
  DADA_STATUS_INTERNAL = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  DADA_STATUS_PANIC = 7,
} DadaStatus;

typedef struct DadaConfig DadaConfig;

typedef struct DadaDataset DadaDataset;

typedef struct DadaModel DadaModel;

typedef struct DadaReport DadaReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dada_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dada_version(void);

/**
 * Learning rate at progress `p` in [0, 1].
 */
double dada_lr_schedule(double p, double eta0, double alpha, double beta);

/**
 * Adversarial weight at progress `p` in [0, 1].
 */
double dada_lambda_schedule(double p, double gamma);

/**
 * Generates a dataset from a JSON data spec such as
 * `{"kind":"two_moons","n_per_domain":200,"rotation_deg":30,"noise_sd":0.1}`.
 *
 * # Safety
 * `spec_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DadaStatus dada_dataset_generate(const char *spec_json,
                                      uint64_t seed,
                                      struct DadaDataset **out);

/**
 * Loads a dataset directory (`source.csv` and `target.csv`) or a combined CSV file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DadaStatus dada_dataset_load(const char *path, struct DadaDataset **out);

/**
 * Source and target instance counts.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DadaStatus dada_dataset_sizes(const struct DadaDataset *ds,
                                   size_t *n_source,
                                   size_t *n_target);

/**
 * SHA-256 hex fingerprint of the dataset.
 *
 * # Safety
 * `ds` and `needed` must be valid; `buf` must hold `cap` bytes.
 */
enum DadaStatus dada_dataset_fingerprint(const struct DadaDataset *ds,
                                         char *buf,
                                         size_t cap,
                                         size_t *needed);

/**
 * # Safety
 * `ds` must come from this library or be null.
 */
void dada_dataset_free(struct DadaDataset *ds);

/**
 * Parses a TOML training config; absent keys take their defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DadaStatus dada_config_from_toml(const char *toml, struct DadaConfig **out);

/**
 * Renders a config back to TOML.
 *
 * # Safety
 * `cfg` and `needed` must be valid; `buf` must hold `cap` bytes.
 */
enum DadaStatus dada_config_to_toml(const struct DadaConfig *cfg,
                                    char *buf,
                                    size_t cap,
                                    size_t *needed);

/**
 * # Safety
 * `cfg` must come from this library or be null.
 */
void dada_config_free(struct DadaConfig *cfg);

/**
 * Trains a network on the labelled source and unlabelled target of `ds`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DadaStatus dada_train(const struct DadaConfig *cfg,
                           const struct DadaDataset *ds,
                           struct DadaModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DadaStatus dada_model_load(const char *path, struct DadaModel **out);

/**
 * # Safety
 * `model` must be valid and `path` a NUL-terminated string.
 */
enum DadaStatus dada_model_save(const struct DadaModel *model, const char *path);

/**
 * Input width and number of category outputs.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DadaStatus dada_model_dims(const struct DadaModel *model,
                                size_t *input_dim,
                                size_t *num_classes);

/**
 * Predicts `n` row-major instances of width `dim`. Writes the argmax
 * category into `labels[i]` and, when `domain_prob` is not null, the
 * domain-neuron probability into `domain_prob[i]`.
 *
 * # Safety
 * `x` must hold `n * dim` values, `labels` (and `domain_prob` if given) `n`.
 */
enum DadaStatus dada_model_predict(const struct DadaModel *model,
                                   const double *x,
                                   size_t n,
                                   size_t dim,
                                   size_t *labels,
                                   double *domain_prob);

/**
 * # Safety
 * `model` must come from this library or be null.
 */
void dada_model_free(struct DadaModel *model);

/**
 * Scores `model` on the labelled target of `ds`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DadaStatus dada_evaluate(const struct DadaModel *model,
                              const struct DadaDataset *ds,
                              struct DadaReport **out);

/**
 * Looks up a scalar metric such as `acc_target`, `os_star` or `unk_recall`.
 * Returns `DADA_STATUS_INVALID` if the report has no such metric.
 *
 * # Safety
 * All pointers must be valid; `name` must be NUL-terminated.
 */
enum DadaStatus dada_report_metric(const struct DadaReport *report,
                                   const char *name,
                                   double *value);

/**
 * The report as JSON lines.
 *
 * # Safety
 * `report` and `needed` must be valid; `buf` must hold `cap` bytes.
 */
enum DadaStatus dada_report_jsonl(const struct DadaReport *report,
                                  char *buf,
                                  size_t cap,
                                  size_t *needed);

/**
 * # Safety
 * `report` must come from this library or be null.
 */
void dada_report_free(struct DadaReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DADA_H */
