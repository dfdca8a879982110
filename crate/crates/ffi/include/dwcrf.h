#ifndef DWCRF_H
#define DWCRF_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define DWCRF_DECODER_MARGINAL 0

#define DWCRF_DECODER_VITERBI 1

#define DWCRF_DECODER_STREAM 2

#define DWCRF_METHOD_CRF 0

#define DWCRF_METHOD_FWCRF 1

#define DWCRF_METHOD_DWCRF 2

typedef enum DwcrfStatus {
  DWCRF_STATUS_OK = 0,
  DWCRF_STATUS_NULL_POINTER = 1,
  DWCRF_STATUS_CONTRACT = 2,
  DWCRF_STATUS_DIMENSION = 3,
  DWCRF_STATUS_INVARIANT = 4,
  DWCRF_STATUS_PARSE = 5,
  DWCRF_STATUS_CONFIG = 6,
  DWCRF_STATUS_IO = 7,
  DWCRF_STATUS_REFUSED = 8,
  DWCRF_STATUS_INVALID_UTF8 = 9,
  DWCRF_STATUS_PANIC = 10,
} DwcrfStatus;

/**
 * A trained model with its label alphabet and feature standardization.
 */
typedef struct DwcrfModel DwcrfModel;

/**
 * Forward-only decoder state bound to a copy of a model.
 */
typedef struct DwcrfStream DwcrfStream;

/**
 * Training options. Start from [`dwcrf_train_options_default`].
 */
typedef struct DwcrfTrainOptions {
  /**
   * One of the `DWCRF_METHOD_*` constants.
   */
  int32_t method;
  double theta;
  /**
   * Warm-up evaluations before dynamic weights; negative means never switch.
   */
  int64_t tau;
  double beta;
  size_t max_iterations;
  double tolerance;
  size_t history_size;
  uint64_t seed;
  bool standardize;
} DwcrfTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failed call on this thread, or null. Valid until the next call.
 */
const char *dwcrf_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dwcrf_version(void);

/**
 * Loads a model document from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum DwcrfStatus dwcrf_model_load(const char *path, struct DwcrfModel **out);

/**
 * Parses a model document held in memory.
 *
 * # Safety
 * `json` must point to `len` readable bytes and `out` must be writable.
 */
enum DwcrfStatus dwcrf_model_from_json(const uint8_t *json, size_t len, struct DwcrfModel **out);

/**
 * Writes the model document to `path`.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum DwcrfStatus dwcrf_model_save(const struct DwcrfModel *model, const char *path);

/**
 * Serializes the model into a newly allocated NUL-terminated string. Release it with
 * [`dwcrf_string_free`].
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum DwcrfStatus dwcrf_model_to_json(const struct DwcrfModel *model, char **out);

/**
 * # Safety
 * `s` must come from [`dwcrf_model_to_json`] or be null.
 */
void dwcrf_string_free(char *s);

/**
 * # Safety
 * `model` must come from this library or be null; it is invalid afterwards.
 */
void dwcrf_model_free(struct DwcrfModel *model);

/**
 * Number of classes, or 0 for a null model.
 *
 * # Safety
 * `model` must come from this library or be null.
 */
size_t dwcrf_model_num_classes(const struct DwcrfModel *model);

/**
 * Number of input features, or 0 for a null model.
 *
 * # Safety
 * `model` must come from this library or be null.
 */
size_t dwcrf_model_num_features(const struct DwcrfModel *model);

/**
 * Name of class `k`, owned by the model; null when out of range.
 *
 * # Safety
 * `model` must come from this library or be null.
 */
const char *dwcrf_model_class_name(const struct DwcrfModel *model, size_t k);

/**
 * Labels a `t x num_features` observation matrix. `decoder` is a `DWCRF_DECODER_*` constant.
 *
 * # Safety
 * `obs` must hold `t * num_features` doubles and `labels_out` room for `t` entries.
 */
enum DwcrfStatus dwcrf_model_predict(const struct DwcrfModel *model,
                                     const double *obs,
                                     size_t t,
                                     int32_t decoder,
                                     size_t *labels_out);

/**
 * Per-position posterior marginals, written row-major into a `t x num_classes` buffer.
 *
 * # Safety
 * `obs` must hold `t * num_features` doubles and `out` room for `t * num_classes`.
 */
enum DwcrfStatus dwcrf_model_marginals(const struct DwcrfModel *model,
                                       const double *obs,
                                       size_t t,
                                       double *out,
                                       double *log_partition_out);

/**
 * Starts a forward-only decoder over a copy of `model`.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum DwcrfStatus dwcrf_stream_new(const struct DwcrfModel *model, struct DwcrfStream **out);

/**
 * Consumes one observation of `num_features` doubles. Writes the predicted label, and the
 * normalized message when `message_out` (room for `num_classes`) is not null.
 *
 * # Safety
 * `stream` must come from this library and `x` hold `num_features` doubles.
 */
enum DwcrfStatus dwcrf_stream_update(struct DwcrfStream *stream,
                                     const double *x,
                                     size_t *label_out,
                                     double *message_out);

/**
 * Forgets all consumed observations.
 *
 * # Safety
 * `stream` must come from this library.
 */
enum DwcrfStatus dwcrf_stream_reset(struct DwcrfStream *stream);

/**
 * # Safety
 * `stream` must come from this library or be null; it is invalid afterwards.
 */
void dwcrf_stream_free(struct DwcrfStream *stream);

struct DwcrfTrainOptions dwcrf_train_options_default(void);

/**
 * Trains on `num_sequences` sequences laid end to end: `obs` holds `sum(lengths) x dim`
 * doubles, `labels` holds `sum(lengths)` class indices below `num_classes`. `options` may be
 * null for defaults. `converged_out` may be null.
 *
 * # Safety
 * All buffers must have the sizes stated above; `out` must be writable.
 */
enum DwcrfStatus dwcrf_train(const double *obs,
                             const size_t *labels,
                             const size_t *lengths,
                             size_t num_sequences,
                             size_t dim,
                             size_t num_classes,
                             const struct DwcrfTrainOptions *options,
                             struct DwcrfModel **out,
                             bool *converged_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DWCRF_H */
