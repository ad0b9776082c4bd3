#ifndef HALUPROBE_H
#define HALUPROBE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Values past `HP_STATUS_INVALID_UTF8` mirror the core error classes.
typedef enum HpStatus {
  HP_STATUS_OK = 0,
  HP_STATUS_NULL_ARGUMENT = 1,
  HP_STATUS_INVALID_UTF8 = 2,
  HP_STATUS_FORMAT = 3,
  HP_STATUS_VALIDATION = 4,
  HP_STATUS_UNSUPPORTED_VERSION = 5,
  HP_STATUS_BOUNDS = 6,
  HP_STATUS_MISSING_SECTION = 7,
  HP_STATUS_CONFIG = 8,
  HP_STATUS_LAYOUT = 9,
  HP_STATUS_TRAINING = 10,
  HP_STATUS_DIVERGENCE = 11,
  HP_STATUS_MODEL = 12,
  HP_STATUS_UNDEFINED = 13,
  HP_STATUS_IO = 14,
  HP_STATUS_JSON = 15,
  HP_STATUS_BUFFER_TOO_SMALL = 16,
  HP_STATUS_PANIC = 17,
} HpStatus;

// Extracted feature table.
typedef struct HpFeatureTable HpFeatureTable;

// Trained detector.
typedef struct HpModel HpModel;

// Loaded trace set.
typedef struct HpTraceSet HpTraceSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *hp_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *hp_version(void);

// Loads and validates the trace set stored in directory `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum HpStatus hp_trace_set_load(const char *dir, struct HpTraceSet **out);

// Re-runs every structural check on a loaded set.
//
// # Safety
// `set` must come from [`hp_trace_set_load`] and not be freed.
enum HpStatus hp_trace_set_validate(const struct HpTraceSet *set);

// Number of traces; 0 for a null handle.
//
// # Safety
// `set` must be null or a live handle.
uintptr_t hp_trace_set_len(const struct HpTraceSet *set);

// # Safety
// `set` must be null or a handle not freed before.
void hp_trace_set_free(struct HpTraceSet *set);

// Extracts a feature table. `strategy` is `all|per|first|last|win:W,S`;
// `features` a comma list or `all` (null means all); `granularity`
// `per_head|layer_mean` (null means layer_mean).
//
// # Safety
// String arguments must be null or NUL-terminated; `set` must be live;
// `out` must be writable.
enum HpStatus hp_extract(const struct HpTraceSet *set,
                         const char *strategy,
                         const char *features,
                         const char *granularity,
                         struct HpFeatureTable **out);

// Row count; 0 for a null handle.
//
// # Safety
// `table` must be null or live.
uintptr_t hp_table_rows(const struct HpFeatureTable *table);

// Column count; 0 for a null handle.
//
// # Safety
// `table` must be null or live.
uintptr_t hp_table_cols(const struct HpFeatureTable *table);

// Copies the values row-major into `buf`, which must hold rows*cols doubles.
//
// # Safety
// `buf` must point to `len` writable doubles.
enum HpStatus hp_table_values(const struct HpFeatureTable *table, double *buf, uintptr_t len);

// # Safety
// `table` must be null or a handle not freed before.
void hp_table_free(struct HpFeatureTable *table);

// Loads a model directory written by `haluprobe train`.
//
// # Safety
// `dir` must be NUL-terminated; `out` writable.
enum HpStatus hp_model_load(const char *dir, struct HpModel **out);

// Input width the model expects; 0 for a null handle.
//
// # Safety
// `model` must be null or live.
uintptr_t hp_model_n_features(const struct HpModel *model);

// Hallucination probability of one raw (unstandardized) feature vector.
//
// # Safety
// `x` must point to `n` doubles; `prob` must be writable.
enum HpStatus hp_model_predict(const struct HpModel *model,
                               const double *x,
                               uintptr_t n,
                               double *prob);

// Scores every row of `table`; the table layout must match the model's.
//
// # Safety
// `probs` must point to `len` writable doubles.
enum HpStatus hp_model_predict_table(const struct HpModel *model,
                                     const struct HpFeatureTable *table,
                                     double *probs,
                                     uintptr_t len);

// # Safety
// `model` must be null or a handle not freed before.
void hp_model_free(struct HpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HALUPROBE_H */
