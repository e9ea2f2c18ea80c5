#ifndef AFFECTLAB_H
#define AFFECTLAB_H

/* Generated by cbindgen from the affectlab-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes mirroring the library's error classes.
typedef enum AfStatus {
  AF_OK = 0,
  AF_INVALID_ARGUMENT = 1,
  AF_CONFIG_ERROR = 2,
  AF_DATA_ERROR = 3,
  AF_IO_ERROR = 4,
  AF_INTERNAL_ERROR = 5,
} AfStatus;

// Task selector for dataset generation and evaluation.
typedef enum AfTask {
  AF_TASK_MTL = 0,
  AF_TASK_LSD = 1,
} AfTask;

// Opaque trained-model handle.
typedef struct AfModel AfModel;

// Opaque evaluation report handle.
typedef struct AfReport AfReport;

// Decided predictions for one face image.
typedef struct AfPrediction {
  double valence;
  double arousal;
  int32_t expression;
  uint8_t au[12];
} AfPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string.
const char *af_version(void);

// Message describing the last error on this thread. Valid until the next
// failing call on the same thread.
const char *af_last_error(void);

// Release a string returned by this library.
//
// # Safety
// `s` must come from this library and not have been freed already.
void af_string_free(char *s);

// Concordance correlation coefficient of two equal-length vectors.
//
// # Safety
// `x` and `y` must point to `len` readable doubles; `out` must be writable.
enum AfStatus af_ccc(const double *x, const double *y, size_t len, double *out);

// Jensen-Shannon divergence (natural log) of two probability vectors.
//
// # Safety
// `p` and `q` must point to `len` readable doubles; `out` must be writable.
enum AfStatus af_js_divergence(const double *p, const double *q, size_t len, double *out);

// Generate a synthetic labeled dataset directory (PNG images plus
// labels.csv).
//
// # Safety
// `dir` must be a valid NUL-terminated path string.
enum AfStatus af_gen_synth_dataset(const char *dir, uint64_t n, enum AfTask task, uint64_t seed);

// Score a prediction CSV against a label CSV; on success `*out` owns a new
// report handle.
//
// # Safety
// Paths must be valid NUL-terminated strings; `out` must be writable.
enum AfStatus af_evaluate(enum AfTask task,
                          const char *pred_path,
                          const char *labels_path,
                          struct AfReport **out);

// Aggregate challenge score of a report (P_MTL or P_LSD).
//
// # Safety
// `report` must be a live handle from `af_evaluate`.
enum AfStatus af_report_score(const struct AfReport *report, double *out);

// Valence and arousal CCC of a multi-task report.
//
// # Safety
// `report` must be a live handle; both outputs must be writable.
enum AfStatus af_report_ccc(const struct AfReport *report, double *out_v, double *out_a);

// Full human-readable report text (with the key=value block); the caller
// frees it with `af_string_free`.
//
// # Safety
// `report` must be a live handle from `af_evaluate`.
char *af_report_text(const struct AfReport *report);

// # Safety
// `report` must come from `af_evaluate` and not have been freed already.
void af_report_free(struct AfReport *report);

// Load a trained checkpoint directory (as written by the training CLI).
//
// # Safety
// `path` must be a valid NUL-terminated string; `out` must be writable.
enum AfStatus af_model_load(const char *path, struct AfModel **out);

// Task the loaded model was trained for.
//
// # Safety
// `model` must be a live handle from `af_model_load`.
enum AfTask af_model_task(const struct AfModel *model);

// Predict on one RGB image given as channel-major floats in [0, 1]
// (length 3*height*width). Any square size >= 112 is accepted; the image
// is resized to the model input internally.
//
// # Safety
// `pixels` must hold `3*height*width` readable floats; `out` writable.
enum AfStatus af_model_predict(const struct AfModel *model,
                               const float *pixels,
                               size_t height,
                               size_t width,
                               struct AfPrediction *out);

// # Safety
// `model` must come from `af_model_load` and not have been freed already.
void af_model_free(struct AfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFFECTLAB_H */
