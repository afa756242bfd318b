#ifndef CMOE_H
#define CMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every exported function.
typedef enum CmoeStatus {
  CMOE_STATUS_OK = 0,
  CMOE_STATUS_NULL_POINTER = 1,
  CMOE_STATUS_INVALID_UTF8 = 2,
  CMOE_STATUS_CONFIG = 3,
  CMOE_STATUS_IO = 4,
  CMOE_STATUS_CORRUPT = 5,
  CMOE_STATUS_VERSION = 6,
  CMOE_STATUS_NUMERIC = 7,
  CMOE_STATUS_CONTRACT = 8,
  CMOE_STATUS_STRUCTURAL = 9,
  CMOE_STATUS_REPLAY = 10,
  CMOE_STATUS_BUFFER_TOO_SMALL = 11,
  CMOE_STATUS_NOT_AVAILABLE = 12,
  CMOE_STATUS_PANIC = 13,
} CmoeStatus;

// Opaque learner handle.
typedef struct CmoeLearner CmoeLearner;

// Summary of one routing mode over a complete accuracy matrix.
typedef struct CmoeSummary {
  double mean_immediate;
  double mean_last;
  // Backward transfer as an accuracy fraction.
  double bwt;
} CmoeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf`.
//
// # Safety
// `buf` must point to `cap` writable bytes or be null; `needed` must be
// null or writable.
enum CmoeStatus cmoe_last_error(char *buf, size_t cap, size_t *needed);

// Static, NUL-terminated name of a status code.
const char *cmoe_status_name(enum CmoeStatus status);

// Builds a learner from a TOML config; a null `config_toml` selects the
// built-in defaults.
//
// # Safety
// `config_toml` must be null or a NUL-terminated string; `out` must be
// writable.
enum CmoeStatus cmoe_learner_new(const char *config_toml, struct CmoeLearner **out);

// Restores a learner from a checkpoint directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum CmoeStatus cmoe_learner_load(const char *dir, struct CmoeLearner **out);

// Releases a learner. Null is ignored.
//
// # Safety
// `learner` must be null or a handle from this library not yet freed.
void cmoe_learner_free(struct CmoeLearner *learner);

// Trains the next task of the stream and records its accuracy rows.
//
// # Safety
// `learner` must be a live handle.
enum CmoeStatus cmoe_learner_step(struct CmoeLearner *learner);

// Trains every remaining task.
//
// # Safety
// `learner` must be a live handle.
enum CmoeStatus cmoe_learner_run(struct CmoeLearner *learner);

// Number of tasks in the stream and number trained so far.
//
// # Safety
// `learner` must be a live handle; both outputs must be writable.
enum CmoeStatus cmoe_learner_progress(const struct CmoeLearner *learner,
                                      size_t *n_tasks,
                                      size_t *trained);

// Accuracy on task `eval_task` after training task `after_task` under a
// routing mode named `ptl`, `oracle`, `last`, `random` or `shared`.
//
// # Safety
// `learner` must be a live handle, `routing_mode` a NUL-terminated string
// and `out` writable.
enum CmoeStatus cmoe_learner_accuracy(const struct CmoeLearner *learner,
                                      const char *routing_mode,
                                      size_t after_task,
                                      size_t eval_task,
                                      double *out);

// Immediate and last mean accuracy plus backward transfer of a routing
// mode once the stream is complete.
//
// # Safety
// `learner` must be a live handle, `routing_mode` a NUL-terminated string
// and `out` writable.
enum CmoeStatus cmoe_learner_summary(const struct CmoeLearner *learner,
                                     const char *routing_mode,
                                     struct CmoeSummary *out);

// Parameters added by probe-guided growth relative to growing every layer.
//
// # Safety
// `learner` must be a live handle and `out` writable.
enum CmoeStatus cmoe_learner_param_ratio(const struct CmoeLearner *learner, double *out);

// Writes the metrics table (CSV) into `buf`. On `BUFFER_TOO_SMALL`,
// `needed` still receives the required size.
//
// # Safety
// `learner` must be a live handle; `buf` must point to `cap` writable
// bytes or be null; `needed` must be null or writable.
enum CmoeStatus cmoe_learner_metrics_csv(const struct CmoeLearner *learner,
                                         char *buf,
                                         size_t cap,
                                         size_t *needed);

// Saves a checkpoint into `dir`.
//
// # Safety
// `learner` must be a live handle and `dir` a NUL-terminated string.
enum CmoeStatus cmoe_learner_save(const struct CmoeLearner *learner, const char *dir);

// Writes manifest, metrics and checkpoint into `dir`.
//
// # Safety
// `learner` must be a live handle and `dir` a NUL-terminated string.
enum CmoeStatus cmoe_learner_write_outputs(const struct CmoeLearner *learner, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMOE_H */
