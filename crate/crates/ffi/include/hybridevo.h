#ifndef HYBRIDEVO_H
#define HYBRIDEVO_H

/* Generated by cbindgen at build time. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 0 to 5 match the command-line exit codes.
typedef enum HybridevoStatus {
  HYBRIDEVO_STATUS_OK = 0,
  // Bad configuration, usage, digest mismatch or I/O.
  HYBRIDEVO_STATUS_CONFIG = 1,
  // Every candidate failed to parse; no solution.
  HYBRIDEVO_STATUS_EXTINCT = 2,
  // The provider failed; a checkpoint may allow resuming.
  HYBRIDEVO_STATUS_PROVIDER = 3,
  // The candidate parsed but breaks a hard constraint.
  HYBRIDEVO_STATUS_HARD_VIOLATION = 4,
  // The candidate text holds no parseable gene block.
  HYBRIDEVO_STATUS_PARSE_FAILURE = 5,
  HYBRIDEVO_STATUS_NULL_ARGUMENT = -1,
  HYBRIDEVO_STATUS_INVALID_UTF8 = -2,
  HYBRIDEVO_STATUS_PANIC = -3,
} HybridevoStatus;

// The outcome of a finished or aborted run.
typedef struct HybridevoRun HybridevoRun;

// A loaded task manifest.
typedef struct HybridevoTask HybridevoTask;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, borrowed and static.
const char *hybridevo_version(void);

// Message for the last failed call on this thread, or null. Borrowed; valid
// until the next call into this library on the same thread.
const char *hybridevo_last_error(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void hybridevo_string_free(char *s);

// Loads a task manifest.
//
// # Safety
// `manifest_path` must be a NUL-terminated string; `out` a writable slot.
enum HybridevoStatus hybridevo_task_load(const char *manifest_path, struct HybridevoTask **out);

// Releases a task. Null is ignored.
//
// # Safety
// `task` must come from [`hybridevo_task_load`] and not have been freed.
void hybridevo_task_free(struct HybridevoTask *task);

// The task's kind identifier. Borrowed; lives as long as the task.
//
// # Safety
// `task` must be a live handle or null.
const char *hybridevo_task_kind(const struct HybridevoTask *task);

// Content digest of the task (hex). Free with [`hybridevo_string_free`].
//
// # Safety
// `task` must be a live handle; `out` a writable slot.
enum HybridevoStatus hybridevo_task_digest(const struct HybridevoTask *task, char **out);

// Parses `candidate_text` as a gene of the task's kind and checks its
// constraints. `out_json` receives the verdict (`status` plus `violations`
// or `error`) whenever the return value is `Ok`, `HardViolation` or
// `ParseFailure`.
//
// # Safety
// `task` must be a live handle, `candidate_text` NUL-terminated, `out_json`
// a writable slot.
enum HybridevoStatus hybridevo_task_validate(const struct HybridevoTask *task,
                                             const char *candidate_text,
                                             char **out_json);

// Runs the configuration file at `config_path`, as `hybridevo run` does.
// `report_path` may be null to keep the configured location.
//
// A run handle is produced for every outcome except configuration errors,
// including extinct and provider-aborted runs; the return value tells which.
//
// # Safety
// Strings must be NUL-terminated (or null where allowed); `out` a writable slot.
enum HybridevoStatus hybridevo_run(const char *config_path,
                                   const char *report_path,
                                   struct HybridevoRun **out);

// Continues a run from its checkpoint, as `hybridevo resume` does, writing
// the report to `report_path`.
//
// # Safety
// Strings must be NUL-terminated; `out` a writable slot.
enum HybridevoStatus hybridevo_resume(const char *checkpoint_path,
                                      const char *report_path,
                                      struct HybridevoRun **out);

// Status the run ended with.
//
// # Safety
// `run` must be a live handle.
enum HybridevoStatus hybridevo_run_status(const struct HybridevoRun *run);

// Rendered best solution, empty when there is none. Borrowed; lives as long
// as the run.
//
// # Safety
// `run` must be a live handle or null.
const char *hybridevo_run_best_render(const struct HybridevoRun *run);

// The run report JSON, or null when no report was written. Borrowed; lives
// as long as the run.
//
// # Safety
// `run` must be a live handle or null.
const char *hybridevo_run_report_json(const struct HybridevoRun *run);

// Releases a run. Null is ignored.
//
// # Safety
// `run` must come from this library and not have been freed.
void hybridevo_run_free(struct HybridevoRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYBRIDEVO_H */
