#ifndef DRIFT_FORGE_H
#define DRIFT_FORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code returned by every fallible call.
typedef enum {
  DF_STATUS_OK = 0,
  // A required pointer argument was null.
  DF_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  DF_STATUS_INVALID_UTF8 = 2,
  // Invalid configuration, rejected before any computation.
  DF_STATUS_CONFIG = 3,
  // Malformed input data.
  DF_STATUS_PARSE = 4,
  // An argument or index outside its documented range.
  DF_STATUS_OUT_OF_RANGE = 5,
  // Non-finite value, singular matrix, or failed numerical routine.
  DF_STATUS_NUMERIC = 6,
  DF_STATUS_IO = 7,
  // JSON (de)serialization failure.
  DF_STATUS_SERIALIZATION = 8,
  // An internal panic was caught at the boundary.
  DF_STATUS_PANIC = 9,
} DfStatus;

// Detector check outcome kind.
typedef enum {
  DF_VERDICT_KIND_NO_DRIFT = 0,
  DF_VERDICT_KIND_DRIFT_ALARM = 1,
  DF_VERDICT_KIND_SCHEDULED_REFRESH = 2,
} DfVerdictKind;

// Opaque streaming drift detector; see `df_detector_new`.
typedef struct DfDetector DfDetector;

// Outcome of one detector check. The statistics are NaN whenever the
// buffer was too short (or too flat) to compute them.
typedef struct {
  DfVerdictKind kind;
  double z_score;
  double mu;
  double sigma;
  double mu_tilde;
} DfVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Version of the linked library as a static string; do not free it.
const char *df_version(void);

// Returns the message of the most recent failure on this thread as a new
// owned string, or null when the last call succeeded. Free the result
// with [`df_string_free`].
char *df_last_error_message(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
//
// `s` must be a pointer previously returned by this library and not yet
// freed.
void df_string_free(char *s);

// Two-sided z threshold for a given significance level, written to
// `out_threshold`.
//
// # Safety
//
// `out_threshold` must point to writable memory for one `double`.
DfStatus df_threshold_from_significance(double significance, double *out_threshold);

// Creates a drift detector watching the trailing `window_len` losses at
// the given two-sided significance, with a scheduled refresh every
// `refresh_interval` recorded losses. The new handle is written to
// `out_detector`; release it with [`df_detector_free`].
//
// # Safety
//
// `out_detector` must point to writable memory for one pointer.
DfStatus df_detector_new(size_t window_len,
                         double significance,
                         size_t refresh_interval,
                         DfDetector **out_detector);

// Appends one per-round loss to the detector buffer.
//
// # Safety
//
// `detector` must be a live handle from [`df_detector_new`].
DfStatus df_detector_record_loss(DfDetector *detector, double loss);

// Runs the drift test on the current buffer and writes the verdict to
// `out_verdict`. Recording and checking are separate so one round may
// record several losses before a single check.
//
// # Safety
//
// `detector` must be a live handle and `out_verdict` must point to
// writable memory for one `DfVerdict`.
DfStatus df_detector_check(const DfDetector *detector, DfVerdict *out_verdict);

// Clears the loss buffer and the refresh counter.
//
// # Safety
//
// `detector` must be a live handle from [`df_detector_new`].
DfStatus df_detector_reset(DfDetector *detector);

// Number of losses currently buffered, written to `out_len`.
//
// # Safety
//
// `detector` must be a live handle and `out_len` must point to writable
// memory for one `size_t`.
DfStatus df_detector_buffer_len(const DfDetector *detector, size_t *out_len);

// Releases a detector handle. Null is ignored.
//
// # Safety
//
// `detector` must be a handle from [`df_detector_new`] not yet freed.
void df_detector_free(DfDetector *detector);

// Runs one experiment from a JSON configuration and returns the report as
// a JSON string in `out_report_json` (free it with [`df_string_free`]).
// The configuration object matches the TOML schema of the CLI: a `data`
// source plus optional overrides. When the config carries an `out_dir`,
// the trace and model artifacts are also written there.
//
// # Safety
//
// `config_json` must be a valid NUL-terminated string and
// `out_report_json` must point to writable memory for one pointer.
DfStatus df_run_experiment_json(const char *config_json, char **out_report_json);

// Runs the randomized verification sweeps of the covariance-gap analysis
// (instance dimensions up to `max_dim`, `trials` instances per sweep,
// deterministic in `seed`) and returns the report as a JSON string in
// `out_report_json` (free it with [`df_string_free`]).
//
// # Safety
//
// `out_report_json` must point to writable memory for one pointer.
DfStatus df_verify_theory_json(size_t max_dim,
                               size_t trials,
                               uint64_t seed,
                               char **out_report_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DRIFT_FORGE_H */
