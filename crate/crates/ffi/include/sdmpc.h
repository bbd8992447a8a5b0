#ifndef SDMPC_H
#define SDMPC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum SdmpcStatus {
  SDMPC_STATUS_OK = 0,
  SDMPC_STATUS_NULL_POINTER = 1,
  SDMPC_STATUS_INVALID_UTF8 = 2,
  SDMPC_STATUS_INVALID_CONFIG = 3,
  SDMPC_STATUS_SOLVER_FAILURE = 4,
  SDMPC_STATUS_IO_FAILURE = 5,
  SDMPC_STATUS_OUT_OF_RANGE = 6,
  SDMPC_STATUS_PANIC = 7,
} SdmpcStatus;

typedef enum SdmpcMode {
  SDMPC_MODE_NOMINAL = 0,
  SDMPC_MODE_SELFISH = 1,
  SDMPC_MODE_CORRECTED = 2,
} SdmpcMode;

/**
 * Scenario configuration.
 */
typedef struct SdmpcConfig SdmpcConfig;

/**
 * Completed scenario run: trace and objective report.
 */
typedef struct SdmpcRun SdmpcRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *sdmpc_last_error(void);

/**
 * Static description of a status code.
 */
const char *sdmpc_status_str(enum SdmpcStatus status);

/**
 * Bundled four-room benchmark configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
enum SdmpcStatus sdmpc_config_benchmark(struct SdmpcConfig **out);

/**
 * Loads and validates a TOML configuration file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SdmpcStatus sdmpc_config_load(const char *path, struct SdmpcConfig **out);

/**
 * Parses a configuration from TOML text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum SdmpcStatus sdmpc_config_parse(const char *text, struct SdmpcConfig **out);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum SdmpcStatus sdmpc_config_set_seed(struct SdmpcConfig *cfg, uint64_t seed);

/**
 * Enables or disables detection.
 *
 * # Safety
 * `cfg` must be a live handle.
 */
enum SdmpcStatus sdmpc_config_set_defense(struct SdmpcConfig *cfg, bool enabled);

/**
 * # Safety
 * `cfg` must be a live handle.
 */
enum SdmpcStatus sdmpc_config_set_steps(struct SdmpcConfig *cfg, size_t n_steps);

/**
 * # Safety
 * `cfg` must be NULL or a handle not yet freed.
 */
void sdmpc_config_free(struct SdmpcConfig *cfg);

/**
 * Runs a scenario; attacked modes also run the nominal baseline.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run(const struct SdmpcConfig *cfg,
                           enum SdmpcMode mode,
                           struct SdmpcRun **out);

/**
 * # Safety
 * `run` must be NULL or a handle not yet freed.
 */
void sdmpc_run_free(struct SdmpcRun *run);

/**
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_step_count(const struct SdmpcRun *run, size_t *out);

/**
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_agent_count(const struct SdmpcRun *run, size_t *out);

/**
 * Applied input `u[k]` (first input channel) of one agent.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_input(const struct SdmpcRun *run,
                                 size_t step,
                                 size_t agent,
                                 double *out);

/**
 * Output `y[k+1]` (first channel) of one agent.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_output(const struct SdmpcRun *run,
                                  size_t step,
                                  size_t agent,
                                  double *out);

/**
 * Detection variable and flag. `flag` is -1 when detection did not run
 * for this step, otherwise 0 or 1; `e_val` is NaN when it did not run.
 *
 * # Safety
 * `run` must be a live handle; `e_val` and `flag` must be writable.
 */
enum SdmpcStatus sdmpc_run_detection(const struct SdmpcRun *run,
                                     size_t step,
                                     size_t agent,
                                     double *e_val,
                                     int32_t *flag);

/**
 * Realized objective of one agent over the run.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_objective(const struct SdmpcRun *run, size_t agent, double *out);

/**
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_global_objective(const struct SdmpcRun *run, double *out);

/**
 * Percent error against the nominal baseline; NaN for nominal runs.
 *
 * # Safety
 * `run` must be a live handle; `out` must be writable.
 */
enum SdmpcStatus sdmpc_run_percent_error(const struct SdmpcRun *run, size_t agent, double *out);

/**
 * Writes `trace.csv`, `objectives.json` and `summary.txt` into `out_dir`.
 *
 * # Safety
 * `run` must be a live handle; `out_dir` a NUL-terminated string.
 */
enum SdmpcStatus sdmpc_run_write_report(const struct SdmpcRun *run, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SDMPC_H */
