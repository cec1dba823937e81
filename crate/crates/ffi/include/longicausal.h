#ifndef LONGICAUSAL_H
#define LONGICAUSAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum LcStatus {
  LC_STATUS_OK = 0,
  LC_STATUS_NULL_POINTER = 1,
  LC_STATUS_INVALID_ARGUMENT = 2,
  LC_STATUS_IO = 3,
  LC_STATUS_PARSE = 4,
  LC_STATUS_VALIDATION = 5,
  LC_STATUS_CONFIG = 6,
  LC_STATUS_NUMERICAL = 7,
  LC_STATUS_PANIC = 8,
} LcStatus;

// Run configuration; see the JSON configuration documentation.
typedef struct LcConfig LcConfig;

// A validated longitudinal dataset.
typedef struct LcDataset LcDataset;

// A fitted MASE estimate for one outcome.
typedef struct LcResult LcResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or an empty string. The pointer stays
// valid until the next failing call on the same thread.
const char *lc_last_error(void);

// Library version as a static NUL-terminated string.
const char *lc_version(void);

// # Safety
// `s` must be NULL or a string returned by this library, not yet freed.
void lc_string_free(char *s);

// Loads a wide CSV. `schema_path` may be NULL, in which case column roles
// are inferred from the `A_t`, `Z_t_k`, `Y_t_j`, `B_k` naming convention.
//
// # Safety
// `path` and a non-NULL `schema_path` must be NUL-terminated strings;
// `out` must be writable.
enum LcStatus lc_dataset_load_csv(const char *path,
                                  const char *schema_path,
                                  struct LcDataset **out);

// Builds a dataset with `p` covariates and one outcome per timepoint from
// subject-major arrays: `exposures[i*T + t]` (0 or 1),
// `covariates[(i*T + t)*p + k]` and `outcomes[i*T + t]`.
//
// # Safety
// The arrays must hold `n*T`, `n*T*p` and `n*T` elements respectively;
// `out` must be writable.
enum LcStatus lc_dataset_from_arrays(size_t n,
                                     size_t n_timepoints,
                                     size_t p,
                                     const uint8_t *exposures,
                                     const double *covariates,
                                     const double *outcomes,
                                     struct LcDataset **out);

// # Safety
// `ds` must be a live handle.
size_t lc_dataset_n_subjects(const struct LcDataset *ds);

// # Safety
// `ds` must be a live handle.
size_t lc_dataset_n_timepoints(const struct LcDataset *ds);

// # Safety
// `ds` must be a live handle.
size_t lc_dataset_n_outcomes(const struct LcDataset *ds);

// # Safety
// `ds` must be NULL or a handle not yet freed.
void lc_dataset_free(struct LcDataset *ds);

// Default configuration.
//
// # Safety
// `out` must be writable.
enum LcStatus lc_config_new(struct LcConfig **out);

// Parses and validates a JSON configuration. Unknown keys are rejected.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum LcStatus lc_config_from_json(const char *json, struct LcConfig **out);

// # Safety
// `cfg` must be a live handle.
enum LcStatus lc_config_set_seed(struct LcConfig *cfg, uint64_t seed);

// # Safety
// `cfg` must be a live handle.
enum LcStatus lc_config_set_alpha(struct LcConfig *cfg, double alpha);

// # Safety
// `cfg` must be a live handle.
enum LcStatus lc_config_set_trim(struct LcConfig *cfg, double lo, double hi);

// Worker threads; 0 restores the default (environment, then all cores).
//
// # Safety
// `cfg` must be a live handle.
enum LcStatus lc_config_set_workers(struct LcConfig *cfg, size_t workers);

// Resolved configuration as JSON.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum LcStatus lc_config_to_json(const struct LcConfig *cfg, char **out);

// # Safety
// `cfg` must be NULL or a handle not yet freed.
void lc_config_free(struct LcConfig *cfg);

// Runs MASE on outcome `outcome` (1-based).
//
// # Safety
// `ds` and `cfg` must be live handles; `out` must be writable.
enum LcStatus lc_estimate(const struct LcDataset *ds,
                          const struct LcConfig *cfg,
                          size_t outcome,
                          struct LcResult **out);

// # Safety
// `r` must be a live handle.
double lc_result_ate(const struct LcResult *r);

// # Safety
// `r` must be a live handle.
double lc_result_se(const struct LcResult *r);

// # Safety
// `r` must be a live handle; `lo` and `hi` must be writable.
enum LcStatus lc_result_ci(const struct LcResult *r, double *lo, double *hi);

// Copies up to `len` MSM coefficients into `buf` and returns how many
// exist (T + 1). Pass `buf = NULL` to query the count.
//
// # Safety
// `r` must be a live handle; a non-NULL `buf` must hold `len` doubles.
size_t lc_result_theta(const struct LcResult *r, double *buf, size_t len);

// 1 when no invariant flag was raised, 0 otherwise (or for NULL).
//
// # Safety
// `r` must be a live handle.
int32_t lc_result_flags_clean(const struct LcResult *r);

// Full result, including solver diagnostics and propensity summaries, as
// JSON.
//
// # Safety
// `r` must be a live handle; `out` must be writable.
enum LcStatus lc_result_to_json(const struct LcResult *r, char **out);

// # Safety
// `r` must be NULL or a handle not yet freed.
void lc_result_free(struct LcResult *r);

// Runs the configured Monte Carlo study and returns its summary table as
// CSV.
//
// # Safety
// `cfg` must be a live handle; `out` must be writable.
enum LcStatus lc_simulate_csv(const struct LcConfig *cfg, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LONGICAUSAL_H */
