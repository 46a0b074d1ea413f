#ifndef RZORO_H
#define RZORO_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes. Zero is success.
typedef enum RzoroStatus {
  RZORO_STATUS_OK = 0,
  RZORO_STATUS_NULL_POINTER = 1,
  RZORO_STATUS_INVALID_ARGUMENT = 2,
  RZORO_STATUS_UNKNOWN_PROBLEM = 3,
  RZORO_STATUS_DIMENSION_MISMATCH = 4,
  // The outer loop hit its iteration limit; the report is still returned.
  RZORO_STATUS_NOT_CONVERGED = 5,
  // The backed-off problem is infeasible; the report is still returned.
  RZORO_STATUS_INFEASIBLE = 6,
  RZORO_STATUS_NUMERICAL = 7,
  RZORO_STATUS_BUFFER_TOO_SMALL = 8,
  RZORO_STATUS_PANIC = 9,
} RzoroStatus;

typedef enum RzoroAlgorithm {
  RZORO_ALGORITHM_NOMINAL = 0,
  // Constant weights and zero feedback gains.
  RZORO_ALGORITHM_ZORO = 1,
  RZORO_ALGORITHM_RICCATI_ZORO_CONSTANT = 2,
  RZORO_ALGORITHM_RICCATI_ZORO_ADAPTIVE = 3,
  RZORO_ALGORITHM_RICCATI_ZORO_SIRO = 4,
} RzoroAlgorithm;

// A tube OCP built from the problem registry.
typedef struct RzoroProblem RzoroProblem;

// Outcome of a solve.
typedef struct RzoroReport RzoroReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *rzoro_version(void);

// Copies the last error message of this thread into `buf` (nul-terminated,
// truncated to `len`). Returns the full message length without the nul, or
// 0 when there is no error.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t rzoro_last_error(char *buf, size_t len);

// Builds a registry problem. `sigma` scales the disturbance set, `gamma` is
// the tightening factor (1 for set-based noise) and `horizon == 0` keeps the
// problem default.
//
// # Safety
// `name` must be a nul-terminated string; `out` must be a valid pointer.
enum RzoroStatus rzoro_problem_new(const char *name,
                                   double sigma,
                                   double gamma,
                                   size_t horizon,
                                   struct RzoroProblem **out);

// # Safety
// `p` must be null or a handle from [`rzoro_problem_new`] not yet freed.
void rzoro_problem_free(struct RzoroProblem *p);

// Writes state dimension, control dimension and horizon.
//
// # Safety
// All pointers must be valid.
enum RzoroStatus rzoro_problem_dims(const struct RzoroProblem *p,
                                    size_t *nx,
                                    size_t *nu,
                                    size_t *horizon);

// Solves `p` with default options for `algo`. On `Ok`, `NotConverged` and
// `Infeasible` a report is stored in `out`.
//
// # Safety
// `p` must be a live problem handle and `out` a valid pointer.
enum RzoroStatus rzoro_solve(const struct RzoroProblem *p,
                             enum RzoroAlgorithm algo,
                             struct RzoroReport **out);

// Solves the problem described by a TOML run configuration (the format of
// the `rzoro` command line tool).
//
// # Safety
// `config_toml` must be a nul-terminated string and `out` a valid pointer.
enum RzoroStatus rzoro_solve_config(const char *config_toml, struct RzoroReport **out);

// # Safety
// `r` must be null or a handle from a solve function not yet freed.
void rzoro_report_free(struct RzoroReport *r);

// # Safety
// `r` must be a live report handle.
double rzoro_report_objective(const struct RzoroReport *r);

// # Safety
// `r` must be a live report handle.
size_t rzoro_report_outer_iterations(const struct RzoroReport *r);

// Largest backoff over all stages and constraints.
//
// # Safety
// `r` must be a live report handle.
double rzoro_report_max_backoff(const struct RzoroReport *r);

// Nominal states, row-major `(N + 1) x nx`. `written` receives the number
// of values required even when `buf` is too small.
//
// # Safety
// `r` must be a live report; `buf` must hold `len` doubles; `written` may be null.
enum RzoroStatus rzoro_report_states(const struct RzoroReport *r,
                                     double *buf,
                                     size_t len,
                                     size_t *written);

// Nominal controls, row-major `N x nu`.
//
// # Safety
// As [`rzoro_report_states`].
enum RzoroStatus rzoro_report_controls(const struct RzoroReport *r,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

// Backoffs of stage `k` (`k == N` gives the terminal constraints).
//
// # Safety
// As [`rzoro_report_states`].
enum RzoroStatus rzoro_report_backoffs(const struct RzoroReport *r,
                                       size_t k,
                                       double *buf,
                                       size_t len,
                                       size_t *written);

// The full result as JSON; free with [`rzoro_string_free`]. Null on failure.
//
// # Safety
// `r` must be a live report handle.
char *rzoro_report_json(const struct RzoroReport *r);

// # Safety
// `s` must be null or a string returned by this library, not yet freed.
void rzoro_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RZORO_H */
