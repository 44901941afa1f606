#ifndef MATPROD_H
#define MATPROD_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

typedef enum MatprodStatus {
  MATPROD_STATUS_OK = 0,
  MATPROD_STATUS_NULL_POINTER = 1,
  MATPROD_STATUS_INVALID_UTF8 = 2,
  MATPROD_STATUS_INVALID_INPUT = 3,
  MATPROD_STATUS_INVALID_PARAMETER = 4,
  MATPROD_STATUS_CONDITION_VIOLATED = 5,
  MATPROD_STATUS_UNSUPPORTED = 6,
  MATPROD_STATUS_ENUMERATION_INFEASIBLE = 7,
  MATPROD_STATUS_NOTHING_TO_CHECK = 8,
  MATPROD_STATUS_IO = 9,
  MATPROD_STATUS_BUFFER_TOO_SMALL = 10,
  MATPROD_STATUS_PANIC = 11,
} MatprodStatus;

/*
 Outcome carried by a result handle, matching the CLI exit codes.
 */
typedef enum MatprodOutcome {
  MATPROD_OUTCOME_PASSED = 0,
  MATPROD_OUTCOME_CONDITION_FAILED = 2,
  MATPROD_OUTCOME_VERIFICATION_FAILED = 3,
} MatprodOutcome;

/*
 JSON output of a run together with its outcome.
 */
typedef struct MatprodResult MatprodResult;

/*
 A product specification built from JSON.
 */
typedef struct MatprodSpec MatprodSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static nul-terminated string.
 */
const char *matprod_version(void);

/*
 Message of the most recent failed call on this thread, or null if no call
 has failed. Valid until the next failing call on the same thread.
 */
const char *matprod_last_error(void);

/*
 Builds a product specification from JSON.

 # Safety
 `json` must be a nul-terminated string and `out` a valid pointer. The
 handle written to `out` must be released with [`matprod_spec_free`].
 */
enum MatprodStatus matprod_spec_from_json(const char *json, struct MatprodSpec **out);

/*
 # Safety
 `spec` must be null or a handle from [`matprod_spec_from_json`] that has
 not been freed.
 */
void matprod_spec_free(struct MatprodSpec *spec);

/*
 Writes the row count of the product and the number of factors.

 # Safety
 `spec` must be a live handle; `dim` and `factors` valid pointers.
 */
enum MatprodStatus matprod_spec_shape(const struct MatprodSpec *spec, size_t *dim, size_t *factors);

/*
 Samples `trials` products and writes the Schatten `p` norm of each into
 `norms`; `p` may be `INFINITY`. Trials excluded as numerically singular
 are skipped, and `written` receives the number of values stored.

 # Safety
 `spec` must be a live handle, `norms` must point to `capacity` doubles,
 and `written` must be valid.
 */
enum MatprodStatus matprod_spec_sample_norms(const struct MatprodSpec *spec,
                                             size_t trials,
                                             uint64_t seed,
                                             double p,
                                             double *norms,
                                             size_t capacity,
                                             size_t *written);

/*
 Schatten `p` norm of a row-major `rows × cols` matrix; `p` may be `INFINITY`.

 # Safety
 `data` must point to `rows * cols` doubles and `out` must be valid.
 */
enum MatprodStatus matprod_schatten_norm(const double *data,
                                         size_t rows,
                                         size_t cols,
                                         double p,
                                         double *out);

/*
 Evaluates the bounds of a `bound` configuration.

 # Safety
 `config` must be a nul-terminated string, `seed` null or valid, and `out`
 valid. Release the result with [`matprod_result_free`].
 */
enum MatprodStatus matprod_bound(const char *config,
                                 const uint64_t *seed,
                                 struct MatprodResult **out);

/*
 Runs a `simulate` configuration. Null `trials` or `seed` keep the
 configured values; a trial count of zero requests exact enumeration.

 # Safety
 As for [`matprod_bound`]; `trials` must be null or valid.
 */
enum MatprodStatus matprod_simulate(const char *config,
                                    const uint64_t *trials,
                                    const uint64_t *seed,
                                    struct MatprodResult **out);

/*
 Checks the bounds of a `compare` configuration against exact or Monte
 Carlo values.

 # Safety
 As for [`matprod_simulate`].
 */
enum MatprodStatus matprod_compare(const char *config,
                                   const uint64_t *trials,
                                   const uint64_t *seed,
                                   struct MatprodResult **out);

/*
 Runs the inequality checks and, if `scenarios` is set, the end-to-end
 scenarios.

 # Safety
 `out` must be valid.
 */
enum MatprodStatus matprod_verify(uint64_t trials,
                                  uint64_t seed,
                                  bool scenarios,
                                  struct MatprodResult **out);

/*
 Default seed used when none is given.
 */
uint64_t matprod_default_seed(void);

/*
 JSON text of a result, valid until the result is freed.

 # Safety
 `result` must be null or a live result handle.
 */
const char *matprod_result_json(const struct MatprodResult *result);

/*
 # Safety
 `result` must be a live result handle.
 */
enum MatprodOutcome matprod_result_outcome(const struct MatprodResult *result);

/*
 # Safety
 `result` must be null or a live result handle.
 */
void matprod_result_free(struct MatprodResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MATPROD_H */
