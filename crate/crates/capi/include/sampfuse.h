/* C interface to the sampfuse estimation library.
 *
 * Load a combined CSV into an opaque sample handle, run one estimator, and
 * read the report back as a JSON string. Every fallible call returns a
 * status code (SAMPFUSE_OK on success); on failure, sampfuse_last_error()
 * returns a thread-local message valid until the next failing call on the
 * same thread.
 */

#ifndef SAMPFUSE_H
#define SAMPFUSE_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define SAMPFUSE_OK 0
#define SAMPFUSE_ERR_NULL_ARG 1
#define SAMPFUSE_ERR_UTF8 2
#define SAMPFUSE_ERR_VALIDATION 3
#define SAMPFUSE_ERR_CONVERGENCE 4
#define SAMPFUSE_ERR_OTHER 5

/* Opaque handle over a loaded combined sample. */
typedef struct SampfuseSample SampfuseSample;

/* Last error message for this thread; owned by the library, do not free. */
const char *sampfuse_last_error(void);

/* Load a combined CSV (both samples in one file). `schema` is an inline
 * descriptor such as
 *   "covariates=x1,x2;delta=delta;in_b=in_b;y=y;d=d"
 * naming the covariate columns, the A-membership indicator, the
 * B-membership indicator, the outcome, and the design weight. On success
 * writes a handle to `out`; free it with sampfuse_sample_free. */
int32_t sampfuse_sample_load_csv(const char *path, const char *schema,
                                 SampfuseSample **out);

/* Unit counts; return -1 on a null handle. */
int64_t sampfuse_sample_n_a(const SampfuseSample *sample);
int64_t sampfuse_sample_n_b(const SampfuseSample *sample);

/* Run one estimator by name ("ipw-logistic", "ipw-lasso", "ipw-oalasso",
 * "aipw-logistic", "aipw-lasso", "aipw-oalasso", "aipw-benkeser", ...) and
 * return the full report as JSON in `out_json`. `seed` fixes the
 * cross-validation fold assignment. Free the string with
 * sampfuse_string_free. */
int32_t sampfuse_estimate_json(const SampfuseSample *sample,
                               const char *method, uint64_t seed,
                               char **out_json);

/* Free a string returned by this library. Null is a no-op. */
void sampfuse_string_free(char *s);

/* Free a sample handle. Null is a no-op. */
void sampfuse_sample_free(SampfuseSample *sample);

#ifdef __cplusplus
}
#endif

#endif /* SAMPFUSE_H */
