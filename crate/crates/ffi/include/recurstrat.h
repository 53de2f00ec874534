#ifndef RECURSTRAT_H
#define RECURSTRAT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum RsStatus {
  RS_STATUS_OK = 0,
  RS_STATUS_NULL_POINTER = 1,
  RS_STATUS_INVALID_ARGUMENT = 2,
  RS_STATUS_IO = 3,
  RS_STATUS_NUMERIC = 4,
  /*
   The fit handle is still produced; see [`rs_fit_converged`].
   */
  RS_STATUS_NOT_CONVERGED = 5,
  RS_STATUS_PANIC = 6,
} RsStatus;

/*
 Yearly census counts by covariate cell.
 */
typedef struct RsCensus RsCensus;

/*
 Cohort of subjects with at least one in-window event.
 */
typedef struct RsDataset RsDataset;

/*
 Fitted model.
 */
typedef struct RsFit RsFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null.

 The pointer stays valid until the next call into this library on the same thread.
 */
const char *rs_last_error(void);

/*
 Simulates a preset scenario (1, 2 or 3) and returns its cohort and census.

 # Safety
 `cohort_out` and `census_out` must be valid for writes.
 */
enum RsStatus rs_simulate(uint8_t scenario_id,
                          uintptr_t population,
                          uint64_t seed,
                          struct RsDataset **cohort_out,
                          struct RsCensus **census_out);

/*
 Reads a cohort from subject and event CSV files.

 # Safety
 Paths must be NUL-terminated strings; `out` must be valid for writes.
 */
enum RsStatus rs_dataset_load(const char *subjects,
                              const char *events,
                              double horizon,
                              struct RsDataset **out);

/*
 Reads a census CSV file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum RsStatus rs_census_load(const char *path, double horizon, struct RsCensus **out);

/*
 Number of subjects, or 0 for a null handle.

 # Safety
 `data` must be null or a live dataset handle.
 */
uintptr_t rs_dataset_len(const struct RsDataset *data);

/*
 Census-augmented fit of a model cell such as `"ssc"` or `"nnv"`.

 # Safety
 Handles must be live; `model` NUL-terminated; `out` valid for writes.
 */
enum RsStatus rs_fit_census(const struct RsDataset *data,
                            const struct RsCensus *census,
                            const char *model,
                            struct RsFit **out);

/*
 Zero-truncated EM fit of a constant-baseline model cell.

 # Safety
 `data` must be live; `model` NUL-terminated; `out` valid for writes.
 */
enum RsStatus rs_fit_zt(const struct RsDataset *data, const char *model, struct RsFit **out);

/*
 Non-zero when the fit converged.

 # Safety
 `fit` must be null or a live fit handle.
 */
int32_t rs_fit_converged(const struct RsFit *fit);

/*
 Copies the coefficients of `stratum` (0 or 1) into `out[0..len]`.

 `written` receives the number of coefficients; if `len` is smaller,
 nothing is copied and `RS_STATUS_INVALID_ARGUMENT` is returned.

 # Safety
 `fit` must be live; `out` valid for `len` writes; `written` valid for a write.
 */
enum RsStatus rs_fit_beta(const struct RsFit *fit,
                          uintptr_t stratum,
                          double *out,
                          uintptr_t len,
                          uintptr_t *written);

/*
 Cumulative baseline of `stratum` at `age`.

 # Safety
 `fit` must be live; `out` valid for a write.
 */
enum RsStatus rs_fit_baseline_cumulative(const struct RsFit *fit,
                                         uintptr_t stratum,
                                         double age,
                                         double *out);

/*
 JSON serialization of the fit; release with [`rs_string_free`].

 # Safety
 `fit` must be live; `out` valid for a write.
 */
enum RsStatus rs_fit_to_json(const struct RsFit *fit, char **out);

/*
 # Safety
 `s` must be null or a string returned by this library, not yet freed.
 */
void rs_string_free(char *s);

/*
 # Safety
 `p` must be null or a live handle from this library.
 */
void rs_dataset_free(struct RsDataset *p);

/*
 # Safety
 `p` must be null or a live handle from this library.
 */
void rs_census_free(struct RsCensus *p);

/*
 # Safety
 `p` must be null or a live handle from this library.
 */
void rs_fit_free(struct RsFit *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECURSTRAT_H */
