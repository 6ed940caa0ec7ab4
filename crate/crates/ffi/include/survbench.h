#ifndef SURVBENCH_H
#define SURVBENCH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_INVALID_ARGUMENT = 2,
  SB_STATUS_VALIDATION = 3,
  SB_STATUS_NUMERICAL = 4,
  SB_STATUS_IO = 5,
  SB_STATUS_PANIC = 6,
} SbStatus;

/**
 * Opaque dataset handle.
 */
typedef struct SbDataset SbDataset;

/**
 * Opaque fitted-model handle.
 */
typedef struct SbModel SbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on this thread.
 */
const char *sb_last_error(void);

/**
 * Loads a CSV with `time` and `event` columns.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SbStatus sb_dataset_load_csv(const char *path, struct SbDataset **out);

/**
 * Builds a dataset from a column-major feature block. Column kinds are
 * inferred; `NaN` marks a missing value. `names` holds `n_cols` strings.
 *
 * # Safety
 * All pointers must reference arrays of the stated lengths.
 */
enum SbStatus sb_dataset_from_arrays(const double *x_col_major,
                                     size_t n_rows,
                                     size_t n_cols,
                                     const char *const *names,
                                     const double *time,
                                     const uint8_t *event,
                                     struct SbDataset **out);

/**
 * # Safety
 * `ds` must be null or a handle from this library.
 */
size_t sb_dataset_n_rows(const struct SbDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle from this library.
 */
size_t sb_dataset_n_cols(const struct SbDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle from this library, not yet freed.
 */
void sb_dataset_free(struct SbDataset *ds);

/**
 * Cox loss (negative mean partial log-likelihood), gradient and diagonal
 * hessian of the log-likelihood with respect to `eta`, in input row order.
 *
 * # Safety
 * Input arrays hold `n` values; `grad` and `hess` have room for `n`.
 */
enum SbStatus sb_cox_grad_hess(const double *time,
                               const uint8_t *event,
                               const double *eta,
                               size_t n,
                               double *grad,
                               double *hess,
                               double *loss);

/**
 * Breslow partial log-likelihood.
 *
 * # Safety
 * Input arrays hold `n` values; `out` is a valid pointer.
 */
enum SbStatus sb_partial_log_likelihood(const double *time,
                                        const uint8_t *event,
                                        const double *eta,
                                        size_t n,
                                        double *out);

/**
 * # Safety
 * Input arrays hold `n` values; `out` is a valid pointer.
 */
enum SbStatus sb_harrell_c(const double *time,
                           const uint8_t *event,
                           const double *risk,
                           size_t n,
                           double *out);

/**
 * Uno's C truncated at `tau` with censoring weights from the training split.
 *
 * # Safety
 * Arrays hold `n_train` or `n_test` values; `out` is a valid pointer.
 */
enum SbStatus sb_uno_c(const double *train_time,
                       const uint8_t *train_event,
                       size_t n_train,
                       const double *test_time,
                       const uint8_t *test_event,
                       const double *test_risk,
                       size_t n_test,
                       double tau,
                       double *out);

/**
 * Fits a model. `kind` is one of `cox_plain`, `cox_ridge`, `cox_lasso`,
 * `cox_elastic_net`, `rsf`, `gbt_leaf_wise`, `gbt_depth_wise`, `mlp`;
 * `params_json` is a JSON object of hyperparameters or null for none.
 *
 * # Safety
 * Strings are NUL-terminated; `ds` is a live handle; `out` is valid.
 */
enum SbStatus sb_model_fit(const char *kind,
                           const char *params_json,
                           const struct SbDataset *ds,
                           uint64_t seed,
                           struct SbModel **out);

/**
 * # Safety
 * `json` is NUL-terminated; `out` is valid.
 */
enum SbStatus sb_model_from_json(const char *json, struct SbModel **out);

/**
 * Serializes a model; release the string with [`sb_string_free`].
 *
 * # Safety
 * `model` is a live handle; `out` is valid.
 */
enum SbStatus sb_model_to_json(const struct SbModel *model, char **out);

/**
 * Risk scores for every row of `ds`, matched to the model's columns by name.
 *
 * # Safety
 * Handles are live; `out` has room for `out_len` values.
 */
enum SbStatus sb_model_predict(const struct SbModel *model,
                               const struct SbDataset *ds,
                               double *out,
                               size_t out_len);

/**
 * # Safety
 * `model` must be null or a handle from this library, not yet freed.
 */
void sb_model_free(struct SbModel *model);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void sb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SURVBENCH_H */
