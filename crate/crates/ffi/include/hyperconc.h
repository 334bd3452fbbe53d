#ifndef HYPERCONC_H
#define HYPERCONC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  HC_STATUS_OK = 0,
  HC_STATUS_NULL_POINTER = 1,
  /*
   Parameters violate a norm relation or a case index is out of range.
   */
  HC_STATUS_INVALID_ARGUMENT = 2,
  /*
   A branch or index does not exist.
   */
  HC_STATUS_OUT_OF_RANGE = 3,
  /*
   Verification ran and found a disagreement.
   */
  HC_STATUS_VERIFICATION_FAILED = 4,
  HC_STATUS_INTERNAL = 5,
  HC_STATUS_PANIC = 6,
} hc_status;

/*
 Result of one protocol run.
 */
typedef struct hc_outcome hc_outcome;

/*
 Amplitudes and case weights for a run.
 */
typedef struct hc_params hc_params;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the last failed call on this thread, or NULL. The pointer
 stays valid until the next call into this library on the same thread.
 */
const char *hc_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *hc_version(void);

/*
 Creates parameters with real amplitudes shared by both pairs and the
 first case of each mixture at weight one.

 # Safety
 `out` must be a valid pointer to writable storage for one handle.
 */
hc_status hc_params_new_real(double alpha,
                             double beta,
                             double gamma,
                             double delta,
                             double epsilon,
                             double eta,
                             hc_params **out);

/*
 Gives the C/D pair its own real amplitudes.

 # Safety
 `params` must be a live handle from `hc_params_new_real`.
 */
hc_status hc_params_set_cd_real(hc_params *params,
                                double alpha,
                                double beta,
                                double gamma,
                                double delta,
                                double epsilon,
                                double eta);

/*
 Sets the four polarization case weights and, if `spatial` is not NULL,
 the four spatial ones.

 # Safety
 `params` must be a live handle; `pol` must point to 4 doubles;
 `spatial` is NULL or points to 4 doubles.
 */
hc_status hc_params_set_weights(hc_params *params, const double *pol, const double *spatial);

/*
 # Safety
 `params` must be NULL or a handle not yet freed.
 */
void hc_params_free(hc_params *params);

/*
 Runs scheme 1 on polarization case pair (`pol_ab`, `pol_cd`), each 1..=4.

 # Safety
 `params` must be a live handle and `out` writable.
 */
hc_status hc_scheme1_run(const hc_params *params, uint8_t pol_ab, uint8_t pol_cd, hc_outcome **out);

/*
 Runs scheme 2 on one polarization and spatial case per pair, each 1..=4.

 # Safety
 `params` must be a live handle and `out` writable.
 */
hc_status hc_scheme2_run(const hc_params *params,
                         uint8_t pol_ab,
                         uint8_t spatial_ab,
                         uint8_t pol_cd,
                         uint8_t spatial_cd,
                         hc_outcome **out);

/*
 # Safety
 `outcome` must be a live handle and `value` writable.
 */
hc_status hc_outcome_success_probability(const hc_outcome *outcome, double *value);

/*
 Number of branches, or 0 for NULL.

 # Safety
 `outcome` must be NULL or a live handle.
 */
size_t hc_outcome_branch_count(const hc_outcome *outcome);

/*
 # Safety
 `outcome` must be a live handle and `value` writable.
 */
hc_status hc_outcome_branch_probability(const hc_outcome *outcome, size_t index, double *value);

/*
 Fidelity of a success branch with the target state. Failure branches
 give `HC_STATUS_OUT_OF_RANGE`.

 # Safety
 `outcome` must be a live handle and `value` writable.
 */
hc_status hc_outcome_branch_fidelity(const hc_outcome *outcome, size_t index, double *value);

/*
 1 for a success branch, 0 otherwise (including bad arguments).

 # Safety
 `outcome` must be NULL or a live handle.
 */
int32_t hc_outcome_branch_success(const hc_outcome *outcome, size_t index);

/*
 Outcome label; owned by the outcome handle. NULL on bad arguments.

 # Safety
 `outcome` must be NULL or a live handle.
 */
const char *hc_outcome_branch_label(const hc_outcome *outcome, size_t index);

/*
 # Safety
 `outcome` must be NULL or a handle not yet freed.
 */
void hc_outcome_free(hc_outcome *outcome);

/*
 Checks every case of `scheme` (1 or 2) against the dense oracle.
 Returns `HC_STATUS_VERIFICATION_FAILED` on disagreement; the largest
 deviations are written either way when the pointers are not NULL.

 # Safety
 `params` must be a live handle; the output pointers NULL or writable.
 */
hc_status hc_verify(const hc_params *params,
                    uint8_t scheme,
                    double tolerance,
                    double *max_probability_delta,
                    double *max_trace_distance);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HYPERCONC_H */
