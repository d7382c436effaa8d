/* C API for the take-up model toolkit.
 *
 * Maintained by hand to match crates/takeup-ffi/src/lib.rs.
 *
 * Conventions: functions return a takeup_status and write results through
 * out-pointers; takeup_last_error() returns the current thread's last error
 * message (valid until the next failing call on that thread); handles are
 * released with their _free function, which accepts NULL.
 */
#ifndef TAKEUP_H
#define TAKEUP_H

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum takeup_status {
  TAKEUP_OK = 0,
  TAKEUP_ERR_NULL_POINTER = 1,
  TAKEUP_ERR_INVALID_ARGUMENT = 2,
  TAKEUP_ERR_NUMERICAL = 3,
} takeup_status;

/* Opaque: covariate layout, coefficients, and one evaluation cell. */
typedef struct takeup_model takeup_model;

/* Static version string; do not free. */
const char *takeup_version(void);

/* Last error message on this thread, or NULL. */
const char *takeup_last_error(void);

/* Model with the reference coefficients and the baseline household cell
 * ($150 benefit, infant present, LA 15, education 2). */
takeup_model *takeup_model_new_reference(void);
void takeup_model_free(takeup_model *model);

/* Overwrite one covariate of the evaluation cell, e.g. "log_benefit". */
takeup_status takeup_model_set_covariate(takeup_model *model,
                                         const char *name,
                                         double value);

/* P(attention) at the cell; exactly 1 when d_prev is nonzero. */
takeup_status takeup_attention_prob(const takeup_model *model,
                                    int32_t d_prev,
                                    double q,
                                    double *out);

/* P(choice | attentive); hassle applies unless d_prev && !recert. */
takeup_status takeup_choice_prob(const takeup_model *model,
                                 int32_t d_prev,
                                 int32_t recert,
                                 double q,
                                 double *out);

/* One-period transition probability P(d_next | d_prev, recert). */
takeup_status takeup_transition_prob(const takeup_model *model,
                                     int32_t d_prev,
                                     int32_t recert,
                                     int32_t d_next,
                                     double q,
                                     double *out);

/* Average take-up of the default simulated population under a policy.
 * policy: "none", "force_attention", "force_choice",
 * "attention_boost_post_exit", "choice_nudge", "oneshot_attention_boost".
 * delta is the choice-nudge increment; ignored for other policies. */
takeup_status takeup_counterfactual_takeup_rate(uint64_t seed,
                                                uint32_t horizon_months,
                                                const char *policy,
                                                double delta,
                                                double *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* TAKEUP_H */
