#ifndef COMPOSITE_ATE_H
#define COMPOSITE_ATE_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bumped on any incompatible change to this interface.
 */
#define CA_ABI_VERSION 1

typedef enum CaStatus {
  CA_STATUS_OK = 0,
  CA_STATUS_NULL_POINTER = 1,
  /**
   * Rejected input; mirrors exit code 2 of the command-line tool.
   */
  CA_STATUS_VALIDATION = 2,
  /**
   * Numerical failure; mirrors exit code 3 of the command-line tool.
   */
  CA_STATUS_NUMERICAL = 3,
  /**
   * A Rust panic was caught at the boundary.
   */
  CA_STATUS_PANIC = 4,
} CaStatus;

typedef enum CaDesign {
  CA_DESIGN_CRE = 0,
  CA_DESIGN_SRE_REG = 1,
  CA_DESIGN_SRE_STRAT = 2,
  CA_DESIGN_OBS = 3,
} CaDesign;

typedef enum CaEstimator {
  CA_ESTIMATOR_STANDARD = 0,
  CA_ESTIMATOR_ADJUSTED = 1,
  CA_ESTIMATOR_INVERSE_LOGISTIC = 2,
} CaEstimator;

typedef enum CaCiMethod {
  CA_CI_METHOD_AUTO = 0,
  CA_CI_METHOD_NORMAL = 1,
  CA_CI_METHOD_CHI2 = 2,
  CA_CI_METHOD_UNION = 3,
} CaCiMethod;

/**
 * Opaque study data.
 */
typedef struct CaDataset CaDataset;

/**
 * Opaque fitted composite; keeps its own copy of the data.
 */
typedef struct CaEstimate CaEstimate;

typedef struct CaWald {
  double statistic;
  size_t df;
  double p_value;
} CaWald;

typedef struct CaInterval {
  double lower;
  double upper;
  /**
   * Nominal level of the returned interval.
   */
  double level;
  /**
   * 1 when chi-squared quantiles came from the Monte Carlo fallback.
   */
  int32_t mc_approximated;
} CaInterval;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of this interface.
 */
uint32_t ca_abi_version(void);

/**
 * Message of the last failed call on this thread, or null if none. Valid
 * until the next failing call on the same thread.
 */
const char *ca_last_error_message(void);

/**
 * Build a data set from `n` units.
 *
 * `z` has n entries, `y` is n x l, `x` is n x k (null when k = 0),
 * `strata` holds n integer labels (nullable), `weights` n positive
 * inverse-propensity weights (nullable).
 *
 * # Safety
 * Every non-null pointer must reference the stated number of values, and
 * `out` must be writable.
 */
enum CaStatus ca_dataset_new(size_t n,
                             size_t l,
                             const double *z,
                             const double *y,
                             size_t k,
                             const double *x,
                             const int64_t *strata,
                             const double *weights,
                             struct CaDataset **out);

/**
 * Release a data set; null is ignored.
 *
 * # Safety
 * `data` must come from `ca_dataset_new` and not be freed twice.
 */
void ca_dataset_free(struct CaDataset *data);

/**
 * Fit a composite. `r` is the covariate coefficient of the adjusted
 * stratified estimator; pass NaN for the estimated optimum.
 *
 * # Safety
 * `data` must be a live handle and `out` writable.
 */
enum CaStatus ca_estimate(const struct CaDataset *data,
                          enum CaDesign design,
                          enum CaEstimator estimator,
                          int32_t user_weights,
                          double r,
                          struct CaEstimate **out);

/**
 * Release a fit; null is ignored.
 *
 * # Safety
 * `est` must come from `ca_estimate` and not be freed twice.
 */
void ca_estimate_free(struct CaEstimate *est);

/**
 * Estimated composite effect.
 *
 * # Safety
 * `est` must be a live handle and `out` writable.
 */
enum CaStatus ca_estimate_tau_c(const struct CaEstimate *est, double *out);

/**
 * Number of outcomes L, the length of the composite weights.
 *
 * # Safety
 * `est` must be a live handle or null.
 */
size_t ca_estimate_outcomes(const struct CaEstimate *est);

/**
 * Copy the composite weights into `buf`, which must hold `len` values with
 * `len` at least the number of outcomes.
 *
 * # Safety
 * `est` must be a live handle and `buf` writable for `len` values.
 */
enum CaStatus ca_estimate_beta(const struct CaEstimate *est, double *buf, size_t len);

/**
 * Wald test of no effect.
 *
 * # Safety
 * `est` must be a live handle and `out` writable.
 */
enum CaStatus ca_estimate_wald(const struct CaEstimate *est, struct CaWald *out);

/**
 * Confidence interval for the composite effect. `eta` below zero selects
 * the default pre-test level alpha / 2.
 *
 * # Safety
 * `est` must be a live handle and `out` writable.
 */
enum CaStatus ca_estimate_interval(const struct CaEstimate *est,
                                   enum CaCiMethod method,
                                   double alpha,
                                   double eta,
                                   struct CaInterval *out);

/**
 * CDF of sum_j lambda_j chi2_1 at `t`.
 *
 * # Safety
 * `lambdas` must hold `len` values and `out` be writable.
 */
enum CaStatus ca_wchi2_cdf(const double *lambdas, size_t len, double t, double *out);

/**
 * Quantile of sum_j lambda_j chi2_1 at probability `p`.
 *
 * # Safety
 * `lambdas` must hold `len` values and `out` be writable.
 */
enum CaStatus ca_wchi2_quantile(const double *lambdas, size_t len, double p, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMPOSITE_ATE_H */
