#ifndef HEAVYTAIL_H
#define HEAVYTAIL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HtStatus {
  HT_STATUS_OK = 0,
  HT_STATUS_NULL_POINTER = 1,
  HT_STATUS_INVALID_INPUT = 2,
  HT_STATUS_DOMAIN = 3,
  HT_STATUS_EMPTY_SELECTION = 4,
  HT_STATUS_BUFFER_TOO_SMALL = 5,
  HT_STATUS_PANIC = 6,
} HtStatus;

typedef struct HtGramEstimate HtGramEstimate;

typedef struct HtMatrixEstimate HtMatrixEstimate;

typedef struct HtMatrixSample HtMatrixSample;

typedef struct HtMeanEstimate HtMeanEstimate;

typedef struct HtRegion HtRegion;

typedef struct HtVectorSample HtVectorSample;

// Moment bounds of a random matrix `M`.
typedef struct HtMatrixBounds {
  // `sup E <xi, M theta>^2`
  double v;
  // `sup_theta E |M theta|^2`
  double t;
  // `sup_xi E |M^T xi|^2`
  double u;
  // `E |M|_HS^2`
  double t_hs;
} HtMatrixBounds;

// Moment bounds of a regression pair `(X, Y)`.
typedef struct HtRegressionBounds {
  // `sup_theta E <theta, X>^4`
  double v;
  // `E |X|^4`
  double t;
  // `sup_theta E Y^2 <theta, X>^2`
  double v_prime;
  // `E Y^2 |X|^2`
  double t_prime;
} HtRegressionBounds;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. Valid until the
// next call into the library from the same thread.
const char *ht_last_error(void);

// Smoothed influence functions at `(m, sigma)`: `kind` 0 is the symmetric
// one, 1 the one-sided one and 2 the one of the square.
enum HtStatus ht_phi(uint32_t kind, double m, double sigma, double *out);

// Copies `n * d` row-major values.
enum HtStatus ht_vector_sample_new(const double *data,
                                   size_t n,
                                   size_t d,
                                   struct HtVectorSample **out);

void ht_vector_sample_free(struct HtVectorSample *sample);

// Copies `n` matrices of shape `p x q`, each flattened row-major.
enum HtStatus ht_matrix_sample_new(const double *data,
                                   size_t n,
                                   size_t p,
                                   size_t q,
                                   struct HtMatrixSample **out);

void ht_matrix_sample_free(struct HtMatrixSample *sample);

// Mean with `|m_hat - E X| <= radius` with probability `1 - delta` when
// certified; `v` bounds the directional variance and `t` bounds `E |X|^2`.
enum HtStatus ht_estimate_mean(const struct HtVectorSample *sample,
                               double v,
                               double t,
                               double delta,
                               uint64_t seed,
                               struct HtMeanEstimate **out);

enum HtStatus ht_mean_estimate_dim(const struct HtMeanEstimate *est, size_t *out);

enum HtStatus ht_mean_estimate_m_hat(const struct HtMeanEstimate *est, double *buf, size_t len);

enum HtStatus ht_mean_estimate_radius(const struct HtMeanEstimate *est, double *out);

enum HtStatus ht_mean_estimate_certified(const struct HtMeanEstimate *est, bool *out);

void ht_mean_estimate_free(struct HtMeanEstimate *est);

// Operator-norm mean with `|m_hat - E M|_op <= op_radius` with probability
// `1 - delta` when certified.
enum HtStatus ht_fit_matrix_operator(const struct HtMatrixSample *sample,
                                     struct HtMatrixBounds bounds,
                                     double delta,
                                     size_t n_draws,
                                     uint64_t seed,
                                     struct HtMatrixEstimate **out);

// Row-major `p x q` estimate into `buf`.
enum HtStatus ht_matrix_estimate_m_hat(const struct HtMatrixEstimate *est, double *buf, size_t len);

enum HtStatus ht_matrix_estimate_op_radius(const struct HtMatrixEstimate *est, double *out);

enum HtStatus ht_matrix_estimate_mc_stderr(const struct HtMatrixEstimate *est, double *out);

enum HtStatus ht_matrix_estimate_certified(const struct HtMatrixEstimate *est, bool *out);

void ht_matrix_estimate_free(struct HtMatrixEstimate *est);

// Gram estimate and eigenvalue lower estimates given `t_bound >= E |X|^4`.
enum HtStatus ht_fit_gram(const struct HtVectorSample *sample,
                          double t_bound,
                          double delta,
                          uint64_t seed,
                          struct HtGramEstimate **out);

// Row-major `d x d` estimate into `buf`.
enum HtStatus ht_gram_estimate_g_hat(const struct HtGramEstimate *est, double *buf, size_t len);

// Eigenvalue lower estimates in decreasing order.
enum HtStatus ht_gram_estimate_sigma_hat(const struct HtGramEstimate *est, double *buf, size_t len);

enum HtStatus ht_gram_estimate_sup_gap(const struct HtGramEstimate *est, double *out);

enum HtStatus ht_gram_estimate_certified(const struct HtGramEstimate *est, bool *out);

void ht_gram_estimate_free(struct HtGramEstimate *est);

// Robust ridge fit and its confidence region from `n x d` row-major `x`
// and `n` responses `y`. The region holds with probability `1 - 2 delta`.
enum HtStatus ht_regress(const double *x,
                         const double *y,
                         size_t n,
                         size_t d,
                         struct HtRegressionBounds bounds,
                         double lambda,
                         double delta,
                         size_t n_draws,
                         uint64_t seed,
                         struct HtRegion **out);

enum HtStatus ht_region_theta(const struct HtRegion *region, double *buf, size_t len);

// Radii of the plug-in Gram matrix (`epsilon`) and cross moment (`eta`).
enum HtStatus ht_region_radii(const struct HtRegion *region, double *epsilon, double *eta);

enum HtStatus ht_region_contains(const struct HtRegion *region,
                                 const double *theta,
                                 size_t d,
                                 bool *out);

void ht_region_free(struct HtRegion *region);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEAVYTAIL_H */
