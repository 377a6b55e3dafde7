/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_APPROXIMATIONS_HPP
#define STGP_APPROXIMATIONS_HPP

#include <memory>
#include <optional>
#include <vector>

#include "stgp/covariance.hpp"
#include "stgp/dataset.hpp"
#include "stgp/inducing.hpp"
#include "stgp/neighbors.hpp"
#include "stgp/types.hpp"

namespace stgp {

/// Gradient order for the Gaussian objective: (sigma2, sigma1_2, a, c, alpha,
/// beta, delta).
inline constexpr int kNllGradDim = 7;

/// Whether conditioning blocks use the latent covariance or the observation
/// covariance (nugget on the diagonal). The latent form is what the Laplace
/// path needs; the observation form makes the Gaussian likelihood algebra a
/// pure product over rows.
enum class DiagonalPolicy { kLatent, kObservation };

struct VecchiaStructure {
  const SpaceTimeDataset* data = nullptr;
  GneitingKernel kernel;
  NeighborSets neighbors;
  DiagonalPolicy policy = DiagonalPolicy::kLatent;
  sp_mat_rm_t B;  // unit lower triangular, off-diagonals -A_i on N(i)
  vec_t D;        // conditional variances, all > 0

  VecchiaStructure() : kernel(CovarianceParams()) {}
};

struct InducingStructure {
  InducingSet set;
  InducingBasis basis;
  den_mat_t cross_cov;  // m x n latent cross-covariance to the data
};

struct FitcStructure {
  const SpaceTimeDataset* data = nullptr;
  GneitingKernel kernel;
  InducingStructure inducing;
  vec_t fitc_diag;       // latent diagonal correction, clamped non-negative
  vec_t lambda;          // fitc_diag + sigma2 (observation diagonal)
  Eigen::LLT<den_mat_t> M_llt;  // Sigma_m + U diag(1/lambda) U^T

  FitcStructure() : kernel(CovarianceParams()) {}
};

struct VifStructure {
  const SpaceTimeDataset* data = nullptr;
  GneitingKernel kernel;
  InducingStructure inducing;
  NeighborSets residual_neighbors;
  DiagonalPolicy policy = DiagonalPolicy::kLatent;
  sp_mat_rm_t B;  // residual Vecchia factors
  vec_t D;
  den_mat_t whitened;           // L_m^{-1} U, m x n
  den_mat_t QUt;                // Q U^T, n x m with Q = B^T D^{-1} B
  Eigen::LLT<den_mat_t> M_llt;  // Sigma_m + U Q U^T

  VifStructure() : kernel(CovarianceParams()) {}
};

struct PredictiveDistribution {
  vec_t mu;   // response-scale predictive mean
  vec_t var;  // response-scale predictive variance (includes the nugget)
  // latent-scale summaries, filled by the non-Gaussian path
  vec_t mu_latent;
  vec_t var_latent;
  vec_t p_rain;             // occurrence probabilities
  den_mat_t amount_samples; // n_p x n_samples draws on the data scale
  std::optional<LikelihoodParams> lik;

  int size() const { return static_cast<int>(mu.size()); }
};

VecchiaStructure build_vecchia(const SpaceTimeDataset& data,
                               const CovarianceParams& theta,
                               const NeighborSets& neighbors,
                               DiagonalPolicy policy = DiagonalPolicy::kLatent);

FitcStructure build_fitc(const SpaceTimeDataset& data,
                         const CovarianceParams& theta,
                         const InducingSet& inducing);

VifStructure build_vif(const SpaceTimeDataset& data, const CovarianceParams& theta,
                       const InducingSet& inducing,
                       const NeighborSets& residual_neighbors,
                       DiagonalPolicy policy = DiagonalPolicy::kLatent);

/// Negative log marginal likelihood of y = X beta + b + eps under the
/// approximate covariance. Observation-policy Vecchia/VIF structures use the
/// per-row product form; latent-policy structures fold the nugget in exactly
/// through sparse factorizations (desk scale).
double nll(const VecchiaStructure& s, const vec_t& y, const den_mat_t& X,
           const vec_t& beta);
double nll(const FitcStructure& s, const vec_t& y, const den_mat_t& X,
           const vec_t& beta);
double nll(const VifStructure& s, const vec_t& y, const den_mat_t& X,
           const vec_t& beta);

/// Analytic gradient over (sigma2, sigma1_2, a, c, alpha, beta, delta) with
/// neighbor sets and inducing points held fixed. Vecchia/VIF require the
/// observation policy (the form the optimizer drives).
vec_t nll_grad(const VecchiaStructure& s, const vec_t& y, const den_mat_t& X,
               const vec_t& beta);
vec_t nll_grad(const FitcStructure& s, const vec_t& y, const den_mat_t& X,
               const vec_t& beta);
vec_t nll_grad(const VifStructure& s, const vec_t& y, const den_mat_t& X,
               const vec_t& beta);

/// Generalized-least-squares coefficients under the approximate covariance.
vec_t gls_beta(const VecchiaStructure& s, const vec_t& y, const den_mat_t& X);
vec_t gls_beta(const FitcStructure& s, const vec_t& y, const den_mat_t& X);
vec_t gls_beta(const VifStructure& s, const vec_t& y, const den_mat_t& X);

/// Per-target predictive means and variances. Vecchia-family targets condition
/// on their pred_m_v nearest training points under the structure's metric;
/// targets are appended after all training rows and never condition on each
/// other.
PredictiveDistribution predict(const VecchiaStructure& s, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               const std::vector<SpaceTimePoint>& targets,
                               const den_mat_t& X_p, int pred_m_v);
PredictiveDistribution predict(const FitcStructure& s, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               const std::vector<SpaceTimePoint>& targets,
                               const den_mat_t& X_p);
PredictiveDistribution predict(const VifStructure& s, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               const std::vector<SpaceTimePoint>& targets,
                               const den_mat_t& X_p, int pred_m_v);

/// Latent-covariance algebra shared by the Laplace path: solves and
/// log-determinants of (Sigma^{-1} + W) for diagonal W >= 0.
class LaplaceAlgebra {
 public:
  virtual ~LaplaceAlgebra() = default;
  virtual int n() const = 0;
  virtual void prepare(const vec_t& w) = 0;
  virtual vec_t solve(const vec_t& rhs) const = 0;        // (Sigma^{-1}+W)^{-1} rhs
  virtual double logdet_I_plus_WS() const = 0;            // log det(I + W Sigma)
  virtual vec_t sigma_times(const vec_t& v) const = 0;    // Sigma v
  /// Latent cross-covariance column between training rows and one target.
  virtual vec_t cross_cov_to(const SpaceTimePoint& target, int pred_m_v) const = 0;
  virtual double prior_var(const SpaceTimePoint& target, int pred_m_v) const = 0;
};

std::unique_ptr<LaplaceAlgebra> make_laplace_algebra(const VecchiaStructure& s);
std::unique_ptr<LaplaceAlgebra> make_laplace_algebra(const FitcStructure& s);
std::unique_ptr<LaplaceAlgebra> make_laplace_algebra(const VifStructure& s);

}  // namespace stgp

#endif  // STGP_APPROXIMATIONS_HPP
