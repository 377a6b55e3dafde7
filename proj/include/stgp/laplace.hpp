/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_LAPLACE_HPP
#define STGP_LAPLACE_HPP

#include <cstdint>
#include <utility>

#include "stgp/approximations.hpp"
#include "stgp/covariance.hpp"
#include "stgp/types.hpp"

namespace stgp {

/// Numerically stable log Phi with an asymptotic branch for z < -8.
double log_norm_cdf(double z);
double norm_cdf(double z);
double norm_pdf(double z);
/// phi(z) / Phi(z), stable in the deep lower tail.
double inverse_mills(double z);

/// Log-density of the zero-censored power-transformed normal observation
/// model at latent mean mu.
double zcptn_loglik(double y, double mu, const LikelihoodParams& params);

/// First and second derivatives of zcptn_loglik with respect to mu. The
/// second derivative is non-positive everywhere.
std::pair<double, double> zcptn_derivs(double y, double mu,
                                       const LikelihoodParams& params);

struct LaplaceState {
  vec_t mode;        // latent field at the posterior mode
  vec_t grad_at_mode;  // d log p(y | mode) / d mu, equals Sigma^{-1} mode
  vec_t w;           // negative second derivatives at the mode
  double log_marginal = 0.0;  // Laplace approximation of log p(y)
  bool converged = false;
  int iterations = 0;
};

/// Newton mode finding with step halving, followed by the Laplace
/// log-marginal. `algebra` carries the approximate latent covariance.
std::pair<double, LaplaceState> laplace_marginal(LaplaceAlgebra& algebra,
                                                 const vec_t& y,
                                                 const den_mat_t& X,
                                                 const vec_t& beta,
                                                 const LikelihoodParams& lik,
                                                 const vec_t* warm_start = nullptr);

struct ZcptnPrediction {
  vec_t mu_latent;   // predictive mean of Xp beta + b at each target
  vec_t var_latent;  // predictive variance of the latent field
  vec_t p_rain;      // P(Y > 0)
  vec_t amount_mean;     // Monte Carlo mean of the censored transformed draw
  vec_t amount_median;
  den_mat_t samples;  // n_p x n_samples predictive draws of Y
};

/// Latent predictive moments through the Laplace-corrected precision, then
/// Monte Carlo on the observation scale: draw latent, add noise, censor,
/// raise to the power.
ZcptnPrediction zcptn_predict(const LaplaceState& state, LaplaceAlgebra& algebra,
                              const std::vector<SpaceTimePoint>& targets,
                              const den_mat_t& X_p, const vec_t& beta,
                              const LikelihoodParams& lik, int pred_m_v,
                              int n_samples, std::uint64_t seed);

/// Analytic predictive CDF of the ZC-PTN observation given latent moments.
double zcptn_cdf(double y, double mu_latent, double var_latent,
                 const LikelihoodParams& lik);

}  // namespace stgp

#endif  // STGP_LAPLACE_HPP
