/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_COVARIANCE_HPP
#define STGP_COVARIANCE_HPP

#include <array>
#include <iosfwd>
#include <optional>
#include <vector>

#include "stgp/types.hpp"

namespace stgp {

inline constexpr int kSpatialDim = 2;

/// Hyperparameters of the non-separable space-time covariance plus the nugget.
struct CovarianceParams {
  double sigma2 = 0.0;    // nugget variance, >= 0
  double sigma1_2 = 1.0;  // marginal GP variance, > 0
  double a = 1.0;         // temporal scale, > 0
  double c = 1.0;         // spatial decay (inverse length), > 0
  double alpha = 0.5;     // temporal smoothness, in (0, 1]
  double nu = 1.5;        // Matern smoothness, > 0
  double beta = 0.5;      // non-separability, in [0, 1]
  double delta = 0.5;     // temporal scaling, >= 0

  CovarianceParams() = default;
  CovarianceParams(double sigma2_, double sigma1_2_, double a_, double c_,
                   double alpha_, double nu_, double beta_, double delta_);

  void validate() const;
};

/// Latent noise scale and power transform of the zero-censored model.
struct LikelihoodParams {
  double sigma = 1.0;   // > 0
  double lambda = 1.0;  // > 0

  LikelihoodParams() = default;
  LikelihoodParams(double sigma_, double lambda_);
  void validate() const;
};

/// Matern correlation 2^{1-nu} x^nu K_nu(x) / Gamma(nu); closed forms for
/// nu in {0.5, 1.5, 2.5}, modified Bessel evaluation otherwise.
double matern_corr(double x, double nu);

/// d/dx of matern_corr. Only the closed-form smoothness values are supported.
double matern_corr_deriv(double x, double nu);

bool matern_has_closed_form(double nu);

/// Gradient order used throughout: (sigma1_2, a, c, alpha, beta, delta).
inline constexpr int kKernelGradDim = 6;
using KernelGrad = std::array<double, kKernelGradDim>;

/// Space-time kernel evaluator. Holds the parameters and, optionally, cached
/// temporal factors for integer-valued time lags (the common case for daily
/// data), which removes pow/log calls from the hot pair loops.
class GneitingKernel {
 public:
  explicit GneitingKernel(const CovarianceParams& theta);

  /// Enables the integer-lag fast path for lags 0..max_lag.
  void precompute_time_lags(int max_lag);

  const CovarianceParams& params() const { return theta_; }

  /// Latent covariance, nugget never included.
  double operator()(const SpaceTimePoint& p1, const SpaceTimePoint& p2) const {
    return eval(p1.spatial_dist(p2), p1.time_lag(p2));
  }
  double eval(double spatial_dist, double time_lag) const;

  /// Partials of the latent covariance; requires a closed-form nu.
  KernelGrad grad(const SpaceTimePoint& p1, const SpaceTimePoint& p2) const {
    return grad(p1.spatial_dist(p2), p1.time_lag(p2));
  }
  KernelGrad grad(double spatial_dist, double time_lag) const;

  bool gradient_available() const { return matern_has_closed_form(theta_.nu); }

 private:
  struct TemporalFactors {
    double pow_mE;    // T^{-(delta+beta)}
    double pow_mbh;   // T^{-beta/2}
    double inv_T;     // 1/T
    double log_T;     // log T
    double u2a;       // |dt|^{2 alpha}
    double u2a_logu;  // |dt|^{2 alpha} log|dt| (0 at dt = 0)
  };
  TemporalFactors factors(double u) const;

  CovarianceParams theta_;
  double exponent_E_;  // delta + beta * d/2 with d = 2
  std::vector<TemporalFactors> lag_table_;
};

/// gneiting_cov/gneiting_grad are the free-function entry points; the kernel
/// object above is the cached form used by the structure builders.
double gneiting_cov(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                    const CovarianceParams& theta);
KernelGrad gneiting_grad(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                         const CovarianceParams& theta);

/// Correlation metric sqrt(1 - |corr|), bounded by 1.
double corr_metric_dc(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                      const CovarianceParams& theta);

class InducingBasis;  // defined in inducing.hpp

/// Residual-correlation metric for the hybrid approximation. A point whose
/// residual variance vanishes is degenerate: with `degenerate` supplied the
/// distance is reported as 1, otherwise a NumericError is thrown.
double corr_metric_dr(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                      const CovarianceParams& theta, const InducingBasis& basis,
                      bool* degenerate = nullptr);

struct EffectiveRanges {
  double time_range;   // +inf when the temporal exponent or scale vanishes
  double space_range;
};

/// Lags at which correlation decays to 0.05 (temporal margin analytic,
/// spatial margin by bisection on the Matern profile).
EffectiveRanges effective_ranges(const CovarianceParams& theta);

/// Flat `name = value` parameter files using the canonical symbol names.
void write_params(std::ostream& os, const CovarianceParams& theta,
                  const std::optional<LikelihoodParams>& lik = std::nullopt,
                  const vec_t& beta_coef = vec_t());
void write_params_file(const std::string& path, const CovarianceParams& theta,
                       const std::optional<LikelihoodParams>& lik = std::nullopt,
                       const vec_t& beta_coef = vec_t());

struct ParamFile {
  CovarianceParams theta;
  std::optional<LikelihoodParams> lik;
  vec_t beta_coef;
};
ParamFile read_params_file(const std::string& path);

}  // namespace stgp

#endif  // STGP_COVARIANCE_HPP
