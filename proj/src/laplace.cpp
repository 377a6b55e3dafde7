/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/laplace.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stgp {

namespace {
constexpr double kLog2Pi = 1.8378770664093453;
constexpr double kSqrt2 = 1.4142135623730951;
}  // namespace

double norm_pdf(double z) { return std::exp(-0.5 * z * z - 0.5 * kLog2Pi); }

double norm_cdf(double z) { return 0.5 * std::erfc(-z / kSqrt2); }

namespace {

// lower-tail series Phi(z) ~ phi(z)/(-z) * (1 - 1/z^2 + 3/z^4 - ...)
double lower_tail_series(double z) {
  const double z2 = z * z;
  const double z4 = z2 * z2;
  return 1.0 - 1.0 / z2 + 3.0 / z4 - 15.0 / (z4 * z2) + 105.0 / (z4 * z4) -
         945.0 / (z4 * z4 * z2);
}

}  // namespace

double log_norm_cdf(double z) {
  if (z > -8.0) {
    return std::log(norm_cdf(z));
  }
  return -0.5 * z * z - 0.5 * kLog2Pi - std::log(-z) +
         std::log(lower_tail_series(z));
}

double inverse_mills(double z) {
  if (z > -8.0) {
    return norm_pdf(z) / norm_cdf(z);
  }
  return -z / lower_tail_series(z);
}

double zcptn_loglik(double y, double mu, const LikelihoodParams& params) {
  params.validate();
  if (y < 0.0) throw DataError("zcptn_loglik: negative precipitation amount");
  const double sigma = params.sigma;
  if (y == 0.0) {
    return log_norm_cdf(-mu / sigma);
  }
  const double lambda = params.lambda;
  const double g = std::pow(y, 1.0 / lambda);
  const double z = (g - mu) / sigma;
  return -0.5 * z * z - 0.5 * kLog2Pi - std::log(sigma) - std::log(lambda) -
         (1.0 - 1.0 / lambda) * std::log(y);
}

std::pair<double, double> zcptn_derivs(double y, double mu,
                                       const LikelihoodParams& params) {
  if (y < 0.0) throw DataError("zcptn_derivs: negative precipitation amount");
  const double sigma = params.sigma;
  if (y == 0.0) {
    const double z = -mu / sigma;
    const double h = inverse_mills(z);
    const double d1 = -h / sigma;
    const double d2 = (-z * h - h * h) / (sigma * sigma);
    return {d1, std::min(d2, 0.0)};
  }
  const double g = std::pow(y, 1.0 / params.lambda);
  const double d1 = (g - mu) / (sigma * sigma);
  return {d1, -1.0 / (sigma * sigma)};
}

namespace {

struct Likelihood {
  const vec_t* y;
  const vec_t* offset;  // X beta
  const LikelihoodParams* lik;

  double value(const vec_t& b) const {
    double acc = 0.0;
    const int n = static_cast<int>(b.size());
    for (int i = 0; i < n; ++i) {
      acc += zcptn_loglik((*y)[i], (*offset)[i] + b[i], *lik);
    }
    return acc;
  }
  void derivs(const vec_t& b, vec_t& g, vec_t& w) const {
    const int n = static_cast<int>(b.size());
    g.resize(n);
    w.resize(n);
    for (int i = 0; i < n; ++i) {
      const auto [d1, d2] = zcptn_derivs((*y)[i], (*offset)[i] + b[i], *lik);
      g[i] = d1;
      w[i] = std::max(-d2, 0.0);
    }
  }
};

}  // namespace

std::pair<double, LaplaceState> laplace_marginal(LaplaceAlgebra& algebra,
                                                 const vec_t& y,
                                                 const den_mat_t& X,
                                                 const vec_t& beta,
                                                 const LikelihoodParams& lik,
                                                 const vec_t* warm_start) {
  lik.validate();
  const int n = algebra.n();
  if (static_cast<int>(y.size()) != n) {
    throw DataError("laplace_marginal: response length mismatch");
  }
  vec_t offset = vec_t::Zero(n);
  if (X.cols() > 0 && beta.size() > 0) offset = X * beta;
  const Likelihood ell{&y, &offset, &lik};

  // Newton in the (b, a) pair with a = Sigma^{-1} b, so the quadratic
  // penalty is a.dot(b) and Sigma is never inverted explicitly.
  vec_t b = warm_start != nullptr && warm_start->size() == n ? *warm_start
                                                             : vec_t::Zero(n);
  vec_t a;
  if (b.isZero(0.0)) {
    a = vec_t::Zero(n);
  } else {
    // recover a for the warm start; one extra solve
    vec_t g, w;
    ell.derivs(b, g, w);
    algebra.prepare(w);
    const vec_t rhs = w.cwiseProduct(b) + g;
    const vec_t bn = algebra.solve(rhs);
    a = rhs - w.cwiseProduct(bn);
    b = bn;
  }
  double psi = ell.value(b) - 0.5 * a.dot(b);

  LaplaceState state;
  vec_t g(n), w(n);
  const int max_iter = 100;
  bool converged = false;
  int iter = 0;
  for (iter = 1; iter <= max_iter; ++iter) {
    ell.derivs(b, g, w);
    const double scale = std::max(1.0, g.lpNorm<Eigen::Infinity>());
    if ((g - a).lpNorm<Eigen::Infinity>() < 1e-6 * scale) {
      converged = true;
      break;
    }
    algebra.prepare(w);
    const vec_t rhs = w.cwiseProduct(b) + g;
    const vec_t b_new = algebra.solve(rhs);
    const vec_t a_new = rhs - w.cwiseProduct(b_new);
    // step halving on the penalized objective
    double step = 1.0;
    bool accepted = false;
    for (int h = 0; h < 30; ++h) {
      const vec_t b_try = b + step * (b_new - b);
      const vec_t a_try = a + step * (a_new - a);
      const double psi_try = ell.value(b_try) - 0.5 * a_try.dot(b_try);
      if (psi_try >= psi - 1e-12 * std::abs(psi)) {
        b = b_try;
        a = a_try;
        psi = psi_try;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // stalled; convergence check decides below
  }
  if (!converged) {
    ell.derivs(b, g, w);
    const double scale = std::max(1.0, g.lpNorm<Eigen::Infinity>());
    converged = (g - a).lpNorm<Eigen::Infinity>() < 1e-6 * scale;
    if (!converged) {
      throw NumericError("laplace_marginal: Newton did not converge in 100 iterations");
    }
  }
  ell.derivs(b, g, w);
  algebra.prepare(w);
  const double log_marginal =
      ell.value(b) - 0.5 * a.dot(b) - 0.5 * algebra.logdet_I_plus_WS();

  state.mode = b;
  state.grad_at_mode = a;
  state.w = w;
  state.log_marginal = log_marginal;
  state.converged = converged;
  state.iterations = iter;
  return {-log_marginal, state};
}

ZcptnPrediction zcptn_predict(const LaplaceState& state, LaplaceAlgebra& algebra,
                              const std::vector<SpaceTimePoint>& targets,
                              const den_mat_t& X_p, const vec_t& beta,
                              const LikelihoodParams& lik, int pred_m_v,
                              int n_samples, std::uint64_t seed) {
  if (n_samples < 2) {
    throw ConfigError("zcptn_predict: need at least two samples for scoring");
  }
  const int n_p = static_cast<int>(targets.size());
  ZcptnPrediction out;
  out.mu_latent.resize(n_p);
  out.var_latent.resize(n_p);
  out.p_rain.resize(n_p);
  out.amount_mean.resize(n_p);
  out.amount_median.resize(n_p);
  out.samples.resize(n_p, n_samples);

  vec_t offset = vec_t::Zero(n_p);
  if (X_p.cols() > 0 && beta.size() > 0) {
    if (X_p.rows() != n_p) throw ConfigError("zcptn_predict: covariate mismatch");
    offset = X_p * beta;
  }
  algebra.prepare(state.w);

  for (int p = 0; p < n_p; ++p) {
    const vec_t k = algebra.cross_cov_to(targets[static_cast<std::size_t>(p)], pred_m_v);
    const double k_pp =
        algebra.prior_var(targets[static_cast<std::size_t>(p)], pred_m_v);
    const double mu_lat = offset[p] + k.dot(state.grad_at_mode);
    // var = k_pp - k' (W - W (Sigma^{-1}+W)^{-1} W) k
    const vec_t wk = state.w.cwiseProduct(k);
    double var_lat = k_pp - k.dot(wk) + wk.dot(algebra.solve(wk));
    var_lat = std::max(var_lat, 0.0);
    out.mu_latent[p] = mu_lat;
    out.var_latent[p] = var_lat;
    const double s_tot = std::sqrt(lik.sigma * lik.sigma + var_lat);
    out.p_rain[p] = 1.0 - norm_cdf(-mu_lat / s_tot);

    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(p)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double sd_lat = std::sqrt(var_lat);
    double acc = 0.0;
    std::vector<double> draws(static_cast<std::size_t>(n_samples));
    for (int s = 0; s < n_samples; ++s) {
      const double latent = mu_lat + sd_lat * gauss(rng);
      const double zval = latent + lik.sigma * gauss(rng);
      const double amount = zval <= 0.0 ? 0.0 : std::pow(zval, lik.lambda);
      out.samples(p, s) = amount;
      draws[static_cast<std::size_t>(s)] = amount;
      acc += amount;
    }
    out.amount_mean[p] = acc / n_samples;
    std::nth_element(draws.begin(), draws.begin() + n_samples / 2, draws.end());
    out.amount_median[p] = draws[static_cast<std::size_t>(n_samples) / 2];
  }
  return out;
}

double zcptn_cdf(double y, double mu_latent, double var_latent,
                 const LikelihoodParams& lik) {
  if (y < 0.0) return 0.0;
  const double s_tot = std::sqrt(lik.sigma * lik.sigma + var_latent);
  if (y == 0.0) return norm_cdf(-mu_latent / s_tot);
  const double g = std::pow(y, 1.0 / lik.lambda);
  return norm_cdf((g - mu_latent) / s_tot);
}

}  // namespace stgp
