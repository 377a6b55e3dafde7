/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/covariance.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "stgp/inducing.hpp"

namespace stgp {

CovarianceParams::CovarianceParams(double sigma2_, double sigma1_2_, double a_,
                                   double c_, double alpha_, double nu_,
                                   double beta_, double delta_)
    : sigma2(sigma2_),
      sigma1_2(sigma1_2_),
      a(a_),
      c(c_),
      alpha(alpha_),
      nu(nu_),
      beta(beta_),
      delta(delta_) {
  validate();
}

void CovarianceParams::validate() const {
  auto fail = [](const std::string& what) {
    throw ConfigError("CovarianceParams: " + what);
  };
  if (!(sigma2 >= 0.0) || !std::isfinite(sigma2)) fail("sigma2 must be >= 0");
  if (!(sigma1_2 > 0.0) || !std::isfinite(sigma1_2)) fail("sigma1_2 must be > 0");
  if (!(a > 0.0) || !std::isfinite(a)) fail("a must be > 0");
  if (!(c > 0.0) || !std::isfinite(c)) fail("c must be > 0");
  if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must be in (0, 1]");
  if (!(nu > 0.0) || !std::isfinite(nu)) fail("nu must be > 0");
  if (!(beta >= 0.0 && beta <= 1.0)) fail("beta must be in [0, 1]");
  if (!(delta >= 0.0) || !std::isfinite(delta)) fail("delta must be >= 0");
}

LikelihoodParams::LikelihoodParams(double sigma_, double lambda_)
    : sigma(sigma_), lambda(lambda_) {
  validate();
}

void LikelihoodParams::validate() const {
  if (!(sigma > 0.0) || !std::isfinite(sigma)) {
    throw ConfigError("LikelihoodParams: sigma must be > 0");
  }
  if (!(lambda > 0.0) || !std::isfinite(lambda)) {
    throw ConfigError("LikelihoodParams: lambda must be > 0");
  }
}

bool matern_has_closed_form(double nu) {
  return nu == 0.5 || nu == 1.5 || nu == 2.5;
}

double matern_corr(double x, double nu) {
  if (x < 0.0) throw ConfigError("matern_corr: x must be >= 0");
  if (x == 0.0) return 1.0;
  if (nu == 0.5) return std::exp(-x);
  if (nu == 1.5) return (1.0 + x) * std::exp(-x);
  if (nu == 2.5) return (1.0 + x + x * x / 3.0) * std::exp(-x);
  // general smoothness via the modified Bessel function of the second kind
  const double v = std::pow(2.0, 1.0 - nu) / std::tgamma(nu) *
                   std::pow(x, nu) * std::cyl_bessel_k(nu, x);
  // K_nu underflows for large arguments; the correlation limit is 0
  return std::isfinite(v) ? v : 0.0;
}

double matern_corr_deriv(double x, double nu) {
  if (x < 0.0) throw ConfigError("matern_corr_deriv: x must be >= 0");
  if (nu == 0.5) return -std::exp(-x);
  if (nu == 1.5) return -x * std::exp(-x);
  if (nu == 2.5) return -(x * (1.0 + x) / 3.0) * std::exp(-x);
  throw NumericError(
      "matern_corr_deriv: analytic derivative only for nu in {0.5, 1.5, 2.5}; "
      "use finite differences for general nu");
}

GneitingKernel::GneitingKernel(const CovarianceParams& theta) : theta_(theta) {
  theta_.validate();
  exponent_E_ = theta_.delta + theta_.beta * kSpatialDim / 2.0;
}

GneitingKernel::TemporalFactors GneitingKernel::factors(double u) const {
  TemporalFactors f;
  if (u == 0.0) {
    f.u2a = 0.0;
    f.u2a_logu = 0.0;
    f.pow_mE = 1.0;
    f.pow_mbh = 1.0;
    f.inv_T = 1.0;
    f.log_T = 0.0;
    return f;
  }
  f.u2a = std::pow(u, 2.0 * theta_.alpha);
  f.u2a_logu = f.u2a * std::log(u);
  const double T = theta_.a * f.u2a + 1.0;
  f.inv_T = 1.0 / T;
  f.log_T = std::log(T);
  f.pow_mE = std::pow(T, -exponent_E_);
  f.pow_mbh = std::pow(T, -theta_.beta / 2.0);
  return f;
}

void GneitingKernel::precompute_time_lags(int max_lag) {
  if (max_lag < 0 || max_lag > 2000000) {
    throw ConfigError("GneitingKernel: unreasonable time-lag table size");
  }
  lag_table_.resize(static_cast<std::size_t>(max_lag) + 1);
  for (int u = 0; u <= max_lag; ++u) {
    lag_table_[static_cast<std::size_t>(u)] = factors(static_cast<double>(u));
  }
}

namespace {

inline bool integral_lag(double u, int& out) {
  const double r = std::nearbyint(u);
  if (std::abs(u - r) < 1e-9 && r >= 0.0) {
    out = static_cast<int>(r);
    return true;
  }
  return false;
}

}  // namespace

double GneitingKernel::eval(double h, double u) const {
  TemporalFactors f;
  int lag;
  if (!lag_table_.empty() && integral_lag(u, lag) &&
      lag < static_cast<int>(lag_table_.size())) {
    f = lag_table_[static_cast<std::size_t>(lag)];
  } else {
    f = factors(u);
  }
  const double x = theta_.c * h * f.pow_mbh;
  return theta_.sigma1_2 * f.pow_mE * matern_corr(x, theta_.nu);
}

KernelGrad GneitingKernel::grad(double h, double u) const {
  if (!gradient_available()) {
    throw NumericError(
        "GneitingKernel::grad: analytic gradient requires nu in "
        "{0.5, 1.5, 2.5}; use finite differences for general nu");
  }
  TemporalFactors f;
  int lag;
  if (!lag_table_.empty() && integral_lag(u, lag) &&
      lag < static_cast<int>(lag_table_.size())) {
    f = lag_table_[static_cast<std::size_t>(lag)];
  } else {
    f = factors(u);
  }
  const double x = theta_.c * h * f.pow_mbh;
  const double M = matern_corr(x, theta_.nu);
  const double Mp = matern_corr_deriv(x, theta_.nu);
  const double s1 = theta_.sigma1_2;
  const double base = s1 * f.pow_mE;  // covariance / M

  KernelGrad g;
  g[0] = f.pow_mE * M;  // d/d sigma1_2
  // chain through T = a u^{2 alpha} + 1
  const double dC_dT = base * f.inv_T * (-exponent_E_ * M - 0.5 * theta_.beta * x * Mp);
  g[1] = dC_dT * f.u2a;                          // d/da
  g[3] = dC_dT * 2.0 * theta_.a * f.u2a_logu;    // d/dalpha
  g[2] = base * Mp * x / theta_.c;               // d/dc
  g[4] = -f.log_T * base * (M + 0.5 * x * Mp);   // d/dbeta (d = 2)
  g[5] = -f.log_T * base * M;                    // d/ddelta
  return g;
}

double gneiting_cov(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                    const CovarianceParams& theta) {
  return GneitingKernel(theta)(p1, p2);
}

KernelGrad gneiting_grad(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                         const CovarianceParams& theta) {
  return GneitingKernel(theta).grad(p1, p2);
}

double corr_metric_dc(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                      const CovarianceParams& theta) {
  const double rho = gneiting_cov(p1, p2, theta) / theta.sigma1_2;
  const double rad = 1.0 - std::abs(rho);
  return std::sqrt(std::max(rad, 0.0));
}

double corr_metric_dr(const SpaceTimePoint& p1, const SpaceTimePoint& p2,
                      const CovarianceParams& theta, const InducingBasis& basis,
                      bool* degenerate) {
  const GneitingKernel kernel(theta);
  if (degenerate != nullptr) *degenerate = false;
  if (basis.empty()) {
    return corr_metric_dc(p1, p2, theta);
  }
  const vec_t w1 = basis.whitened_cross_cov(kernel, p1);
  const vec_t w2 = basis.whitened_cross_cov(kernel, p2);
  const double r11 = theta.sigma1_2 - w1.squaredNorm();
  const double r22 = theta.sigma1_2 - w2.squaredNorm();
  const double degeneracy_tol = 1e-7 * theta.sigma1_2;  // above the Sigma_m jitter floor
  if (r11 <= degeneracy_tol || r22 <= degeneracy_tol) {
    if (degenerate == nullptr) {
      throw NumericError("corr_metric_dr: residual variance exhausted at a point");
    }
    *degenerate = true;
    return 1.0;
  }
  const double r12 = kernel(p1, p2) - w1.dot(w2);
  double rad = 1.0 - std::abs(r12) / std::sqrt(r11 * r22);
  if (rad < 0.0) {
    if (rad < -1e-12) {
      throw NumericError("corr_metric_dr: residual correlation above 1");
    }
    rad = 0.0;
  }
  return std::sqrt(rad);
}

EffectiveRanges effective_ranges(const CovarianceParams& theta) {
  theta.validate();
  EffectiveRanges r{};
  const double exp_time = theta.delta + theta.beta;  // exponent at zero spatial lag
  if (exp_time <= 0.0 || theta.a <= 0.0) {
    r.time_range = std::numeric_limits<double>::infinity();
  } else {
    const double T = std::pow(20.0, 1.0 / exp_time);
    r.time_range = std::pow((T - 1.0) / theta.a, 1.0 / (2.0 * theta.alpha));
  }
  // bisection for matern_corr(x, nu) = 0.05; the profile is decreasing
  double lo = 0.0, hi = 1.0;
  while (matern_corr(hi, theta.nu) > 0.05) hi *= 2.0;
  while ((hi - lo) > 1e-10 * hi) {
    const double mid = 0.5 * (lo + hi);
    if (matern_corr(mid, theta.nu) > 0.05) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  r.space_range = 0.5 * (lo + hi) / theta.c;
  return r;
}

void write_params(std::ostream& os, const CovarianceParams& theta,
                  const std::optional<LikelihoodParams>& lik,
                  const vec_t& beta_coef) {
  os.precision(17);
  os << "sigma2 = " << theta.sigma2 << "\n";
  os << "sigma1_2 = " << theta.sigma1_2 << "\n";
  os << "a = " << theta.a << "\n";
  os << "c = " << theta.c << "\n";
  os << "alpha = " << theta.alpha << "\n";
  os << "nu = " << theta.nu << "\n";
  os << "beta = " << theta.beta << "\n";
  os << "delta = " << theta.delta << "\n";
  if (lik.has_value()) {
    os << "sigma = " << lik->sigma << "\n";
    os << "lambda = " << lik->lambda << "\n";
  }
  for (Eigen::Index j = 0; j < beta_coef.size(); ++j) {
    os << "beta" << j << " = " << beta_coef[j] << "\n";
  }
}

void write_params_file(const std::string& path, const CovarianceParams& theta,
                       const std::optional<LikelihoodParams>& lik,
                       const vec_t& beta_coef) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open parameter file for writing: " + path);
  write_params(os, theta, lik, beta_coef);
}

ParamFile read_params_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open parameter file: " + path);
  std::map<std::string, double> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": expected 'name = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    try {
      std::size_t pos = 0;
      const double v = std::stod(val, &pos);
      if (pos != val.size()) throw std::invalid_argument(val);
      kv[key] = v;
    } catch (const std::exception&) {
      throw ConfigError(path + ":" + std::to_string(lineno) +
                        ": bad numeric value '" + val + "'");
    }
  }
  ParamFile out;
  auto get = [&](const std::string& key, double fallback, bool required) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      if (required) throw ConfigError(path + ": missing parameter '" + key + "'");
      return fallback;
    }
    return it->second;
  };
  out.theta = CovarianceParams(
      get("sigma2", 0.0, false), get("sigma1_2", 1.0, true),
      get("a", 1.0, true), get("c", 1.0, true), get("alpha", 0.5, true),
      get("nu", 1.5, true), get("beta", 0.5, true), get("delta", 0.5, true));
  if (kv.count("sigma") || kv.count("lambda")) {
    out.lik = LikelihoodParams(get("sigma", 1.0, true), get("lambda", 1.0, true));
  }
  std::vector<double> betas;
  for (std::size_t j = 0;; ++j) {
    auto it = kv.find("beta" + std::to_string(j));
    if (it == kv.end()) break;
    betas.push_back(it->second);
  }
  out.beta_coef = Eigen::Map<const vec_t>(betas.data(),
                                          static_cast<Eigen::Index>(betas.size()));
  return out;
}

}  // namespace stgp
