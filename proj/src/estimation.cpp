/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <random>

namespace stgp {

void FitConfig::validate() const {
  if (vecchia_family() && m_v < 1) {
    throw ConfigError("FitConfig: Vecchia-family methods need m_v >= 1");
  }
  if (inducing_family() && m < 1) {
    throw ConfigError("FitConfig: inducing-point methods need m >= 1");
  }
  if (max_iterations < 1) throw ConfigError("FitConfig: max_iterations >= 1");
  if (!(tol_objective > 0.0) || !(tol_gradient > 0.0)) {
    throw ConfigError("FitConfig: tolerances must be positive");
  }
  if (!(nu > 0.0)) throw ConfigError("FitConfig: nu must be positive");
  if (likelihood == Likelihood::kGaussian && !matern_has_closed_form(nu)) {
    throw ConfigError(
        "FitConfig: the Gaussian path needs analytic kernel gradients "
        "(nu in {0.5, 1.5, 2.5})");
  }
}

const char* to_string(FitConfig::Method method) {
  switch (method) {
    case FitConfig::Method::kVecchiaEuclid: return "vecchia-euclid";
    case FitConfig::Method::kVecchiaCorr: return "vecchia-corr";
    case FitConfig::Method::kFitcKmeanspp: return "fitc-kmeanspp";
    case FitConfig::Method::kFitcSts: return "fitc-sts";
    case FitConfig::Method::kVif: return "vif";
  }
  return "?";
}

FitConfig::Method method_from_string(const std::string& name) {
  if (name == "vecchia-euclid") return FitConfig::Method::kVecchiaEuclid;
  if (name == "vecchia-corr") return FitConfig::Method::kVecchiaCorr;
  if (name == "fitc-kmeanspp") return FitConfig::Method::kFitcKmeanspp;
  if (name == "fitc-sts") return FitConfig::Method::kFitcSts;
  if (name == "vif") return FitConfig::Method::kVif;
  throw ConfigError("unknown method '" + name + "'");
}

namespace {

double quantile(std::vector<double>& v, double q) {
  if (v.empty()) return 1.0;
  const auto k = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(v.size()) - 1.0,
                       q * static_cast<double>(v.size())));
  std::nth_element(v.begin(), v.begin() + static_cast<long>(k), v.end());
  return v[k];
}

}  // namespace

CovarianceParams default_init(const SpaceTimeDataset& data, const FitConfig& config) {
  if (data.n() < 10) throw DataError("default_init: need at least 10 observations");
  vec_t resid = data.y;
  if (data.p() > 0) {
    Eigen::LDLT<den_mat_t> ldlt(data.X.transpose() * data.X);
    const vec_t beta = ldlt.solve(data.X.transpose() * data.y);
    resid -= data.X * beta;
  }
  const double mean = resid.mean();
  const double var =
      (resid.array() - mean).square().sum() / std::max(1, data.n() - 1);
  if (!(var > 0.0)) throw DataError("default_init: constant response");

  // decay scales from 10% quantiles of pairwise separations on a subsample
  std::mt19937_64 rng(mix_seed(config.seed, 0x1417));
  const int sub = std::min(data.n(), 1000);
  std::vector<int> rows(static_cast<std::size_t>(data.n()));
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(static_cast<std::size_t>(sub));
  std::vector<double> sdist, tdist;
  for (int i = 0; i < sub; ++i) {
    for (int j = 0; j < i; ++j) {
      const auto& a = data.points[static_cast<std::size_t>(rows[static_cast<std::size_t>(i)])];
      const auto& b = data.points[static_cast<std::size_t>(rows[static_cast<std::size_t>(j)])];
      const double ds = a.spatial_dist(b);
      const double dt = a.time_lag(b);
      if (ds > 0.0) sdist.push_back(ds);
      if (dt > 0.0) tdist.push_back(dt);
    }
  }
  const double alpha0 = 0.8;
  const double q_s = quantile(sdist, 0.10);
  const double q_t = quantile(tdist, 0.10);
  const double c0 = std::clamp(1.0 / std::max(q_s, 1e-12), 1e-8, 1e12);
  const double a0 =
      std::clamp(1.0 / std::pow(std::max(q_t, 1e-12), 2.0 * alpha0), 1e-8, 1e12);
  const bool gauss = config.likelihood == FitConfig::Likelihood::kGaussian;
  return CovarianceParams(gauss ? 0.5 * var : 0.0, gauss ? 0.5 * var : var, a0,
                          c0, alpha0, config.nu, 0.5, 0.5);
}

namespace {

constexpr double kBoundaryEps = 1e-6;

double logit(double p) { return std::log(p / (1.0 - p)); }
double sigmoid(double z) {
  if (z >= 0.0) {
    return 1.0 / (1.0 + std::exp(-z));
  }
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Transformed coordinates: log for the positive parameters, logit for the
/// bounded ones (clamped away from the boundary so every z maps to a valid
/// parameter and boundary optima stay reachable).
struct Transform {
  bool gaussian = true;  // nugget present
  int n_kernel() const { return gaussian ? 7 : 6; }

  vec_t to_z(const CovarianceParams& theta,
             const std::optional<LikelihoodParams>& lik) const {
    std::vector<double> z;
    if (gaussian) z.push_back(std::log(std::max(theta.sigma2, 1e-12)));
    z.push_back(std::log(theta.sigma1_2));
    z.push_back(std::log(theta.a));
    z.push_back(std::log(theta.c));
    z.push_back(logit(std::clamp(theta.alpha, kBoundaryEps, 1.0 - kBoundaryEps)));
    z.push_back(logit(std::clamp(theta.beta, kBoundaryEps, 1.0 - kBoundaryEps)));
    z.push_back(std::log(std::max(theta.delta, 1e-8)));
    if (lik.has_value()) {
      z.push_back(std::log(lik->sigma));
      z.push_back(std::log(lik->lambda));
    }
    return Eigen::Map<const vec_t>(z.data(), static_cast<Eigen::Index>(z.size()));
  }

  CovarianceParams theta_of(const vec_t& z, double nu) const {
    int k = 0;
    const double sigma2 = gaussian ? std::exp(z[k++]) : 0.0;
    const double sigma1_2 = std::exp(z[k++]);
    const double a = std::exp(z[k++]);
    const double c = std::exp(z[k++]);
    const double alpha = std::clamp(sigmoid(z[k++]), kBoundaryEps, 1.0);
    const double beta = std::clamp(sigmoid(z[k++]), 0.0, 1.0);
    const double delta = std::exp(z[k++]);
    return CovarianceParams(sigma2, sigma1_2, a, c, alpha, nu, beta, delta);
  }

  LikelihoodParams lik_of(const vec_t& z) const {
    const int base = n_kernel();
    return LikelihoodParams(std::exp(z[base]), std::exp(z[base + 1]));
  }

  /// Chain-rule factors d theta / d z for the Gaussian analytic gradient.
  vec_t dtheta_dz(const vec_t& z) const {
    vec_t d(n_kernel());
    int k = 0;
    if (gaussian) {
      d[k] = std::exp(z[k]);
      ++k;
    }
    d[k] = std::exp(z[k]);  // sigma1_2
    ++k;
    d[k] = std::exp(z[k]);  // a
    ++k;
    d[k] = std::exp(z[k]);  // c
    ++k;
    const double sa = sigmoid(z[k]);
    d[k] = sa * (1.0 - sa);  // alpha
    ++k;
    const double sb = sigmoid(z[k]);
    d[k] = sb * (1.0 - sb);  // beta
    ++k;
    d[k] = std::exp(z[k]);  // delta
    return d;
  }
};

/// Selection state rebuilt at every refresh event.
struct Selection {
  NeighborSets neighbors;
  InducingSet inducing;
};

Selection build_selection(const SpaceTimeDataset& data, const FitConfig& config,
                          const CovarianceParams& theta) {
  Selection sel;
  GneitingKernel kernel(theta);
  const EffectiveRanges ranges = effective_ranges(theta);
  const double space_scale =
      std::isfinite(ranges.space_range) && ranges.space_range > 0.0
          ? ranges.space_range
          : 1.0;
  double time_scale = std::isfinite(ranges.time_range) && ranges.time_range > 0.0
                          ? ranges.time_range
                          : 1e6;
  switch (config.method) {
    case FitConfig::Method::kVecchiaEuclid:
      sel.neighbors = euclidean_neighbors(data, config.m_v, space_scale, time_scale);
      break;
    case FitConfig::Method::kVecchiaCorr:
      sel.neighbors = correlation_neighbors(data, kernel, config.m_v);
      break;
    case FitConfig::Method::kFitcKmeanspp:
      sel.inducing = joint_kmeanspp_inducing(data, config.m, space_scale,
                                             time_scale, config.seed);
      break;
    case FitConfig::Method::kFitcSts:
      sel.inducing = sts_kmeanspp(data, config.m, config.seed);
      break;
    case FitConfig::Method::kVif: {
      sel.inducing = sts_kmeanspp(data, config.m, config.seed);
      const InducingBasis basis(sel.inducing, kernel);
      sel.neighbors = residual_neighbors(data, kernel, basis, config.m_v);
      break;
    }
  }
  return sel;
}

/// One limited-memory BFGS state (two-loop recursion, memory 10).
struct Lbfgs {
  std::deque<std::pair<vec_t, vec_t>> pairs;  // (s, y)
  void reset() { pairs.clear(); }
  void push(const vec_t& s, const vec_t& yv) {
    if (s.dot(yv) > 1e-12 * s.norm() * yv.norm()) {
      pairs.emplace_back(s, yv);
      if (pairs.size() > 10) pairs.pop_front();
    }
  }
  vec_t direction(const vec_t& g) const {
    vec_t q = -g;
    if (pairs.empty()) return q;
    std::vector<double> alphas(pairs.size());
    for (std::size_t idx = pairs.size(); idx-- > 0;) {
      const auto& [s, yv] = pairs[idx];
      const double rho = 1.0 / s.dot(yv);
      alphas[idx] = rho * s.dot(q);
      q -= alphas[idx] * yv;
    }
    const auto& [s_last, y_last] = pairs.back();
    q *= s_last.dot(y_last) / y_last.dot(y_last);
    for (std::size_t idx = 0; idx < pairs.size(); ++idx) {
      const auto& [s, yv] = pairs[idx];
      const double rho = 1.0 / s.dot(yv);
      const double beta_c = rho * yv.dot(q);
      q += (alphas[idx] - beta_c) * s;
    }
    return q;
  }
};

/// Objective wrapper: parameters in, structure built, likelihood out.
class Objective {
 public:
  Objective(const SpaceTimeDataset& data, const FitConfig& config,
            const Transform& transform)
      : data_(&data), config_(&config), transform_(&transform) {}

  void set_selection(const Selection* sel) { sel_ = sel; }
  void set_beta(const vec_t& beta) { beta_ = beta; }
  const vec_t& beta() const { return beta_; }
  void set_warm_mode(const vec_t& mode) { warm_mode_ = mode; }

  double value(const vec_t& z) const {
    const CovarianceParams theta = transform_->theta_of(z, config_->nu);
    if (config_->likelihood == FitConfig::Likelihood::kGaussian) {
      return gaussian_value(theta, z);
    }
    return zcptn_value(theta, z);
  }

  /// Gradient in transformed coordinates; Gaussian analytic, censored model
  /// by central finite differences.
  vec_t gradient(const vec_t& z) const {
    if (config_->likelihood == FitConfig::Likelihood::kGaussian) {
      const CovarianceParams theta = transform_->theta_of(z, config_->nu);
      vec_t g_theta;
      switch (config_->method) {
        case FitConfig::Method::kVecchiaEuclid:
        case FitConfig::Method::kVecchiaCorr: {
          const VecchiaStructure s = build_vecchia(*data_, theta, sel_->neighbors,
                                                   DiagonalPolicy::kObservation);
          g_theta = nll_grad(s, data_->y, data_->X, beta_);
          break;
        }
        case FitConfig::Method::kFitcKmeanspp:
        case FitConfig::Method::kFitcSts: {
          const FitcStructure s = build_fitc(*data_, theta, sel_->inducing);
          g_theta = nll_grad(s, data_->y, data_->X, beta_);
          break;
        }
        case FitConfig::Method::kVif: {
          const VifStructure s = build_vif(*data_, theta, sel_->inducing,
                                           sel_->neighbors,
                                           DiagonalPolicy::kObservation);
          g_theta = nll_grad(s, data_->y, data_->X, beta_);
          break;
        }
      }
      return g_theta.cwiseProduct(transform_->dtheta_dz(z));
    }
    // central differences on the transformed scale
    vec_t g(z.size());
    const double h = 1e-5;
    for (Eigen::Index k = 0; k < z.size(); ++k) {
      vec_t zp = z, zm = z;
      zp[k] += h;
      zm[k] -= h;
      g[k] = (value(zp) - value(zm)) / (2.0 * h);
    }
    return g;
  }

  vec_t profile_beta(const vec_t& z) const {
    if (data_->p() == 0) return vec_t();
    const CovarianceParams theta = transform_->theta_of(z, config_->nu);
    if (config_->likelihood != FitConfig::Likelihood::kGaussian) {
      return beta_;  // censored model optimizes beta in the parameter vector
    }
    switch (config_->method) {
      case FitConfig::Method::kVecchiaEuclid:
      case FitConfig::Method::kVecchiaCorr: {
        const VecchiaStructure s = build_vecchia(*data_, theta, sel_->neighbors,
                                                 DiagonalPolicy::kObservation);
        return gls_beta(s, data_->y, data_->X);
      }
      case FitConfig::Method::kFitcKmeanspp:
      case FitConfig::Method::kFitcSts: {
        const FitcStructure s = build_fitc(*data_, theta, sel_->inducing);
        return gls_beta(s, data_->y, data_->X);
      }
      case FitConfig::Method::kVif: {
        const VifStructure s = build_vif(*data_, theta, sel_->inducing,
                                         sel_->neighbors,
                                         DiagonalPolicy::kObservation);
        return gls_beta(s, data_->y, data_->X);
      }
    }
    return vec_t();
  }

  LaplaceState last_laplace_state() const { return last_state_; }

 private:
  double gaussian_value(const CovarianceParams& theta, const vec_t&) const {
    switch (config_->method) {
      case FitConfig::Method::kVecchiaEuclid:
      case FitConfig::Method::kVecchiaCorr: {
        const VecchiaStructure s = build_vecchia(*data_, theta, sel_->neighbors,
                                                 DiagonalPolicy::kObservation);
        return nll(s, data_->y, data_->X, beta_);
      }
      case FitConfig::Method::kFitcKmeanspp:
      case FitConfig::Method::kFitcSts: {
        const FitcStructure s = build_fitc(*data_, theta, sel_->inducing);
        return nll(s, data_->y, data_->X, beta_);
      }
      case FitConfig::Method::kVif: {
        const VifStructure s = build_vif(*data_, theta, sel_->inducing,
                                         sel_->neighbors,
                                         DiagonalPolicy::kObservation);
        return nll(s, data_->y, data_->X, beta_);
      }
    }
    return 0.0;
  }

  double zcptn_value(const CovarianceParams& theta, const vec_t& z) const {
    const LikelihoodParams lik = transform_->lik_of(z);
    std::unique_ptr<LaplaceAlgebra> algebra;
    VecchiaStructure vs;
    FitcStructure fs;
    VifStructure vifs;
    switch (config_->method) {
      case FitConfig::Method::kVecchiaEuclid:
      case FitConfig::Method::kVecchiaCorr:
        vs = build_vecchia(*data_, theta, sel_->neighbors, DiagonalPolicy::kLatent);
        algebra = make_laplace_algebra(vs);
        break;
      case FitConfig::Method::kFitcKmeanspp:
      case FitConfig::Method::kFitcSts:
        fs = build_fitc(*data_, theta, sel_->inducing);
        algebra = make_laplace_algebra(fs);
        break;
      case FitConfig::Method::kVif:
        vifs = build_vif(*data_, theta, sel_->inducing, sel_->neighbors,
                         DiagonalPolicy::kLatent);
        algebra = make_laplace_algebra(vifs);
        break;
    }
    auto [nll_value, state] = laplace_marginal(
        *algebra, data_->y, data_->X, beta_, lik,
        warm_mode_.size() == data_->n() ? &warm_mode_ : nullptr);
    warm_mode_ = state.mode;
    last_state_ = state;
    return nll_value;
  }

  const SpaceTimeDataset* data_;
  const FitConfig* config_;
  const Transform* transform_;
  const Selection* sel_ = nullptr;
  vec_t beta_;
  mutable vec_t warm_mode_;
  mutable LaplaceState last_state_;
};

}  // namespace

FittedModel fit(const SpaceTimeDataset& data, const FitConfig& config,
                const std::optional<CovarianceParams>& init) {
  config.validate();
  FittedModel model;
  model.config = config;
  model.data = order_observations(data, config.seed);
  const SpaceTimeDataset& ordered = model.data;

  Transform transform;
  transform.gaussian = config.likelihood == FitConfig::Likelihood::kGaussian;

  CovarianceParams theta0 = init.has_value() ? *init : default_init(ordered, config);
  theta0.nu = config.nu;  // nu is fixed per fit
  if (!transform.gaussian) theta0.sigma2 = 0.0;
  std::optional<LikelihoodParams> lik0;
  if (!transform.gaussian) {
    const double sd = std::sqrt(
        (ordered.y.array() - ordered.y.mean()).square().sum() /
        std::max(1, ordered.n() - 1));
    lik0 = LikelihoodParams(std::max(0.5 * sd, 1e-3), 1.0);
  }
  vec_t z = transform.to_z(theta0, lik0);

  Objective objective(ordered, config, transform);
  // starting coefficients by ordinary least squares
  vec_t beta;
  if (ordered.p() > 0) {
    Eigen::LDLT<den_mat_t> ldlt(ordered.X.transpose() * ordered.X);
    beta = ldlt.solve(ordered.X.transpose() * ordered.y);
  }
  objective.set_beta(beta);
  if (!transform.gaussian && ordered.p() > 0) {
    // coefficients join the optimization vector for the censored model
    vec_t z_ext(z.size() + beta.size());
    z_ext.head(z.size()) = z;
    z_ext.tail(beta.size()) = beta;
    z = z_ext;
  }
  const Eigen::Index n_hyper =
      transform.n_kernel() + (transform.gaussian ? 0 : 2);
  auto split_z = [&](const vec_t& zz) {
    if (!transform.gaussian && ordered.p() > 0) {
      objective.set_beta(zz.tail(zz.size() - n_hyper));
      return vec_t(zz.head(n_hyper));
    }
    return zz;
  };

  Selection selection;
  Lbfgs lbfgs;
  double f = std::numeric_limits<double>::quiet_NaN();
  vec_t g;
  bool have_eval = false;
  bool done = false;
  int terminal_refreshes = 0;

  auto evaluate = [&](const vec_t& zz) {
    const vec_t zh = split_z(zz);
    return objective.value(zh);
  };
  auto evaluate_grad = [&](const vec_t& zz) {
    const vec_t zh = split_z(zz);
    vec_t gh = objective.gradient(zh);
    if (!transform.gaussian && ordered.p() > 0) {
      // finite differences over the coefficients
      vec_t full(zz.size());
      full.head(n_hyper) = gh;
      const double h = 1e-5;
      for (Eigen::Index k = n_hyper; k < zz.size(); ++k) {
        vec_t zp = zz, zm = zz;
        zp[k] += h;
        zm[k] -= h;
        full[k] = (evaluate(zp) - evaluate(zm)) / (2.0 * h);
      }
      return full;
    }
    return gh;
  };

  for (int iter = 1; iter <= config.max_iterations && !done; ++iter) {
    bool refreshed = false;
    if (refresh_schedule(iter) || !have_eval) {
      const CovarianceParams theta_now =
          transform.theta_of(split_z(z).head(transform.n_kernel()), config.nu);
      selection = build_selection(ordered, config, theta_now);
      objective.set_selection(&selection);
      refreshed = refresh_schedule(iter);
      const double f_new = evaluate(z);
      if (have_eval && std::abs(f_new - f) >
                           config.tol_objective * std::max(1.0, std::abs(f))) {
        lbfgs.reset();
      }
      f = f_new;
      g = evaluate_grad(z);
      have_eval = true;
    }
    // profile the GLS coefficients under the current covariance
    if (transform.gaussian && ordered.p() > 0) {
      const vec_t beta_new = objective.profile_beta(split_z(z));
      objective.set_beta(beta_new);
      f = evaluate(z);
      g = evaluate_grad(z);
    }
    const double grad_norm = g.lpNorm<Eigen::Infinity>();
    model.trace.push_back({iter, f, grad_norm, refreshed});

    // convergence: small relative objective change over the last step AND a
    // small transformed gradient
    const bool grad_ok = grad_norm < config.tol_gradient;
    const bool obj_ok =
        model.trace.size() >= 2 &&
        std::abs(model.trace[model.trace.size() - 2].nll - f) <
            config.tol_objective * std::max(1.0, std::abs(f));
    if (grad_ok && obj_ok) {
      // terminal refresh; resume only if it moved the likelihood
      const CovarianceParams theta_now =
          transform.theta_of(split_z(z).head(transform.n_kernel()), config.nu);
      Selection refreshed_sel = build_selection(ordered, config, theta_now);
      objective.set_selection(&refreshed_sel);
      const double f_ref = evaluate(z);
      if (std::abs(f_ref - f) <=
              config.tol_objective * std::max(1.0, std::abs(f)) ||
          terminal_refreshes >= 3) {
        selection = std::move(refreshed_sel);
        objective.set_selection(&selection);
        f = f_ref;
        model.trace.push_back({iter, f, grad_norm, true});
        model.converged = true;
        done = true;
        break;
      }
      selection = std::move(refreshed_sel);
      objective.set_selection(&selection);
      f = f_ref;
      g = evaluate_grad(z);
      lbfgs.reset();
      ++terminal_refreshes;
      model.trace.push_back({iter, f, grad_norm, true});
      continue;
    }

    // L-BFGS step with backtracking line search
    vec_t d = lbfgs.direction(g);
    if (d.dot(g) >= 0.0) d = -g;  // safeguard to a descent direction
    double step = 1.0;
    const double slope = g.dot(d);
    bool accepted = false;
    vec_t z_new, g_new;
    double f_new = f;
    for (int half = 0; half < 40; ++half) {
      z_new = z + step * d;
      double f_try;
      try {
        f_try = evaluate(z_new);
      } catch (const NumericError&) {
        step *= 0.5;
        continue;
      }
      if (std::isfinite(f_try) && f_try <= f + 1e-4 * step * slope) {
        f_new = f_try;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // cannot improve along this direction; treat as converged if the
      // gradient is small, otherwise reset the memory and try steepest descent
      if (grad_norm < config.tol_gradient * 10.0) {
        model.converged = true;
      }
      break;
    }
    g_new = evaluate_grad(z_new);
    lbfgs.push(z_new - z, g_new - g);
    z = z_new;
    f = f_new;
    g = g_new;
  }

  const vec_t zh = split_z(z);
  model.theta = transform.theta_of(zh.head(transform.n_kernel()), config.nu);
  if (!transform.gaussian) model.lik = transform.lik_of(zh);
  model.beta = objective.beta();
  model.final_nll = f;
  model.neighbors = selection.neighbors;
  model.inducing = selection.inducing;
  if (!transform.gaussian) {
    // leave a converged Laplace state at the final parameters
    evaluate(z);
    model.laplace = objective.last_laplace_state();
  }
  if (!std::isfinite(f)) {
    throw NumericError("fit: objective is not finite at the final iterate");
  }
  return model;
}

FittedModel model_at_params(const SpaceTimeDataset& data, const FitConfig& config,
                            const CovarianceParams& theta,
                            const std::optional<LikelihoodParams>& lik,
                            const vec_t& beta) {
  config.validate();
  FittedModel model;
  model.config = config;
  model.data = order_observations(data, config.seed);
  model.theta = theta;
  model.theta.validate();
  model.lik = lik;
  model.beta = beta;
  model.converged = true;
  const Selection sel = build_selection(model.data, config, model.theta);
  model.neighbors = sel.neighbors;
  model.inducing = sel.inducing;
  if (config.likelihood == FitConfig::Likelihood::kZcptn) {
    if (!lik.has_value()) {
      throw ConfigError("model_at_params: censored model needs sigma and lambda");
    }
    VecchiaStructure vs;
    FitcStructure fs;
    VifStructure vifs;
    std::unique_ptr<LaplaceAlgebra> algebra;
    switch (config.method) {
      case FitConfig::Method::kVecchiaEuclid:
      case FitConfig::Method::kVecchiaCorr:
        vs = build_vecchia(model.data, model.theta, model.neighbors,
                           DiagonalPolicy::kLatent);
        algebra = make_laplace_algebra(vs);
        break;
      case FitConfig::Method::kFitcKmeanspp:
      case FitConfig::Method::kFitcSts:
        fs = build_fitc(model.data, model.theta, model.inducing);
        algebra = make_laplace_algebra(fs);
        break;
      case FitConfig::Method::kVif:
        vifs = build_vif(model.data, model.theta, model.inducing, model.neighbors,
                         DiagonalPolicy::kLatent);
        algebra = make_laplace_algebra(vifs);
        break;
    }
    auto [value, state] =
        laplace_marginal(*algebra, model.data.y, model.data.X, model.beta, *lik);
    model.final_nll = value;
    model.laplace = state;
  }
  return model;
}

PredictiveDistribution predict_model(const FittedModel& model,
                                     const std::vector<SpaceTimePoint>& targets,
                                     const den_mat_t& X_p, int n_samples,
                                     std::uint64_t seed) {
  const FitConfig& config = model.config;
  const int pred_m_v = config.effective_pred_neighbors();
  if (config.likelihood == FitConfig::Likelihood::kGaussian) {
    switch (config.method) {
      case FitConfig::Method::kVecchiaEuclid:
      case FitConfig::Method::kVecchiaCorr: {
        const VecchiaStructure s = build_vecchia(
            model.data, model.theta, model.neighbors, DiagonalPolicy::kObservation);
        return predict(s, model.data.y, model.data.X, model.beta, targets, X_p,
                       pred_m_v);
      }
      case FitConfig::Method::kFitcKmeanspp:
      case FitConfig::Method::kFitcSts: {
        const FitcStructure s = build_fitc(model.data, model.theta, model.inducing);
        return predict(s, model.data.y, model.data.X, model.beta, targets, X_p);
      }
      case FitConfig::Method::kVif: {
        const VifStructure s =
            build_vif(model.data, model.theta, model.inducing, model.neighbors,
                      DiagonalPolicy::kObservation);
        return predict(s, model.data.y, model.data.X, model.beta, targets, X_p,
                       pred_m_v);
      }
    }
    throw ConfigError("predict_model: unknown method");
  }

  if (!model.lik.has_value() || !model.laplace.has_value()) {
    throw ConfigError("predict_model: censored model state missing");
  }
  VecchiaStructure vs;
  FitcStructure fs;
  VifStructure vifs;
  std::unique_ptr<LaplaceAlgebra> algebra;
  switch (config.method) {
    case FitConfig::Method::kVecchiaEuclid:
    case FitConfig::Method::kVecchiaCorr:
      vs = build_vecchia(model.data, model.theta, model.neighbors,
                         DiagonalPolicy::kLatent);
      algebra = make_laplace_algebra(vs);
      break;
    case FitConfig::Method::kFitcKmeanspp:
    case FitConfig::Method::kFitcSts:
      fs = build_fitc(model.data, model.theta, model.inducing);
      algebra = make_laplace_algebra(fs);
      break;
    case FitConfig::Method::kVif:
      vifs = build_vif(model.data, model.theta, model.inducing, model.neighbors,
                       DiagonalPolicy::kLatent);
      algebra = make_laplace_algebra(vifs);
      break;
  }
  const ZcptnPrediction zp =
      zcptn_predict(*model.laplace, *algebra, targets, X_p, model.beta,
                    *model.lik, pred_m_v, n_samples, seed);
  PredictiveDistribution out;
  out.mu = zp.amount_mean;
  out.var = zp.var_latent;  // latent variance; the full distribution is sampled
  out.mu_latent = zp.mu_latent;
  out.var_latent = zp.var_latent;
  out.p_rain = zp.p_rain;
  out.amount_samples = zp.samples;
  out.lik = model.lik;
  return out;
}

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace,
                     const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open trace file: " + path);
  os.precision(12);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "iter,nll,grad_norm,refresh\n";
  for (const auto& row : trace) {
    os << row.iteration << "," << row.nll << "," << row.grad_norm << ","
       << (row.refresh ? 1 : 0) << "\n";
  }
}

}  // namespace stgp
