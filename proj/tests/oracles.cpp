#include "oracles.hpp"

#include <algorithm>
#include <cmath>

namespace stgp::testing {

namespace {

long double matern_oracle(long double x, long double nu) {
  if (x == 0.0L) return 1.0L;
  if (nu == 0.5L) return expl(-x);
  if (nu == 1.5L) return (1.0L + x) * expl(-x);
  if (nu == 2.5L) return (1.0L + x + x * x / 3.0L) * expl(-x);
  const double v = std::pow(2.0, 1.0 - static_cast<double>(nu)) /
                   std::tgamma(static_cast<double>(nu)) *
                   std::pow(static_cast<double>(x), static_cast<double>(nu)) *
                   std::cyl_bessel_k(static_cast<double>(nu), static_cast<double>(x));
  return static_cast<long double>(std::isfinite(v) ? v : 0.0);
}

}  // namespace

long double gneiting_oracle(long double h, long double u,
                            const CovarianceParams& theta) {
  const long double a = theta.a, alpha = theta.alpha, beta = theta.beta,
                    delta = theta.delta, c = theta.c, s1 = theta.sigma1_2;
  const long double T = a * powl(fabsl(u), 2.0L * alpha) + 1.0L;
  const long double E = delta + beta;  // d = 2
  const long double x = c * h / powl(T, beta / 2.0L);
  return s1 * powl(T, -E) * matern_oracle(x, static_cast<long double>(theta.nu));
}

DenseOracle::DenseOracle(const SpaceTimeDataset& data,
                         const CovarianceParams& theta) {
  const int n = data.n();
  sigma_obs.resize(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const auto& a = data.points[static_cast<std::size_t>(i)];
      const auto& b = data.points[static_cast<std::size_t>(j)];
      const double v = static_cast<double>(gneiting_oracle(
          static_cast<long double>(a.spatial_dist(b)),
          static_cast<long double>(a.time_lag(b)), theta));
      sigma_obs(i, j) = v;
      sigma_obs(j, i) = v;
    }
  }
  sigma_obs.diagonal().array() += theta.sigma2;
  llt.compute(sigma_obs);
}

double DenseOracle::nll(const vec_t& y, const den_mat_t& X, const vec_t& beta) const {
  const int n = static_cast<int>(y.size());
  vec_t r = y;
  if (X.cols() > 0 && beta.size() > 0) r -= X * beta;
  const vec_t s = llt.solve(r);
  const double logdet =
      2.0 * llt.matrixLLT().diagonal().array().log().sum();
  return 0.5 * (n * std::log(2.0 * M_PI) + logdet + r.dot(s));
}

vec_t DenseOracle::nll_grad_fd(const SpaceTimeDataset& data,
                               const CovarianceParams& theta, const vec_t& y,
                               const den_mat_t& X, const vec_t& beta,
                               double rel_step) const {
  auto nll_at = [&](const CovarianceParams& th) {
    return DenseOracle(data, th).nll(y, X, beta);
  };
  auto bump = [&](int k, double h) {
    CovarianceParams th = theta;
    double* fields[7] = {&th.sigma2, &th.sigma1_2, &th.a, &th.c,
                         &th.alpha,  &th.beta,     &th.delta};
    *fields[k] += h;
    return th;
  };
  vec_t g(7);
  const double base[7] = {theta.sigma2, theta.sigma1_2, theta.a, theta.c,
                          theta.alpha,  theta.beta,     theta.delta};
  for (int k = 0; k < 7; ++k) {
    const double h = rel_step * std::max(std::abs(base[k]), 1e-3);
    g[k] = (nll_at(bump(k, h)) - nll_at(bump(k, -h))) / (2.0 * h);
  }
  return g;
}

void DenseOracle::predict(const SpaceTimeDataset& data,
                          const CovarianceParams& theta, const vec_t& y,
                          const den_mat_t& X, const vec_t& beta,
                          const std::vector<SpaceTimePoint>& targets,
                          const den_mat_t& X_p, vec_t& mu, vec_t& var) const {
  const int n = data.n();
  const int n_p = static_cast<int>(targets.size());
  vec_t r = y;
  if (X.cols() > 0 && beta.size() > 0) r -= X * beta;
  const vec_t s = llt.solve(r);
  mu.resize(n_p);
  var.resize(n_p);
  for (int p = 0; p < n_p; ++p) {
    vec_t k(n);
    for (int i = 0; i < n; ++i) {
      const auto& a = data.points[static_cast<std::size_t>(i)];
      k[i] = static_cast<double>(gneiting_oracle(
          static_cast<long double>(a.spatial_dist(targets[static_cast<std::size_t>(p)])),
          static_cast<long double>(a.time_lag(targets[static_cast<std::size_t>(p)])),
          theta));
    }
    mu[p] = k.dot(s);
    if (X_p.cols() > 0 && beta.size() > 0) mu[p] += X_p.row(p).dot(beta);
    var[p] = theta.sigma1_2 + theta.sigma2 - k.dot(llt.solve(k));
  }
}

vec_t central_fd(const std::function<double(const vec_t&)>& f, const vec_t& x,
                 double step) {
  vec_t g(x.size());
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    vec_t xp = x, xm = x;
    xp[k] += step;
    xm[k] -= step;
    g[k] = (f(xp) - f(xm)) / (2.0 * step);
  }
  return g;
}

namespace {

double simpson(const std::function<double(double)>& f, double a, double fa,
               double b, double fb, double m, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double adaptive_step(const std::function<double(double)>& f, double a, double fa,
                     double b, double fb, double m, double fm, double whole,
                     double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(f, a, fa, m, fm, lm, flm);
  const double right = simpson(f, m, fm, b, fb, rm, frm);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * tol) {
    return left + right + (left + right - whole) / 15.0;
  }
  return adaptive_step(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1) +
         adaptive_step(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1);
}

}  // namespace

double adaptive_simpson(const std::function<double(double)>& f, double a, double b,
                        double tol, int max_depth) {
  const double m = 0.5 * (a + b);
  const double fa = f(a), fb = f(b), fm = f(m);
  const double whole = simpson(f, a, fa, b, fb, m, fm);
  return adaptive_step(f, a, fa, b, fb, m, fm, whole, tol, max_depth);
}

std::vector<int> brute_force_knn(const std::function<double(int, int)>& metric,
                                 int i, int m_v) {
  std::vector<std::pair<double, int>> cand;
  cand.reserve(static_cast<std::size_t>(i));
  for (int j = 0; j < i; ++j) cand.emplace_back(metric(i, j), j);
  const int want = std::min<int>(m_v, i);
  std::partial_sort(cand.begin(), cand.begin() + want, cand.end());
  std::vector<int> out(static_cast<std::size_t>(want));
  for (int k = 0; k < want; ++k) out[static_cast<std::size_t>(k)] = cand[static_cast<std::size_t>(k)].second;
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace stgp::testing
