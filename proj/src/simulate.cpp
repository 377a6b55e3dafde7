/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/simulate.hpp"

#include <cmath>
#include <random>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stgp {

std::vector<SpaceTimeDataset> sample_exact_gp(const SimSpec& spec) {
  spec.theta.validate();
  if (spec.n_locations < 1 || spec.n_times < 1 || spec.n_replicates < 1) {
    throw ConfigError("sample_exact_gp: counts must be positive");
  }
  if (!(spec.x_max > spec.x_min) || !(spec.y_max > spec.y_min)) {
    throw ConfigError("sample_exact_gp: empty domain box");
  }
  const int n = spec.total_points();
  if (n > kDenseSimGuard) {
    throw ConfigError("sample_exact_gp: dense simulation guarded at 20000 points");
  }

  std::mt19937_64 rng(mix_seed(spec.seed, 0x51));
  std::uniform_real_distribution<double> ux(spec.x_min, spec.x_max);
  std::uniform_real_distribution<double> uy(spec.y_min, spec.y_max);
  std::vector<SpaceTimePoint> pts;
  pts.reserve(static_cast<std::size_t>(n));
  std::vector<std::string> stations;
  stations.reserve(static_cast<std::size_t>(n));
  std::vector<double> sx(static_cast<std::size_t>(spec.n_locations));
  std::vector<double> sy(static_cast<std::size_t>(spec.n_locations));
  for (int s = 0; s < spec.n_locations; ++s) {
    sx[static_cast<std::size_t>(s)] = ux(rng);
    sy[static_cast<std::size_t>(s)] = uy(rng);
  }
  for (int t = 1; t <= spec.n_times; ++t) {
    for (int s = 0; s < spec.n_locations; ++s) {
      pts.emplace_back(sx[static_cast<std::size_t>(s)], sy[static_cast<std::size_t>(s)],
                       static_cast<double>(t));
      stations.push_back("s" + std::to_string(s));
    }
  }

  GneitingKernel kernel(spec.theta);
  kernel.precompute_time_lags(spec.n_times);
  den_mat_t gram(n, n);
#pragma omp parallel for schedule(dynamic, 64)
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double v = kernel(pts[static_cast<std::size_t>(i)], pts[static_cast<std::size_t>(j)]);
      gram(i, j) = v;
      gram(j, i) = v;
    }
  }
  gram.diagonal().array() += spec.theta.sigma2;

  Eigen::LLT<Eigen::Ref<den_mat_t>> llt(gram);  // in place
  if (llt.info() != Eigen::Success) {
    throw NumericError("sample_exact_gp: Gram factorization failed (ill-conditioned)");
  }

  std::vector<SpaceTimeDataset> out;
  out.reserve(static_cast<std::size_t>(spec.n_replicates));
  for (int rep = 0; rep < spec.n_replicates; ++rep) {
    std::mt19937_64 rep_rng(mix_seed(spec.seed, 0x9000 + static_cast<std::uint64_t>(rep)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    vec_t z(n);
    for (int i = 0; i < n; ++i) z[i] = gauss(rep_rng);
    vec_t y = llt.matrixL() * z;
    out.emplace_back(pts, std::move(y), den_mat_t(n, 0), stations);
  }
  return out;
}

}  // namespace stgp
