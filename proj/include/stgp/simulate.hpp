/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_SIMULATE_HPP
#define STGP_SIMULATE_HPP

#include <cstdint>
#include <vector>

#include "stgp/covariance.hpp"
#include "stgp/dataset.hpp"

namespace stgp {

/// Exact dense GP simulation on a fixed station layout: n_locations uniform
/// draws on the domain box, observed at 1..n_times. Replicates share the
/// locations and the factorization, differing only in the field draw.
struct SimSpec {
  int n_locations = 100;
  int n_times = 10;
  double x_min = 0.0, x_max = 1.0;
  double y_min = 0.0, y_max = 1.0;
  CovarianceParams theta;
  int n_replicates = 1;
  std::uint64_t seed = 0;

  int total_points() const { return n_locations * n_times; }
};

inline constexpr int kDenseSimGuard = 20000;

std::vector<SpaceTimeDataset> sample_exact_gp(const SimSpec& spec);

}  // namespace stgp

#endif  // STGP_SIMULATE_HPP
