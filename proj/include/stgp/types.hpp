/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_TYPES_HPP
#define STGP_TYPES_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace stgp {

using den_mat_t = Eigen::MatrixXd;
using vec_t = Eigen::VectorXd;
using sp_mat_t = Eigen::SparseMatrix<double>;
using sp_mat_rm_t = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Bad configuration or arguments (CLI exit code 2).
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Malformed or inconsistent input data (CLI exit code 3).
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Numerical failure such as a factorization breakdown (CLI exit code 4).
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// One observation site: planar coordinates plus a time index.
struct SpaceTimePoint {
  double x = 0.0;
  double y = 0.0;
  double t = 0.0;

  SpaceTimePoint() = default;
  SpaceTimePoint(double x_, double y_, double t_) : x(x_), y(y_), t(t_) {
    if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(t)) {
      throw DataError("SpaceTimePoint: coordinates and time must be finite");
    }
  }

  double spatial_dist(const SpaceTimePoint& o) const {
    const double dx = x - o.x, dy = y - o.y;
    return std::sqrt(dx * dx + dy * dy);
  }
  double time_lag(const SpaceTimePoint& o) const { return std::abs(t - o.t); }

  bool operator==(const SpaceTimePoint& o) const {
    return x == o.x && y == o.y && t == o.t;
  }
};

/// Deterministic 64-bit mix for deriving independent substream seeds.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace stgp

#endif  // STGP_TYPES_HPP
