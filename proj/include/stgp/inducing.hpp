/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_INDUCING_HPP
#define STGP_INDUCING_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "stgp/covariance.hpp"
#include "stgp/dataset.hpp"
#include "stgp/types.hpp"

namespace stgp {

/// A set of inducing (knot) locations in space-time.
struct InducingSet {
  enum class Provenance { kJointKmeanspp, kStsKmeanspp };
  std::vector<SpaceTimePoint> points;
  Provenance provenance = Provenance::kJointKmeanspp;
  int m_s = 0;  // spatial center count (sts variant)
  int m_t = 0;  // temporal center count (sts variant)

  int size() const { return static_cast<int>(points.size()); }
};

/// kMeans++ seeding followed by Lloyd refinement (relative inertia change
/// below 1e-6 or 50 sweeps). Rows of `points` are observations.
den_mat_t kmeanspp(const den_mat_t& points, int k, std::uint64_t seed);

/// Joint kMeans++ in scaled coordinates (s / space_scale, t / time_scale).
InducingSet joint_kmeanspp_inducing(const SpaceTimeDataset& data, int m,
                                    double space_scale, double time_scale,
                                    std::uint64_t seed);

/// Space-time separated kMeans++: independent center sets over unique times
/// and unique locations, combined as a Cartesian product of size m_s * m_t.
InducingSet sts_kmeanspp(const SpaceTimeDataset& data, int m, std::uint64_t seed);

void write_inducing_csv(const std::string& path, const InducingSet& set,
                        const std::string& header_comment = "");
InducingSet read_inducing_csv(const std::string& path);

/// Inducing points together with the Cholesky factor of their (jittered)
/// covariance. The whitened cross-covariance w(p) = L^{-1} k_m(p) turns
/// residual covariances into plain dot products: rho_r(p,q) = k(p,q) - w(p)'w(q).
class InducingBasis {
 public:
  InducingBasis() = default;
  InducingBasis(const InducingSet& set, const GneitingKernel& kernel);

  bool empty() const { return points_.empty(); }
  int m() const { return static_cast<int>(points_.size()); }
  const std::vector<SpaceTimePoint>& points() const { return points_; }

  vec_t cross_cov(const GneitingKernel& kernel, const SpaceTimePoint& p) const;
  vec_t whitened_cross_cov(const GneitingKernel& kernel,
                           const SpaceTimePoint& p) const;
  /// Solves L w = k for a precomputed cross-covariance column.
  vec_t whiten(const vec_t& k_m) const;

  const den_mat_t& cov() const { return sigma_m_; }
  const Eigen::LLT<den_mat_t>& llt() const { return llt_; }
  double log_det() const;

 private:
  std::vector<SpaceTimePoint> points_;
  den_mat_t sigma_m_;  // jittered inducing covariance
  Eigen::LLT<den_mat_t> llt_;
};

}  // namespace stgp

#endif  // STGP_INDUCING_HPP
