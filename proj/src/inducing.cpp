/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/inducing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

namespace stgp {

namespace {

int count_distinct_rows(const den_mat_t& points) {
  std::set<std::vector<double>> seen;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    std::vector<double> row(points.cols());
    for (Eigen::Index j = 0; j < points.cols(); ++j) row[static_cast<std::size_t>(j)] = points(i, j);
    seen.insert(std::move(row));
  }
  return static_cast<int>(seen.size());
}

Eigen::Index weighted_pick(const vec_t& weights, std::mt19937_64& rng) {
  const double total = weights.sum();
  std::uniform_real_distribution<double> unif(0.0, total);
  const double u = unif(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u <= acc) return i;
  }
  return weights.size() - 1;
}

}  // namespace

den_mat_t kmeanspp(const den_mat_t& points, int k, std::uint64_t seed) {
  const Eigen::Index n = points.rows();
  if (n == 0) throw DataError("kmeanspp: no points");
  if (k < 1) throw ConfigError("kmeanspp: k must be >= 1");
  if (k > count_distinct_rows(points)) {
    throw DataError("kmeanspp: k exceeds the number of distinct points");
  }

  std::mt19937_64 rng(mix_seed(seed, 0x6d70));
  den_mat_t centers(k, points.cols());
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  centers.row(0) = points.row(first(rng));
  vec_t dist2 = (points.rowwise() - centers.row(0)).rowwise().squaredNorm();
  for (int j = 1; j < k; ++j) {
    centers.row(j) = points.row(weighted_pick(dist2, rng));
    dist2 = dist2.cwiseMin(
        (points.rowwise() - centers.row(j)).rowwise().squaredNorm());
  }

  // Lloyd refinement
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  double prev_inertia = std::numeric_limits<double>::infinity();
  for (int sweep = 0; sweep < 50; ++sweep) {
    double inertia = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      int best_j = 0;
      for (int j = 0; j < k; ++j) {
        const double d = (points.row(i) - centers.row(j)).squaredNorm();
        if (d < best) {
          best = d;
          best_j = j;
        }
      }
      assign[static_cast<std::size_t>(i)] = best_j;
      inertia += best;
    }
    den_mat_t sums = den_mat_t::Zero(k, points.cols());
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) {
        centers.row(j) = sums.row(j) / counts[static_cast<std::size_t>(j)];
      } else {
        // reseed an empty cluster at the point farthest from its center
        Eigen::Index far = 0;
        double far_d = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          const double d =
              (points.row(i) - centers.row(assign[static_cast<std::size_t>(i)]))
                  .squaredNorm();
          if (d > far_d) {
            far_d = d;
            far = i;
          }
        }
        centers.row(j) = points.row(far);
      }
    }
    if (inertia == 0.0 ||
        std::abs(prev_inertia - inertia) < 1e-6 * std::max(inertia, 1e-300)) {
      break;
    }
    prev_inertia = inertia;
  }
  return centers;
}

InducingSet joint_kmeanspp_inducing(const SpaceTimeDataset& data, int m,
                                    double space_scale, double time_scale,
                                    std::uint64_t seed) {
  if (!(space_scale > 0.0) || !(time_scale > 0.0)) {
    throw ConfigError("joint_kmeanspp_inducing: scales must be positive");
  }
  const int n = data.n();
  den_mat_t scaled(n, 3);
  for (int i = 0; i < n; ++i) {
    const auto& pt = data.points[static_cast<std::size_t>(i)];
    scaled(i, 0) = pt.x / space_scale;
    scaled(i, 1) = pt.y / space_scale;
    scaled(i, 2) = pt.t / time_scale;
  }
  const int k = std::min(m, count_distinct_rows(scaled));
  den_mat_t centers = kmeanspp(scaled, k, seed);
  InducingSet out;
  out.provenance = InducingSet::Provenance::kJointKmeanspp;
  out.points.reserve(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    out.points.emplace_back(centers(j, 0) * space_scale,
                            centers(j, 1) * space_scale,
                            centers(j, 2) * time_scale);
  }
  return out;
}

InducingSet sts_kmeanspp(const SpaceTimeDataset& data, int m, std::uint64_t seed) {
  if (m < 1) throw ConfigError("sts_kmeanspp: m must be >= 1");
  const int n = data.n();

  std::set<double> time_set;
  std::set<std::pair<double, double>> space_set;
  for (const auto& pt : data.points) {
    time_set.insert(pt.t);
    space_set.insert({pt.x, pt.y});
  }
  den_mat_t times(static_cast<Eigen::Index>(time_set.size()), 1);
  {
    Eigen::Index i = 0;
    for (double t : time_set) times(i++, 0) = t;
  }
  den_mat_t locs(static_cast<Eigen::Index>(space_set.size()), 2);
  {
    Eigen::Index i = 0;
    for (const auto& s : space_set) {
      locs(i, 0) = s.first;
      locs(i, 1) = s.second;
      ++i;
    }
  }
  const double n_times = static_cast<double>(times.rows());
  int m_s = static_cast<int>(
      std::lround(std::sqrt(static_cast<double>(m) * n / (n_times * n_times))));
  int m_t = static_cast<int>(
      std::lround(std::sqrt(static_cast<double>(m) * n_times * n_times / n)));
  // clamped to the available unique counts and to the request itself, so the
  // minimal request m = 1 yields a single center pair
  m_s = std::clamp(m_s, 1, std::min(static_cast<int>(locs.rows()), m));
  m_t = std::clamp(m_t, 1, std::min(static_cast<int>(times.rows()), m));

  const den_mat_t space_centers = kmeanspp(locs, m_s, mix_seed(seed, 1));
  const den_mat_t time_centers = kmeanspp(times, m_t, mix_seed(seed, 2));

  InducingSet out;
  out.provenance = InducingSet::Provenance::kStsKmeanspp;
  out.m_s = m_s;
  out.m_t = m_t;
  out.points.reserve(static_cast<std::size_t>(m_s) * static_cast<std::size_t>(m_t));
  for (int js = 0; js < m_s; ++js) {
    for (int jt = 0; jt < m_t; ++jt) {
      out.points.emplace_back(space_centers(js, 0), space_centers(js, 1),
                              time_centers(jt, 0));
    }
  }
  return out;
}

void write_inducing_csv(const std::string& path, const InducingSet& set,
                        const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open inducing-point file for writing: " + path);
  os.precision(17);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "x,y,t\n";
  for (const auto& pt : set.points) {
    os << pt.x << "," << pt.y << "," << pt.t << "\n";
  }
}

InducingSet read_inducing_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open inducing-point file: " + path);
  std::string line;
  bool saw_header = false;
  InducingSet out;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!saw_header) {
      saw_header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string fx, fy, ft;
    if (!std::getline(ss, fx, ',') || !std::getline(ss, fy, ',') ||
        !std::getline(ss, ft, ',')) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected x,y,t");
    }
    try {
      out.points.emplace_back(std::stod(fx), std::stod(fy), std::stod(ft));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad numeric value");
    }
  }
  if (out.points.empty()) throw DataError(path + ": no inducing points");
  return out;
}

InducingBasis::InducingBasis(const InducingSet& set, const GneitingKernel& kernel)
    : points_(set.points) {
  const int m = static_cast<int>(points_.size());
  if (m == 0) return;
  sigma_m_.resize(m, m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j <= i; ++j) {
      const double v = kernel(points_[static_cast<std::size_t>(i)],
                              points_[static_cast<std::size_t>(j)]);
      sigma_m_(i, j) = v;
      sigma_m_(j, i) = v;
    }
  }
  const double jitter = 1e-8 * kernel.params().sigma1_2;
  den_mat_t jittered = sigma_m_;
  jittered.diagonal().array() += jitter;
  llt_.compute(jittered);
  if (llt_.info() != Eigen::Success) {
    jittered.diagonal().array() += 9.0 * jitter;  // one retry at 10x
    llt_.compute(jittered);
    if (llt_.info() != Eigen::Success) {
      throw NumericError("InducingBasis: inducing covariance is not positive definite");
    }
  }
  sigma_m_ = jittered;
}

vec_t InducingBasis::cross_cov(const GneitingKernel& kernel,
                               const SpaceTimePoint& p) const {
  vec_t k(m());
  for (int j = 0; j < m(); ++j) {
    k[j] = kernel(points_[static_cast<std::size_t>(j)], p);
  }
  return k;
}

vec_t InducingBasis::whitened_cross_cov(const GneitingKernel& kernel,
                                        const SpaceTimePoint& p) const {
  return whiten(cross_cov(kernel, p));
}

vec_t InducingBasis::whiten(const vec_t& k_m) const {
  return llt_.matrixL().solve(k_m);
}

double InducingBasis::log_det() const {
  return 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
}

}  // namespace stgp
