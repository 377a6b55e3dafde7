/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_NEIGHBORS_HPP
#define STGP_NEIGHBORS_HPP

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "stgp/covariance.hpp"
#include "stgp/dataset.hpp"
#include "stgp/inducing.hpp"
#include "stgp/types.hpp"

namespace stgp {

/// Distance between two rows of one ordered dataset, bounded by 1.
class PointMetric {
 public:
  virtual ~PointMetric() = default;
  virtual double operator()(int i, int j) const = 0;
  virtual int size() const = 0;
};

/// sqrt(1 - |corr|) under the space-time kernel.
class DcMetric final : public PointMetric {
 public:
  DcMetric(const SpaceTimeDataset& data, const GneitingKernel& kernel);
  double operator()(int i, int j) const override;
  double to_point(const SpaceTimePoint& q, int j) const;
  int size() const override { return static_cast<int>(points_->size()); }

 private:
  const std::vector<SpaceTimePoint>* points_;
  const GneitingKernel* kernel_;
};

/// Residual-correlation distance given an inducing basis. Degenerate points
/// (no residual variance left) sit at distance 1 from everything.
class DrMetric final : public PointMetric {
 public:
  DrMetric(const SpaceTimeDataset& data, const GneitingKernel& kernel,
           const InducingBasis& basis);
  double operator()(int i, int j) const override;
  int size() const override { return static_cast<int>(points_->size()); }
  bool degenerate(int i) const { return degenerate_[static_cast<std::size_t>(i)]; }
  const den_mat_t& whitened() const { return w_; }
  const vec_t& residual_diag() const { return resid_diag_; }

 private:
  const std::vector<SpaceTimePoint>* points_;
  const GneitingKernel* kernel_;
  const InducingBasis* basis_;
  den_mat_t w_;         // m x n whitened cross-covariances
  vec_t resid_diag_;    // residual variances
  std::vector<char> degenerate_;
};

/// Cover tree built by sequential insertion in dataset index order. Cover
/// radii shrink as R_l = 1 / 2^l; each node's descendants carry larger
/// dataset indices than the node itself.
struct CoverTree {
  struct Node {
    int point;  // dataset row
    int level;  // 1 at the root
    std::vector<int> children;
  };
  std::vector<Node> nodes;
  int depth = 0;
  const PointMetric* metric = nullptr;

  static constexpr int kMaxDepth = 64;

  /// Scratch space reused across queries (per thread).
  struct Workspace {
    std::vector<double> dist;
    std::vector<std::uint32_t> stamp;
    std::uint32_t epoch = 0;
    std::vector<int> frontier, gathered;
  };
};

CoverTree build_cover_tree(const SpaceTimeDataset& data, const PointMetric& metric);

/// Exact m_v nearest predecessors of row i under the tree's metric; ties are
/// broken toward the smaller index. Result is sorted ascending by index.
std::vector<int> knn_query(const CoverTree& tree, int i, int m_v,
                           CoverTree::Workspace& ws);
std::vector<int> knn_query(const CoverTree& tree, int i, int m_v);

/// Past-only conditioning sets, |N(i)| = min(m_v, i), indices sorted ascending.
struct NeighborSets {
  enum class MetricKind { kEuclideanScaled, kDc, kDr };
  MetricKind metric_kind = MetricKind::kEuclideanScaled;
  int m_v = 0;
  std::vector<std::vector<int>> sets;
  // scales used by the Euclidean variant, kept for prediction-time queries
  double space_scale = 1.0;
  double time_scale = 1.0;

  int n() const { return static_cast<int>(sets.size()); }
};

/// Exact scaled-coordinate kNN among predecessors; exploits the time ordering
/// for an early scan cutoff.
NeighborSets euclidean_neighbors(const SpaceTimeDataset& data, int m_v,
                                 double space_scale, double time_scale);

/// Cover-tree kNN under d_c.
NeighborSets correlation_neighbors(const SpaceTimeDataset& data,
                                   const GneitingKernel& kernel, int m_v);

/// Cover-tree kNN under d_r for the given inducing basis.
NeighborSets residual_neighbors(const SpaceTimeDataset& data,
                                const GneitingKernel& kernel,
                                const InducingBasis& basis, int m_v);

/// True at iterations 1, 2, 4, 8, ... (neighbor/inducing refresh points).
bool refresh_schedule(int iteration);

/// Audit dump: one row per (i, rank) with the neighbor index and distance.
void write_neighbor_debug_csv(const std::string& path, const NeighborSets& sets,
                              const PointMetric& metric,
                              const std::string& header_comment = "");

}  // namespace stgp

#endif  // STGP_NEIGHBORS_HPP
