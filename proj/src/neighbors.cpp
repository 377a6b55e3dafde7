/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/neighbors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace stgp {

namespace {

double checked_metric_value(double d) {
  if (std::isnan(d)) throw NumericError("neighbor metric returned NaN");
  if (d > 1.0) {
    if (d > 1.0 + 1e-9) throw NumericError("neighbor metric exceeded 1");
    d = 1.0;
  }
  return std::max(d, 0.0);
}

}  // namespace

DcMetric::DcMetric(const SpaceTimeDataset& data, const GneitingKernel& kernel)
    : points_(&data.points), kernel_(&kernel) {}

double DcMetric::operator()(int i, int j) const {
  const double rho =
      (*kernel_)((*points_)[static_cast<std::size_t>(i)],
                 (*points_)[static_cast<std::size_t>(j)]) /
      kernel_->params().sigma1_2;
  return std::sqrt(std::max(1.0 - std::abs(rho), 0.0));
}

double DcMetric::to_point(const SpaceTimePoint& q, int j) const {
  const double rho = (*kernel_)(q, (*points_)[static_cast<std::size_t>(j)]) /
                     kernel_->params().sigma1_2;
  return std::sqrt(std::max(1.0 - std::abs(rho), 0.0));
}

DrMetric::DrMetric(const SpaceTimeDataset& data, const GneitingKernel& kernel,
                   const InducingBasis& basis)
    : points_(&data.points), kernel_(&kernel), basis_(&basis) {
  const int n = data.n();
  const int m = basis.m();
  w_.resize(m, n);
  resid_diag_.resize(n);
  degenerate_.assign(static_cast<std::size_t>(n), 0);
  const double sigma1_2 = kernel.params().sigma1_2;
  const double tol = 1e-7 * sigma1_2;
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    if (m > 0) {
      w_.col(i) = basis.whitened_cross_cov(kernel, data.points[static_cast<std::size_t>(i)]);
      resid_diag_[i] = sigma1_2 - w_.col(i).squaredNorm();
    } else {
      resid_diag_[i] = sigma1_2;
    }
    if (resid_diag_[i] <= tol) degenerate_[static_cast<std::size_t>(i)] = 1;
  }
}

double DrMetric::operator()(int i, int j) const {
  if (degenerate_[static_cast<std::size_t>(i)] ||
      degenerate_[static_cast<std::size_t>(j)]) {
    return 1.0;
  }
  double rho = (*kernel_)((*points_)[static_cast<std::size_t>(i)],
                          (*points_)[static_cast<std::size_t>(j)]);
  if (basis_->m() > 0) rho -= w_.col(i).dot(w_.col(j));
  const double rad = 1.0 - std::abs(rho) / std::sqrt(resid_diag_[i] * resid_diag_[j]);
  return std::sqrt(std::max(rad, 0.0));
}

CoverTree build_cover_tree(const SpaceTimeDataset& data, const PointMetric& metric) {
  const int n = data.n();
  if (metric.size() != n) {
    throw ConfigError("build_cover_tree: metric and dataset sizes differ");
  }
  CoverTree tree;
  tree.metric = &metric;
  tree.nodes.reserve(static_cast<std::size_t>(n));
  tree.nodes.push_back({0, 1, {}});
  tree.depth = 1;
  if (n == 1) return tree;

  struct Item {
    int node;
    std::vector<int> covered;  // ascending dataset indices
  };
  std::vector<Item> frontier;
  {
    std::vector<int> all(static_cast<std::size_t>(n - 1));
    for (int i = 1; i < n; ++i) all[static_cast<std::size_t>(i - 1)] = i;
    frontier.push_back({0, std::move(all)});
  }

  int level = 1;
  std::vector<int> kept, covered_new;
  while (!frontier.empty()) {
    const double radius = std::ldexp(1.0, -level);  // R_l = 1/2^l
    const bool at_cap = (level + 1) >= CoverTree::kMaxDepth;
    std::vector<Item> next;
    for (auto& item : frontier) {
      std::vector<int>& covered = item.covered;
      while (!covered.empty()) {
        const int j = covered.front();
        const int child_id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({j, level + 1, {}});
        tree.nodes[static_cast<std::size_t>(item.node)].children.push_back(child_id);
        tree.depth = std::max(tree.depth, level + 1);
        kept.clear();
        covered_new.clear();
        for (std::size_t k = 1; k < covered.size(); ++k) {
          const int c = covered[k];
          const double d = checked_metric_value(metric(j, c));
          (d <= radius ? covered_new : kept).push_back(c);
        }
        covered.swap(kept);
        if (covered_new.empty()) continue;
        if (at_cap) {
          // depth cap: attach whatever the new node covers as direct leaves
          for (int c : covered_new) {
            const int leaf_id = static_cast<int>(tree.nodes.size());
            tree.nodes.push_back({c, level + 2, {}});
            tree.nodes[static_cast<std::size_t>(child_id)].children.push_back(leaf_id);
            tree.depth = std::max(tree.depth, level + 2);
          }
        } else {
          next.push_back({child_id, covered_new});
        }
      }
    }
    frontier.swap(next);
    ++level;
  }
  return tree;
}

std::vector<int> knn_query(const CoverTree& tree, int i, int m_v,
                           CoverTree::Workspace& ws) {
  const int n_points = tree.metric->size();
  if (i < 0 || i >= n_points) throw ConfigError("knn_query: index out of range");
  if (i == 0 || m_v <= 0) return {};
  const int want = std::min(m_v, i);
  const PointMetric& metric = *tree.metric;

  const std::size_t n_nodes = tree.nodes.size();
  if (ws.stamp.size() < n_nodes) {
    ws.stamp.assign(n_nodes, 0);
    ws.dist.assign(n_nodes, 0.0);
  }
  ++ws.epoch;
  if (ws.epoch == 0) {  // stamp wrap-around
    std::fill(ws.stamp.begin(), ws.stamp.end(), 0);
    ws.epoch = 1;
  }
  auto dist_of = [&](int node) {
    if (ws.stamp[static_cast<std::size_t>(node)] != ws.epoch) {
      ws.stamp[static_cast<std::size_t>(node)] = ws.epoch;
      ws.dist[static_cast<std::size_t>(node)] =
          checked_metric_value(metric(tree.nodes[static_cast<std::size_t>(node)].point, i));
    }
    return ws.dist[static_cast<std::size_t>(node)];
  };

  std::vector<int>& frontier = ws.frontier;
  std::vector<int>& gathered = ws.gathered;
  frontier.clear();
  frontier.push_back(0);
  dist_of(0);
  std::vector<double> cand_d;
  for (int j = 1; j <= tree.depth; ++j) {
    gathered = frontier;
    for (int q : frontier) {
      const auto& node = tree.nodes[static_cast<std::size_t>(q)];
      if (node.level != j) continue;  // children already expanded earlier
      for (int child : node.children) {
        if (tree.nodes[static_cast<std::size_t>(child)].point < i) {
          dist_of(child);
          gathered.push_back(child);
        }
      }
    }
    double dm = 1.0;  // D_{m_v}, 1 when fewer than m_v candidates
    if (static_cast<int>(gathered.size()) >= want) {
      cand_d.resize(gathered.size());
      for (std::size_t k = 0; k < gathered.size(); ++k) {
        cand_d[k] = ws.dist[static_cast<std::size_t>(gathered[k])];
      }
      std::nth_element(cand_d.begin(), cand_d.begin() + (want - 1), cand_d.end());
      dm = cand_d[static_cast<std::size_t>(want - 1)];
    }
    const double tau = dm + std::ldexp(1.0, -(j - 1));
    frontier.clear();
    for (int c : gathered) {
      if (ws.dist[static_cast<std::size_t>(c)] <= tau) frontier.push_back(c);
    }
  }

  // brute force among survivors, ties toward the smaller dataset index
  std::vector<std::pair<double, int>> final_cand;
  final_cand.reserve(frontier.size());
  for (int c : frontier) {
    final_cand.emplace_back(ws.dist[static_cast<std::size_t>(c)],
                            tree.nodes[static_cast<std::size_t>(c)].point);
  }
  std::sort(final_cand.begin(), final_cand.end());
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(want));
  for (int k = 0; k < want && k < static_cast<int>(final_cand.size()); ++k) {
    out.push_back(final_cand[static_cast<std::size_t>(k)].second);
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> knn_query(const CoverTree& tree, int i, int m_v) {
  CoverTree::Workspace ws;
  return knn_query(tree, i, m_v, ws);
}

namespace {

NeighborSets cover_tree_neighbors(const SpaceTimeDataset& data,
                                  const PointMetric& metric, int m_v,
                                  NeighborSets::MetricKind kind) {
  const CoverTree tree = build_cover_tree(data, metric);
  const int n = data.n();
  NeighborSets out;
  out.metric_kind = kind;
  out.m_v = m_v;
  out.sets.resize(static_cast<std::size_t>(n));
#pragma omp parallel
  {
    CoverTree::Workspace ws;
#pragma omp for schedule(dynamic, 64)
    for (int i = 0; i < n; ++i) {
      out.sets[static_cast<std::size_t>(i)] = knn_query(tree, i, m_v, ws);
    }
  }
  return out;
}

}  // namespace

NeighborSets euclidean_neighbors(const SpaceTimeDataset& data, int m_v,
                                 double space_scale, double time_scale) {
  if (!(space_scale > 0.0) || !(time_scale > 0.0)) {
    throw ConfigError("euclidean_neighbors: scales must be positive");
  }
  const int n = data.n();
  for (int i = 1; i < n; ++i) {
    if (data.points[static_cast<std::size_t>(i)].t <
        data.points[static_cast<std::size_t>(i - 1)].t) {
      throw ConfigError("euclidean_neighbors: dataset must be time-ordered");
    }
  }
  NeighborSets out;
  out.metric_kind = NeighborSets::MetricKind::kEuclideanScaled;
  out.m_v = m_v;
  out.space_scale = space_scale;
  out.time_scale = time_scale;
  out.sets.resize(static_cast<std::size_t>(n));

  den_mat_t scaled(n, 3);
  for (int i = 0; i < n; ++i) {
    const auto& pt = data.points[static_cast<std::size_t>(i)];
    scaled(i, 0) = pt.x / space_scale;
    scaled(i, 1) = pt.y / space_scale;
    scaled(i, 2) = pt.t / time_scale;
  }

#pragma omp parallel for schedule(dynamic, 64)
  for (int i = 1; i < n; ++i) {
    const int want = std::min(m_v, i);
    // max-heap of (squared distance, index); ties prefer the smaller index,
    // so the heap keeps the larger index on top among equals
    std::priority_queue<std::pair<double, int>> heap;
    for (int j = i - 1; j >= 0; --j) {
      const double dt = scaled(i, 2) - scaled(j, 2);
      const double dt2 = dt * dt;
      if (static_cast<int>(heap.size()) == want && dt2 > heap.top().first) {
        break;  // earlier rows only get farther in time
      }
      const double dx = scaled(i, 0) - scaled(j, 0);
      const double dy = scaled(i, 1) - scaled(j, 1);
      const double d2 = dt2 + dx * dx + dy * dy;
      if (static_cast<int>(heap.size()) < want) {
        heap.emplace(d2, j);
      } else if (d2 < heap.top().first ||
                 (d2 == heap.top().first && j < heap.top().second)) {
        heap.pop();
        heap.emplace(d2, j);
      }
    }
    auto& set = out.sets[static_cast<std::size_t>(i)];
    set.resize(heap.size());
    for (std::size_t k = heap.size(); k-- > 0;) {
      set[k] = heap.top().second;
      heap.pop();
    }
    std::sort(set.begin(), set.end());
  }
  return out;
}

NeighborSets correlation_neighbors(const SpaceTimeDataset& data,
                                   const GneitingKernel& kernel, int m_v) {
  const DcMetric metric(data, kernel);
  return cover_tree_neighbors(data, metric, m_v, NeighborSets::MetricKind::kDc);
}

NeighborSets residual_neighbors(const SpaceTimeDataset& data,
                                const GneitingKernel& kernel,
                                const InducingBasis& basis, int m_v) {
  const DrMetric metric(data, kernel, basis);
  return cover_tree_neighbors(data, metric, m_v, NeighborSets::MetricKind::kDr);
}

bool refresh_schedule(int iteration) {
  if (iteration < 1) throw ConfigError("refresh_schedule: iteration must be >= 1");
  return (iteration & (iteration - 1)) == 0;
}

void write_neighbor_debug_csv(const std::string& path, const NeighborSets& sets,
                              const PointMetric& metric,
                              const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open neighbor audit file: " + path);
  os.precision(17);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "i,rank,neighbor_index,distance\n";
  for (int i = 0; i < sets.n(); ++i) {
    const auto& set = sets.sets[static_cast<std::size_t>(i)];
    std::vector<std::pair<double, int>> by_dist;
    by_dist.reserve(set.size());
    for (int j : set) by_dist.emplace_back(metric(i, j), j);
    std::sort(by_dist.begin(), by_dist.end());
    for (std::size_t r = 0; r < by_dist.size(); ++r) {
      os << i << "," << r << "," << by_dist[r].second << "," << by_dist[r].first
         << "\n";
    }
  }
}

}  // namespace stgp
