#include <doctest.h>

#include <chrono>
#include <random>

#include "oracles.hpp"
#include "stgp/neighbors.hpp"

using namespace stgp;

namespace {

SpaceTimeDataset random_ordered(int n, std::uint64_t seed, int n_times = 10) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SpaceTimePoint> pts;
  vec_t y(n);
  for (int i = 0; i < n; ++i) {
    pts.emplace_back(u(rng), u(rng),
                     static_cast<double>(1 + (static_cast<int>(u(rng) * n_times)) % n_times));
    y[i] = u(rng);
  }
  SpaceTimeDataset data(std::move(pts), std::move(y), den_mat_t(n, 0));
  return order_observations(data, seed);
}

CovarianceParams test_params() {
  return CovarianceParams(0.01, 1.0, 0.5, 20.0, 0.4, 1.5, 0.4, 0.2);
}

}  // namespace

TEST_CASE("cover tree base cases") {
  const CovarianceParams theta = test_params();
  SUBCASE("single point") {
    SpaceTimeDataset data({SpaceTimePoint{0.1, 0.1, 1.0}}, vec_t::Ones(1),
                          den_mat_t(1, 0));
    const GneitingKernel kernel(theta);
    const DcMetric metric(data, kernel);
    const CoverTree tree = build_cover_tree(data, metric);
    CHECK(tree.nodes.size() == 1);
    CHECK(tree.nodes[0].point == 0);
    CHECK(knn_query(tree, 0, 5).empty());
  }
  SUBCASE("two identical points insert at depth 1 with distance 0") {
    SpaceTimeDataset data({SpaceTimePoint{0.1, 0.1, 1.0}, SpaceTimePoint{0.1, 0.1, 1.0}},
                          vec_t::Ones(2), den_mat_t(2, 0));
    const GneitingKernel kernel(theta);
    const DcMetric metric(data, kernel);
    const CoverTree tree = build_cover_tree(data, metric);
    REQUIRE(tree.nodes.size() == 2);
    CHECK(tree.nodes[1].level == 2);  // direct child of the root
    CHECK(metric(0, 1) == 0.0);
    const auto nn = knn_query(tree, 1, 3);
    REQUIRE(nn.size() == 1);
    CHECK(nn[0] == 0);
  }
}

TEST_CASE("cover tree covering property holds at every node") {
  const SpaceTimeDataset data = random_ordered(500, 11);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  const DcMetric metric(data, kernel);
  const CoverTree tree = build_cover_tree(data, metric);
  REQUIRE(static_cast<int>(tree.nodes.size()) == data.n());
  // exhaustive audit: children of a level-L node lie within R_{L-1} of it
  for (std::size_t id = 0; id < tree.nodes.size(); ++id) {
    const auto& node = tree.nodes[id];
    const double radius = std::ldexp(1.0, -(node.level - 1));
    for (int child : node.children) {
      const auto& cn = tree.nodes[static_cast<std::size_t>(child)];
      CHECK(cn.level == node.level + 1);
      CHECK(metric(node.point, cn.point) <= radius + 1e-15);
      // descendants always carry larger dataset indices
      CHECK(cn.point > node.point);
    }
  }
}

TEST_CASE("knn_query edge behavior") {
  const SpaceTimeDataset data = random_ordered(40, 13);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  const DcMetric metric(data, kernel);
  const CoverTree tree = build_cover_tree(data, metric);
  CHECK(knn_query(tree, 0, 5).empty());
  for (int i = 1; i <= 5; ++i) {
    const auto nn = knn_query(tree, i, 10);
    REQUIRE(static_cast<int>(nn.size()) == i);  // all predecessors forced
    for (int k = 0; k < i; ++k) CHECK(nn[static_cast<std::size_t>(k)] == k);
  }
  CHECK_THROWS_AS(knn_query(tree, data.n(), 5), ConfigError);
}

TEST_CASE("cover tree knn equals brute force under d_c") {
  const SpaceTimeDataset data = random_ordered(1000, 17);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  const DcMetric metric(data, kernel);
  const CoverTree tree = build_cover_tree(data, metric);
  CoverTree::Workspace ws;
  auto metric_fn = [&](int i, int j) { return metric(i, j); };
  for (int i = 0; i < data.n(); ++i) {
    const auto fast = knn_query(tree, i, 30, ws);
    const auto slow = testing::brute_force_knn(metric_fn, i, 30);
    CHECK(fast == slow);
  }
}

TEST_CASE("cover tree knn equals brute force under d_r") {
  const SpaceTimeDataset data = random_ordered(600, 19);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  InducingSet set;
  {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int j = 0; j < 25; ++j) {
      set.points.emplace_back(u(rng), u(rng), 1.0 + 9.0 * u(rng));
    }
  }
  const InducingBasis basis(set, kernel);
  const DrMetric metric(data, kernel, basis);
  const CoverTree tree = build_cover_tree(data, metric);
  CoverTree::Workspace ws;
  auto metric_fn = [&](int i, int j) { return metric(i, j); };
  for (int i = 0; i < data.n(); ++i) {
    CHECK(knn_query(tree, i, 20, ws) == testing::brute_force_knn(metric_fn, i, 20));
  }
}

TEST_CASE("tree construction is deterministic") {
  const SpaceTimeDataset data = random_ordered(300, 23);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  const DcMetric metric(data, kernel);
  const CoverTree t1 = build_cover_tree(data, metric);
  const CoverTree t2 = build_cover_tree(data, metric);
  REQUIRE(t1.nodes.size() == t2.nodes.size());
  for (std::size_t k = 0; k < t1.nodes.size(); ++k) {
    CHECK(t1.nodes[k].point == t2.nodes[k].point);
    CHECK(t1.nodes[k].level == t2.nodes[k].level);
    CHECK(t1.nodes[k].children == t2.nodes[k].children);
  }
}

TEST_CASE("euclidean neighbors") {
  SUBCASE("collinear points at unit spacing pick the trailing window") {
    const int n = 30;
    std::vector<SpaceTimePoint> pts;
    vec_t y = vec_t::Zero(n);
    for (int i = 0; i < n; ++i) pts.emplace_back(static_cast<double>(i), 0.0, 1.0);
    SpaceTimeDataset data(std::move(pts), std::move(y), den_mat_t(n, 0));
    const NeighborSets sets = euclidean_neighbors(data, 5, 1.0, 1.0);
    for (int i = 6; i < n; ++i) {
      const auto& N = sets.sets[static_cast<std::size_t>(i)];
      REQUIRE(N.size() == 5);
      for (int k = 0; k < 5; ++k) CHECK(N[static_cast<std::size_t>(k)] == i - 5 + k);
    }
  }
  SUBCASE("huge time scale reduces to spatial knn among predecessors") {
    const SpaceTimeDataset data = random_ordered(200, 29);
    const NeighborSets sets = euclidean_neighbors(data, 8, 1.0, 1e12);
    auto metric_fn = [&](int i, int j) {
      const auto& a = data.points[static_cast<std::size_t>(i)];
      const auto& b = data.points[static_cast<std::size_t>(j)];
      return a.spatial_dist(b);
    };
    for (int i = 0; i < data.n(); ++i) {
      CHECK(sets.sets[static_cast<std::size_t>(i)] ==
            testing::brute_force_knn(metric_fn, i, 8));
    }
  }
  SUBCASE("random cloud matches brute force in the scaled metric") {
    const SpaceTimeDataset data = random_ordered(400, 31);
    const double ss = 0.3, ts = 2.5;
    const NeighborSets sets = euclidean_neighbors(data, 12, ss, ts);
    auto metric_fn = [&](int i, int j) {
      const auto& a = data.points[static_cast<std::size_t>(i)];
      const auto& b = data.points[static_cast<std::size_t>(j)];
      const double dx = (a.x - b.x) / ss, dy = (a.y - b.y) / ss,
                   dt = (a.t - b.t) / ts;
      return dx * dx + dy * dy + dt * dt;
    };
    for (int i = 0; i < data.n(); ++i) {
      CHECK(sets.sets[static_cast<std::size_t>(i)] ==
            testing::brute_force_knn(metric_fn, i, 12));
    }
  }
  SUBCASE("nonpositive scales are rejected") {
    const SpaceTimeDataset data = random_ordered(20, 37);
    CHECK_THROWS_AS(euclidean_neighbors(data, 5, 0.0, 1.0), ConfigError);
    CHECK_THROWS_AS(euclidean_neighbors(data, 5, 1.0, -2.0), ConfigError);
  }
}

TEST_CASE("neighbor sets respect past-only conditioning with exact sizes") {
  const SpaceTimeDataset data = random_ordered(300, 41);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 7);
  for (int i = 0; i < data.n(); ++i) {
    const auto& N = sets.sets[static_cast<std::size_t>(i)];
    CHECK(static_cast<int>(N.size()) == std::min(7, i));
    for (int j : N) CHECK(j < i);
  }
}

TEST_CASE("refresh schedule fires at powers of two") {
  CHECK(refresh_schedule(1));
  CHECK(refresh_schedule(2));
  CHECK(!refresh_schedule(3));
  CHECK(refresh_schedule(4));
  CHECK(!refresh_schedule(6));
  CHECK(refresh_schedule(8));
  CHECK(refresh_schedule(1 << 20));
  CHECK(!refresh_schedule((1 << 20) + 3));
  CHECK_THROWS_AS(refresh_schedule(0), ConfigError);
}

TEST_CASE("degenerate points sit at distance one under d_r") {
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  std::vector<SpaceTimePoint> pts = {SpaceTimePoint{0.5, 0.5, 1.0},
                                     SpaceTimePoint{0.2, 0.8, 1.0},
                                     SpaceTimePoint{0.9, 0.1, 2.0}};
  SpaceTimeDataset data(pts, vec_t::Zero(3), den_mat_t(3, 0));
  InducingSet set;
  set.points = {pts[0]};  // first data point degenerates
  const InducingBasis basis(set, kernel);
  const DrMetric metric(data, kernel, basis);
  CHECK(metric.degenerate(0));
  CHECK(!metric.degenerate(1));
  CHECK(metric(0, 1) == 1.0);
  CHECK(metric(0, 2) == 1.0);
  CHECK(metric(1, 2) < 1.0);
}
