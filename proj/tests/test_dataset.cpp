#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>
#include <set>

#include "stgp/dataset.hpp"

using namespace stgp;

namespace {

SpaceTimeDataset make_data(const std::vector<double>& times, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<SpaceTimePoint> pts;
  vec_t y(static_cast<Eigen::Index>(times.size()));
  std::vector<std::string> stations;
  for (std::size_t i = 0; i < times.size(); ++i) {
    pts.emplace_back(u(rng), u(rng), times[i]);
    y[static_cast<Eigen::Index>(i)] = u(rng);
    stations.push_back("st" + std::to_string(i % 5));
  }
  return SpaceTimeDataset(std::move(pts), std::move(y),
                          den_mat_t(static_cast<Eigen::Index>(times.size()), 0),
                          std::move(stations));
}

}  // namespace

TEST_CASE("order_observations sorts by time with seeded tie shuffles") {
  const SpaceTimeDataset data = make_data({2.0, 1.0, 1.0});
  const SpaceTimeDataset ordered = order_observations(data, 42);
  CHECK(ordered.points[0].t == 1.0);
  CHECK(ordered.points[1].t == 1.0);
  CHECK(ordered.points[2].t == 2.0);
  // the permutation maps outputs back to inputs
  for (int k = 0; k < 3; ++k) {
    const int src = ordered.ordering[static_cast<std::size_t>(k)];
    CHECK(ordered.y[k] == data.y[src]);
    CHECK(ordered.points[static_cast<std::size_t>(k)].t ==
          data.points[static_cast<std::size_t>(src)].t);
  }
}

TEST_CASE("single time block is a seeded uniform permutation") {
  const SpaceTimeDataset data = make_data(std::vector<double>(8, 1.0));
  const SpaceTimeDataset a = order_observations(data, 7);
  const SpaceTimeDataset b = order_observations(data, 7);
  const SpaceTimeDataset c = order_observations(data, 8);
  CHECK(a.ordering == b.ordering);
  CHECK(a.ordering != c.ordering);  // overwhelmingly likely across 8! options
  std::set<int> seen(a.ordering.begin(), a.ordering.end());
  CHECK(seen.size() == 8);
}

TEST_CASE("large block-sorted ordering is reproducible byte for byte") {
  std::vector<double> times;
  for (int t = 1; t <= 30; ++t) {
    for (int s = 0; s < 500; ++s) times.push_back(static_cast<double>(t));
  }
  const SpaceTimeDataset data = make_data(times, 99);
  const SpaceTimeDataset a = order_observations(data, 1234);
  const SpaceTimeDataset b = order_observations(data, 1234);
  CHECK(a.ordering == b.ordering);
  for (int i = 1; i < a.n(); ++i) {
    CHECK(a.points[static_cast<std::size_t>(i)].t >=
          a.points[static_cast<std::size_t>(i - 1)].t);
  }
}

TEST_CASE("ordering twice keeps the block structure and stays bijective") {
  const SpaceTimeDataset data = make_data({3, 1, 2, 1, 3, 2, 2});
  const SpaceTimeDataset once = order_observations(data, 5);
  const SpaceTimeDataset twice = order_observations(once, 6);
  for (int i = 0; i < once.n(); ++i) {
    CHECK(once.points[static_cast<std::size_t>(i)].t ==
          twice.points[static_cast<std::size_t>(i)].t);
  }
  std::set<int> seen(twice.ordering.begin(), twice.ordering.end());
  CHECK(static_cast<int>(seen.size()) == data.n());
}

TEST_CASE("temporal cutoff split reproduces the synthetic design counts") {
  std::vector<double> times;
  for (int t = 1; t <= 30; ++t) {
    for (int s = 0; s < 500; ++s) times.push_back(static_cast<double>(t));
  }
  const SpaceTimeDataset data = make_data(times, 17);
  SplitSpec spec;
  spec.mode = SplitSpec::Mode::kTemporalCutoff;
  spec.cutoff_time = 20.0;
  const auto [train, test] = split(data, spec);
  CHECK(train.n() == 10000);
  CHECK(test.n() == 5000);
  CHECK(train.n() + test.n() == data.n());
}

TEST_CASE("splits reject degenerate fractions and cutoffs") {
  const SpaceTimeDataset data = make_data({1, 1, 2, 2, 3, 3});
  SplitSpec spec;
  spec.mode = SplitSpec::Mode::kWithheldStations;
  spec.fraction = 0.0;
  CHECK_THROWS_AS(split(data, spec), DataError);
  spec.fraction = 1.0;
  CHECK_THROWS_AS(split(data, spec), DataError);
  spec.mode = SplitSpec::Mode::kTemporalCutoff;
  spec.cutoff_time = 0.5;  // below the observed span
  CHECK_THROWS_AS(split(data, spec), DataError);
  spec.cutoff_time = 3.0;  // empty test side
  CHECK_THROWS_AS(split(data, spec), DataError);
}

TEST_CASE("withheld stations removes whole labels deterministically") {
  std::vector<double> times;
  for (int t = 1; t <= 10; ++t) {
    for (int s = 0; s < 20; ++s) times.push_back(static_cast<double>(t));
  }
  const SpaceTimeDataset data = make_data(times, 21);
  SplitSpec spec;
  spec.mode = SplitSpec::Mode::kWithheldStations;
  spec.fraction = 0.25;
  spec.seed = 77;
  const auto [train1, test1] = split(data, spec);
  const auto [train2, test2] = split(data, spec);
  std::set<std::string> train_st(train1.station_id.begin(), train1.station_id.end());
  std::set<std::string> test_st(test1.station_id.begin(), test1.station_id.end());
  for (const auto& st : test_st) CHECK(train_st.count(st) == 0);
  CHECK(train1.n() + test1.n() == data.n());
  CHECK(train1.station_id == train2.station_id);
  CHECK(test1.n() == test2.n());
}

TEST_CASE("withheld space-time split partitions rows") {
  const SpaceTimeDataset data =
      make_data(std::vector<double>{1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6});
  SplitSpec spec;
  spec.mode = SplitSpec::Mode::kWithheldSpaceTime;
  spec.fraction = 0.25;
  spec.seed = 3;
  const auto [train, test] = split(data, spec);
  CHECK(train.n() + test.n() == data.n());
  CHECK(test.n() == 3);
}

TEST_CASE("csv round trip with stations and covariates") {
  const std::string path = "test_dataset_io.csv";
  {
    std::ofstream os(path);
    os << "# provenance line\n";
    os << "x,y,t,value,station_id,elev,slope\n";
    os << "0.5,0.25,1,2.5,alpha,120.0,0.1\n";
    os << "0.75,0.5,2,3.5,bravo,80.0,0.2\n";
  }
  const SpaceTimeDataset data = read_dataset_csv(path);
  CHECK(data.n() == 2);
  CHECK(data.p() == 2);
  CHECK(data.station_id[0] == "alpha");
  CHECK(data.X(1, 0) == 80.0);
  CHECK(data.y[1] == 3.5);
  const std::string out = "test_dataset_io_out.csv";
  write_dataset_csv(out, data, "hash=abc");
  const SpaceTimeDataset back = read_dataset_csv(out);
  CHECK(back.n() == 2);
  CHECK(back.X(0, 1) == 0.1);
  std::remove(path.c_str());
  std::remove(out.c_str());
}

TEST_CASE("csv ingestion rejects missing and malformed values") {
  const std::string path = "test_dataset_bad.csv";
  {
    std::ofstream os(path);
    os << "x,y,t,value\n";
    os << "0.5,,1,2.5\n";
  }
  CHECK_THROWS_AS(read_dataset_csv(path), DataError);
  {
    std::ofstream os(path);
    os << "x,y,value\n0.5,0.5,1\n";
  }
  CHECK_THROWS_AS(read_dataset_csv(path), DataError);
  {
    std::ofstream os(path);
    os << "x,y,t,value\n0.5,0.1,1,nope\n";
  }
  CHECK_THROWS_AS(read_dataset_csv(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("dataset validation") {
  CHECK_THROWS_AS(SpaceTimeDataset({}, vec_t(), den_mat_t(0, 0), {}), DataError);
  CHECK_THROWS_AS(SpaceTimePoint(0.0, std::nan(""), 1.0), DataError);
}
