#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "stgp/approximations.hpp"

using namespace stgp;

namespace {

CovarianceParams test_params(double sigma2 = 0.01) {
  return CovarianceParams(sigma2, 1.0, 0.5, 20.0, 0.4, 1.5, 0.4, 0.2);
}

SpaceTimeDataset make_random_dataset(int n, std::uint64_t seed, int n_times = 8,
                             int p = 0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<SpaceTimePoint> pts;
  vec_t y(n);
  den_mat_t X(n, p);
  for (int i = 0; i < n; ++i) {
    pts.emplace_back(u(rng), u(rng),
                     static_cast<double>(1 + static_cast<int>(u(rng) * n_times) % n_times));
    y[i] = g(rng);
    for (int j = 0; j < p; ++j) X(i, j) = g(rng);
  }
  SpaceTimeDataset data(std::move(pts), std::move(y), std::move(X));
  return order_observations(data, seed);
}

NeighborSets full_conditioning(const SpaceTimeDataset& data) {
  NeighborSets sets;
  sets.metric_kind = NeighborSets::MetricKind::kDc;
  sets.m_v = data.n();
  sets.sets.resize(static_cast<std::size_t>(data.n()));
  for (int i = 0; i < data.n(); ++i) {
    for (int j = 0; j < i; ++j) sets.sets[static_cast<std::size_t>(i)].push_back(j);
  }
  return sets;
}

InducingSet all_point_inducing(const SpaceTimeDataset& data) {
  InducingSet set;
  set.points = data.points;
  return set;
}

}  // namespace

TEST_CASE("vecchia structure base cases") {
  const CovarianceParams theta = test_params();
  SUBCASE("single point: B = [1], D = [sigma1_2] for the latent build") {
    SpaceTimeDataset data({SpaceTimePoint{0.1, 0.2, 1.0}}, vec_t::Ones(1),
                          den_mat_t(1, 0));
    NeighborSets sets;
    sets.m_v = 5;
    sets.sets = {{}};
    const VecchiaStructure s = build_vecchia(data, theta, sets);
    CHECK(s.B.coeff(0, 0) == 1.0);
    CHECK(s.D[0] == doctest::Approx(theta.sigma1_2));
  }
  SUBCASE("two identical points make the latent conditioning singular") {
    SpaceTimeDataset data(
        {SpaceTimePoint{0.1, 0.2, 1.0}, SpaceTimePoint{0.1, 0.2, 1.0}},
        vec_t::Ones(2), den_mat_t(2, 0));
    NeighborSets sets;
    sets.m_v = 1;
    sets.sets = {{}, {0}};
    CovarianceParams nonugget = theta;
    nonugget.sigma2 = 0.0;
    CHECK_THROWS_AS(build_vecchia(data, nonugget, sets), NumericError);
  }
}

TEST_CASE("full conditioning reproduces the dense precision") {
  const SpaceTimeDataset data = make_random_dataset(50, 5);
  const CovarianceParams theta = test_params();
  const VecchiaStructure s = build_vecchia(data, theta, full_conditioning(data));
  // B' D^{-1} B against the dense inverse of the latent Gram
  den_mat_t gram(data.n(), data.n());
  const GneitingKernel kernel(theta);
  for (int i = 0; i < data.n(); ++i) {
    for (int j = 0; j < data.n(); ++j) {
      gram(i, j) = kernel(data.points[static_cast<std::size_t>(i)],
                          data.points[static_cast<std::size_t>(j)]);
    }
  }
  const den_mat_t inv = gram.inverse();
  den_mat_t Bd = den_mat_t(s.B);
  const den_mat_t prec = Bd.transpose() * s.D.cwiseInverse().asDiagonal() * Bd;
  CHECK((prec - inv).norm() / inv.norm() < 1e-8);
}

TEST_CASE("nll exactness limits against the dense oracle") {
  const int n = 60;
  const SpaceTimeDataset data = make_random_dataset(n, 7, 6, 2);
  const CovarianceParams theta = test_params(0.05);
  vec_t beta(2);
  beta << 0.4, -0.9;
  const testing::DenseOracle oracle(data, theta);
  const double reference = oracle.nll(data.y, data.X, beta);

  SUBCASE("vecchia, observation policy") {
    const VecchiaStructure s = build_vecchia(data, theta, full_conditioning(data),
                                             DiagonalPolicy::kObservation);
    CHECK(nll(s, data.y, data.X, beta) ==
          doctest::Approx(reference).epsilon(1e-8));
  }
  SUBCASE("vecchia, latent policy through the sparse path") {
    const VecchiaStructure s = build_vecchia(data, theta, full_conditioning(data));
    CHECK(nll(s, data.y, data.X, beta) ==
          doctest::Approx(reference).epsilon(1e-8));
  }
  SUBCASE("fitc with all points inducing") {
    const FitcStructure s = build_fitc(data, theta, all_point_inducing(data));
    CHECK(nll(s, data.y, data.X, beta) ==
          doctest::Approx(reference).epsilon(1e-6));
  }
  SUBCASE("vif with full residual conditioning") {
    InducingSet small;
    small.points = {data.points[0], data.points[10], data.points[20]};
    const VifStructure s = build_vif(data, theta, small, full_conditioning(data),
                                     DiagonalPolicy::kObservation);
    CHECK(nll(s, data.y, data.X, beta) ==
          doctest::Approx(reference).epsilon(1e-8));
  }
  SUBCASE("univariate closed form") {
    SpaceTimeDataset one({SpaceTimePoint{0.5, 0.5, 1.0}}, vec_t::Zero(1),
                         den_mat_t(1, 0));
    NeighborSets sets;
    sets.m_v = 1;
    sets.sets = {{}};
    const VecchiaStructure s =
        build_vecchia(one, theta, sets, DiagonalPolicy::kObservation);
    const double expect =
        0.5 * std::log(2.0 * M_PI) + 0.5 * std::log(theta.sigma1_2 + theta.sigma2);
    CHECK(nll(s, one.y, one.X, vec_t()) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("fitc structural properties") {
  const SpaceTimeDataset data = make_random_dataset(80, 9);
  const CovarianceParams theta = test_params(0.3);
  InducingSet set;
  for (int j = 0; j < 12; ++j) set.points.push_back(data.points[static_cast<std::size_t>(j * 6)]);
  const FitcStructure s = build_fitc(data, theta, set);
  // the corrected diagonal restores sigma1_2 + sigma2 exactly
  for (int i = 0; i < data.n(); ++i) {
    const vec_t u = s.inducing.basis.cross_cov(s.kernel, data.points[static_cast<std::size_t>(i)]);
    const double lowrank = u.dot(s.inducing.basis.llt().solve(u));
    CHECK(lowrank + s.fitc_diag[i] ==
          doctest::Approx(theta.sigma1_2).epsilon(1e-7));
    CHECK(s.lambda[i] == doctest::Approx(s.fitc_diag[i] + theta.sigma2));
  }
  CHECK((s.fitc_diag.array() >= 0.0).all());
}

TEST_CASE("fitc with one distant inducing point degenerates to noise") {
  const SpaceTimeDataset data = make_random_dataset(30, 11);
  const CovarianceParams theta = test_params(0.5);
  InducingSet set;
  set.points = {SpaceTimePoint{500.0, 500.0, 900.0}};
  const FitcStructure s = build_fitc(data, theta, set);
  for (int i = 0; i < data.n(); ++i) {
    CHECK(s.fitc_diag[i] == doctest::Approx(theta.sigma1_2).epsilon(1e-10));
  }
}

TEST_CASE("vif with empty inducing set equals plain vecchia") {
  const SpaceTimeDataset data = make_random_dataset(70, 13);
  const CovarianceParams theta = test_params(0.1);
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 8);
  InducingSet empty;
  const VifStructure v = build_vif(data, theta, empty, sets);
  const VecchiaStructure w = build_vecchia(data, theta, sets);
  CHECK((v.D - w.D).lpNorm<Eigen::Infinity>() == 0.0);
  CHECK((den_mat_t(v.B) - den_mat_t(w.B)).norm() == 0.0);
  const VifStructure vo =
      build_vif(data, theta, empty, sets, DiagonalPolicy::kObservation);
  const VecchiaStructure wo =
      build_vecchia(data, theta, sets, DiagonalPolicy::kObservation);
  CHECK(nll(vo, data.y, data.X, vec_t()) ==
        doctest::Approx(nll(wo, data.y, data.X, vec_t())).epsilon(1e-14));
}

TEST_CASE("sparse precision is positive definite on random quadratic forms") {
  const SpaceTimeDataset data = make_random_dataset(120, 15);
  const CovarianceParams theta = test_params();
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 6);
  const VecchiaStructure s = build_vecchia(data, theta, sets);
  CHECK(s.D.minCoeff() > 0.0);
  std::mt19937_64 rng(99);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    vec_t v(data.n());
    for (int i = 0; i < data.n(); ++i) v[i] = g(rng);
    const vec_t u = s.B * v;
    CHECK(u.cwiseQuotient(s.D.cwiseSqrt()).squaredNorm() > 0.0);
  }
  // log det identity
  den_mat_t Bd = den_mat_t(s.B);
  const den_mat_t sigma_s =
      Bd.inverse() * s.D.asDiagonal() * Bd.inverse().transpose();
  const double logdet_direct = std::log(sigma_s.determinant());
  CHECK(logdet_direct == doctest::Approx(s.D.array().log().sum()).epsilon(1e-6));
}

TEST_CASE("analytic gradients match finite differences of the same objective") {
  const int n = 60;
  const SpaceTimeDataset data = make_random_dataset(n, 17, 6, 1);
  vec_t beta(1);
  beta << 0.7;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  auto fd_check = [&](auto build_and_nll, auto build_and_grad,
                      const CovarianceParams& theta) {
    const vec_t g = build_and_grad(theta);
    double* fields[7];
    CovarianceParams th = theta;
    fields[0] = &th.sigma2;
    fields[1] = &th.sigma1_2;
    fields[2] = &th.a;
    fields[3] = &th.c;
    fields[4] = &th.alpha;
    fields[5] = &th.beta;
    fields[6] = &th.delta;
    for (int k = 0; k < 7; ++k) {
      const double base = *fields[k];
      const double h = 1e-6 * std::max(std::abs(base), 1e-2);
      *fields[k] = base + h;
      const double hi = build_and_nll(th);
      *fields[k] = base - h;
      const double lo = build_and_nll(th);
      *fields[k] = base;
      const double fd = (hi - lo) / (2.0 * h);
      const double scale = std::max({std::abs(fd), std::abs(g[k]), 1e-6});
      CHECK(std::abs(g[k] - fd) / scale < 2e-4);
    }
  };

  SUBCASE("vecchia") {
    const GneitingKernel kernel0(test_params());
    const NeighborSets sets = correlation_neighbors(data, kernel0, 6);
    for (int rep = 0; rep < 3; ++rep) {
      const CovarianceParams theta(0.02 + 0.3 * u(rng), 0.5 + u(rng),
                                   0.3 + u(rng), 5.0 + 20.0 * u(rng),
                                   0.2 + 0.6 * u(rng), 1.5, u(rng), u(rng));
      fd_check(
          [&](const CovarianceParams& th) {
            return nll(build_vecchia(data, th, sets, DiagonalPolicy::kObservation),
                       data.y, data.X, beta);
          },
          [&](const CovarianceParams& th) {
            return nll_grad(build_vecchia(data, th, sets, DiagonalPolicy::kObservation),
                            data.y, data.X, beta);
          },
          theta);
    }
  }
  SUBCASE("fitc") {
    InducingSet set;
    for (int j = 0; j < 10; ++j) set.points.push_back(data.points[static_cast<std::size_t>(j * 5)]);
    for (int rep = 0; rep < 3; ++rep) {
      const CovarianceParams theta(0.05 + 0.3 * u(rng), 0.5 + u(rng),
                                   0.3 + u(rng), 5.0 + 20.0 * u(rng),
                                   0.2 + 0.6 * u(rng), 1.5, u(rng), u(rng));
      fd_check(
          [&](const CovarianceParams& th) {
            return nll(build_fitc(data, th, set), data.y, data.X, beta);
          },
          [&](const CovarianceParams& th) {
            return nll_grad(build_fitc(data, th, set), data.y, data.X, beta);
          },
          theta);
    }
  }
  SUBCASE("vif") {
    InducingSet set;
    for (int j = 0; j < 8; ++j) set.points.push_back(data.points[static_cast<std::size_t>(j * 7)]);
    const GneitingKernel kernel0(test_params());
    const InducingBasis basis0(set, kernel0);
    const NeighborSets sets = residual_neighbors(data, kernel0, basis0, 6);
    for (int rep = 0; rep < 3; ++rep) {
      const CovarianceParams theta(0.05 + 0.3 * u(rng), 0.5 + u(rng),
                                   0.3 + u(rng), 5.0 + 20.0 * u(rng),
                                   0.2 + 0.6 * u(rng), 1.5, u(rng), u(rng));
      fd_check(
          [&](const CovarianceParams& th) {
            return nll(build_vif(data, th, set, sets, DiagonalPolicy::kObservation),
                       data.y, data.X, beta);
          },
          [&](const CovarianceParams& th) {
            return nll_grad(build_vif(data, th, set, sets, DiagonalPolicy::kObservation),
                            data.y, data.X, beta);
          },
          theta);
    }
  }
}

TEST_CASE("noise-dominated nugget gradient limit") {
  const SpaceTimeDataset data = make_random_dataset(80, 19);
  CovarianceParams theta = test_params(400.0);  // huge nugget
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 5);
  const VecchiaStructure s =
      build_vecchia(data, theta, sets, DiagonalPolicy::kObservation);
  const vec_t g = nll_grad(s, data.y, data.X, vec_t());
  const double n = data.n();
  const double expect = n / (2.0 * theta.sigma2) -
                        data.y.squaredNorm() / (2.0 * theta.sigma2 * theta.sigma2);
  CHECK(g[0] == doctest::Approx(expect).epsilon(5e-3));
}

TEST_CASE("predictions at exactness limits match dense kriging") {
  const int n = 80;
  const SpaceTimeDataset data = make_random_dataset(n, 21, 6, 0);
  const CovarianceParams theta = test_params(0.05);
  const testing::DenseOracle oracle(data, theta);
  std::vector<SpaceTimePoint> targets;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int p = 0; p < 12; ++p) {
    targets.emplace_back(u(rng), u(rng), 1.0 + 8.0 * u(rng));
  }
  vec_t mu_ref, var_ref;
  oracle.predict(data, theta, data.y, data.X, vec_t(), targets, den_mat_t(12, 0),
                 mu_ref, var_ref);

  SUBCASE("vecchia full conditioning") {
    const VecchiaStructure s = build_vecchia(data, theta, full_conditioning(data),
                                             DiagonalPolicy::kObservation);
    const PredictiveDistribution pred =
        predict(s, data.y, data.X, vec_t(), targets, den_mat_t(12, 0), n);
    for (int p = 0; p < 12; ++p) {
      CHECK(pred.mu[p] == doctest::Approx(mu_ref[p]).epsilon(1e-6));
      CHECK(pred.var[p] == doctest::Approx(var_ref[p]).epsilon(1e-6));
    }
  }
  SUBCASE("fitc with all points") {
    const FitcStructure s = build_fitc(data, theta, all_point_inducing(data));
    const PredictiveDistribution pred =
        predict(s, data.y, data.X, vec_t(), targets, den_mat_t(12, 0));
    for (int p = 0; p < 12; ++p) {
      CHECK(pred.mu[p] == doctest::Approx(mu_ref[p]).epsilon(1e-5));
      CHECK(pred.var[p] ==
            doctest::Approx(var_ref[p]).epsilon(1e-5).scale(theta.sigma1_2));
    }
  }
  SUBCASE("vif full residual conditioning") {
    InducingSet small;
    small.points = {data.points[3], data.points[30], data.points[60]};
    const VifStructure s = build_vif(data, theta, small, full_conditioning(data),
                                     DiagonalPolicy::kObservation);
    const PredictiveDistribution pred =
        predict(s, data.y, data.X, vec_t(), targets, den_mat_t(12, 0), n);
    for (int p = 0; p < 12; ++p) {
      CHECK(pred.mu[p] == doctest::Approx(mu_ref[p]).epsilon(1e-6));
      CHECK(pred.var[p] == doctest::Approx(var_ref[p]).epsilon(1e-6));
    }
  }
}

TEST_CASE("prediction limit cases") {
  const SpaceTimeDataset data = make_random_dataset(50, 23);
  CovarianceParams theta = test_params(1e-12);  // vanishing nugget
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 10);
  const VecchiaStructure s =
      build_vecchia(data, theta, sets, DiagonalPolicy::kObservation);

  SUBCASE("a target at a training point interpolates") {
    const std::vector<SpaceTimePoint> targets = {data.points[20]};
    const PredictiveDistribution pred =
        predict(s, data.y, data.X, vec_t(), targets, den_mat_t(1, 0), 10);
    CHECK(pred.mu[0] == doctest::Approx(data.y[20]).epsilon(1e-5));
    CHECK(pred.var[0] < 1e-8);
  }
  SUBCASE("a target far away reverts to the prior") {
    theta = test_params(0.25);
    const VecchiaStructure s2 =
        build_vecchia(data, theta, sets, DiagonalPolicy::kObservation);
    const std::vector<SpaceTimePoint> targets = {SpaceTimePoint{300.0, 300.0, 500.0}};
    const PredictiveDistribution pred =
        predict(s2, data.y, data.X, vec_t(), targets, den_mat_t(1, 0), 10);
    CHECK(pred.mu[0] == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(pred.var[0] ==
          doctest::Approx(theta.sigma1_2 + theta.sigma2).epsilon(1e-10));
  }
}

TEST_CASE("predictive variance bounds for partial conditioning") {
  const SpaceTimeDataset data = make_random_dataset(150, 25);
  const CovarianceParams theta = test_params(0.1);
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 10);
  const VecchiaStructure s =
      build_vecchia(data, theta, sets, DiagonalPolicy::kObservation);
  std::vector<SpaceTimePoint> targets;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int p = 0; p < 40; ++p) targets.emplace_back(u(rng), u(rng), 9.0 * u(rng) + 1.0);
  const PredictiveDistribution pred =
      predict(s, data.y, data.X, vec_t(), targets, den_mat_t(40, 0), 10);
  for (int p = 0; p < 40; ++p) {
    CHECK(pred.var[p] >= 0.0);
    CHECK(pred.var[p] <= theta.sigma1_2 + theta.sigma2 + 1e-8);
  }
  // vif bounds too
  InducingSet set;
  for (int j = 0; j < 10; ++j) set.points.push_back(data.points[static_cast<std::size_t>(j * 11)]);
  const InducingBasis basis(set, kernel);
  const NeighborSets rsets = residual_neighbors(data, kernel, basis, 10);
  const VifStructure v =
      build_vif(data, theta, set, rsets, DiagonalPolicy::kObservation);
  const PredictiveDistribution pv =
      predict(v, data.y, data.X, vec_t(), targets, den_mat_t(40, 0), 10);
  for (int p = 0; p < 40; ++p) {
    CHECK(pv.var[p] >= 0.0);
    CHECK(pv.var[p] <= theta.sigma1_2 + theta.sigma2 + 1e-8);
  }
}

TEST_CASE("nll is invariant under relabeling that preserves the ordering") {
  const SpaceTimeDataset data = make_random_dataset(40, 27);
  SpaceTimeDataset relabeled = data;
  relabeled.station_id.assign(static_cast<std::size_t>(data.n()), "renamed");
  const CovarianceParams theta = test_params(0.2);
  const GneitingKernel kernel(theta);
  const NeighborSets sets = correlation_neighbors(data, kernel, 6);
  const VecchiaStructure a =
      build_vecchia(data, theta, sets, DiagonalPolicy::kObservation);
  const VecchiaStructure b =
      build_vecchia(relabeled, theta, sets, DiagonalPolicy::kObservation);
  CHECK(nll(a, data.y, data.X, vec_t()) == nll(b, relabeled.y, relabeled.X, vec_t()));
}

TEST_CASE("gls coefficients match the dense generalized solve") {
  const SpaceTimeDataset data = make_random_dataset(60, 29, 6, 2);
  const CovarianceParams theta = test_params(0.15);
  const VecchiaStructure s = build_vecchia(data, theta, full_conditioning(data),
                                           DiagonalPolicy::kObservation);
  const vec_t beta_lib = gls_beta(s, data.y, data.X);
  const testing::DenseOracle oracle(data, theta);
  const den_mat_t SX = oracle.llt.solve(data.X);
  const vec_t beta_ref =
      (data.X.transpose() * SX).ldlt().solve(SX.transpose() * data.y);
  CHECK((beta_lib - beta_ref).lpNorm<Eigen::Infinity>() < 1e-8);
}
