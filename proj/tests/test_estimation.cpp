#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "stgp/estimation.hpp"
#include "stgp/simulate.hpp"

using namespace stgp;

namespace {

CovarianceParams gen_params() {
  return CovarianceParams(0.05, 1.0, 0.5, 20.0, 0.4, 1.5, 0.4, 0.2);
}

SpaceTimeDataset small_sim(std::uint64_t seed, int n_loc = 60, int n_times = 8) {
  SimSpec spec;
  spec.n_locations = n_loc;
  spec.n_times = n_times;
  spec.n_replicates = 1;
  spec.theta = gen_params();
  spec.seed = seed;
  return sample_exact_gp(spec)[0];
}

}  // namespace

TEST_CASE("default_init splits the variance and lands in a sane region") {
  const SpaceTimeDataset data = small_sim(3);
  FitConfig config;
  config.nu = 1.5;
  const CovarianceParams init = default_init(data, config);
  // white-noise-scale split: sigma2 + sigma1_2 close to the sample variance
  const double var =
      (data.y.array() - data.y.mean()).square().sum() / (data.n() - 1);
  CHECK(init.sigma2 + init.sigma1_2 == doctest::Approx(var).epsilon(1e-9));
  CHECK(init.sigma2 == doctest::Approx(init.sigma1_2));
  CHECK(init.alpha == 0.8);
  CHECK(init.beta == 0.5);
  CHECK(init.delta == 0.5);
  CHECK(init.c > 0.0);
  CHECK(init.a > 0.0);
}

TEST_CASE("default_init rejects constant responses and tiny samples") {
  std::vector<SpaceTimePoint> pts;
  for (int i = 0; i < 20; ++i) {
    pts.emplace_back(0.01 * i, 0.0, static_cast<double>(i));
  }
  SpaceTimeDataset data(pts, vec_t::Constant(20, 3.25), den_mat_t(20, 0));
  FitConfig config;
  CHECK_THROWS_AS(default_init(data, config), DataError);
  SpaceTimeDataset tiny(std::vector<SpaceTimePoint>(pts.begin(), pts.begin() + 5),
                        vec_t::Ones(5), den_mat_t(5, 0));
  CHECK_THROWS_AS(default_init(tiny, config), DataError);
}

TEST_CASE("warm start at the generating parameters converges quickly") {
  const SpaceTimeDataset data = small_sim(11);
  FitConfig config;
  config.method = FitConfig::Method::kVecchiaCorr;
  config.m_v = 10;
  config.nu = 1.5;
  config.seed = 4;
  config.tol_objective = 1e-5;  // loose tolerance per the warm-start check
  config.tol_gradient = 1e-2;
  config.max_iterations = 60;
  const FittedModel model = fit(data, config, gen_params());
  CHECK(model.converged);
  CHECK(model.trace.size() <= 25);
  // recovered parameters stay near the generator at this data size
  CHECK(model.theta.sigma1_2 == doctest::Approx(1.0).epsilon(0.8));
  CHECK(std::isfinite(model.final_nll));
}

TEST_CASE("fits are deterministic given the seed") {
  const SpaceTimeDataset data = small_sim(13);
  FitConfig config;
  config.method = FitConfig::Method::kVecchiaCorr;
  config.m_v = 8;
  config.seed = 21;
  config.max_iterations = 25;
  config.tol_objective = 1e-7;
  config.tol_gradient = 1e-3;
  const FittedModel a = fit(data, config);
  const FittedModel b = fit(data, config);
  REQUIRE(a.trace.size() == b.trace.size());
  for (std::size_t k = 0; k < a.trace.size(); ++k) {
    CHECK(a.trace[k].nll == b.trace[k].nll);
    CHECK(a.trace[k].grad_norm == b.trace[k].grad_norm);
    CHECK(a.trace[k].refresh == b.trace[k].refresh);
  }
  CHECK(a.theta.sigma1_2 == b.theta.sigma1_2);
  CHECK(a.theta.c == b.theta.c);
}

TEST_CASE("trace decreases between refresh events and refreshes sit on powers of two") {
  const SpaceTimeDataset data = small_sim(17);
  FitConfig config;
  config.method = FitConfig::Method::kVecchiaCorr;
  config.m_v = 8;
  config.seed = 5;
  config.max_iterations = 40;
  config.tol_objective = 1e-7;
  config.tol_gradient = 1e-3;
  const FittedModel model = fit(data, config);
  for (std::size_t k = 1; k < model.trace.size(); ++k) {
    if (!model.trace[k].refresh) {
      CHECK(model.trace[k].nll <= model.trace[k - 1].nll + 1e-9);
    } else if (model.trace[k].iteration < model.trace.back().iteration) {
      CHECK(refresh_schedule(model.trace[k].iteration));
    }
  }
  // returned parameters satisfy their domain constraints by construction
  CHECK_NOTHROW(model.theta.validate());
}

TEST_CASE("all five methods run end to end on a small simulation") {
  const SpaceTimeDataset data = small_sim(19, 50, 6);
  for (const auto method :
       {FitConfig::Method::kVecchiaEuclid, FitConfig::Method::kVecchiaCorr,
        FitConfig::Method::kFitcKmeanspp, FitConfig::Method::kFitcSts,
        FitConfig::Method::kVif}) {
    FitConfig config;
    config.method = method;
    config.m_v = 6;
    config.m = 24;
    config.seed = 9;
    config.max_iterations = 12;
    config.tol_objective = 1e-6;
    config.tol_gradient = 1e-2;
    const FittedModel model = fit(data, config);
    CHECK(std::isfinite(model.final_nll));
    // prediction smoke check on a few targets
    std::vector<SpaceTimePoint> targets = {data.points[5], data.points[40],
                                           SpaceTimePoint{0.5, 0.5, 9.0}};
    const PredictiveDistribution pred =
        predict_model(model, targets, den_mat_t(3, 0));
    for (int p = 0; p < 3; ++p) {
      CHECK(std::isfinite(pred.mu[p]));
      CHECK(pred.var[p] > 0.0);
    }
  }
}

TEST_CASE("gaussian fit with covariates profiles the coefficients") {
  SpaceTimeDataset data = small_sim(23, 50, 6);
  // attach a covariate and shift the response by a known coefficient
  den_mat_t X(data.n(), 1);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < data.n(); ++i) X(i, 0) = g(rng);
  data.X = X;
  data.y += 2.5 * X.col(0);
  FitConfig config;
  config.method = FitConfig::Method::kVecchiaCorr;
  config.m_v = 8;
  config.seed = 10;
  config.max_iterations = 30;
  config.tol_objective = 1e-6;
  config.tol_gradient = 1e-2;
  const FittedModel model = fit(data, config);
  REQUIRE(model.beta.size() == 1);
  CHECK(model.beta[0] == doctest::Approx(2.5).epsilon(0.1));
}

TEST_CASE("zcptn fit recovers plausible parameters on censored data") {
  // simulate a latent field, then censor and transform
  SpaceTimeDataset data = small_sim(29, 60, 6);
  const double sigma_eps = 0.6, lambda = 1.3;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < data.n(); ++i) {
    const double z = data.y[i] + sigma_eps * g(rng);
    data.y[i] = z <= 0.0 ? 0.0 : std::pow(z, lambda);
  }
  FitConfig config;
  config.method = FitConfig::Method::kVecchiaCorr;
  config.likelihood = FitConfig::Likelihood::kZcptn;
  config.m_v = 6;
  config.seed = 12;
  config.max_iterations = 15;
  config.tol_objective = 1e-5;
  config.tol_gradient = 5e-2;
  const FittedModel model = fit(data, config);
  REQUIRE(model.lik.has_value());
  CHECK(model.lik->sigma > 0.1);
  CHECK(model.lik->lambda > 0.5);
  CHECK(model.lik->lambda < 3.0);
  CHECK(std::isfinite(model.final_nll));
  REQUIRE(model.laplace.has_value());
  CHECK(model.laplace->converged);
  // zcptn predictions carry occurrence probabilities and samples
  std::vector<SpaceTimePoint> targets = {data.points[10],
                                         SpaceTimePoint{0.2, 0.8, 8.0}};
  const PredictiveDistribution pred =
      predict_model(model, targets, den_mat_t(2, 0), 500, 3);
  REQUIRE(pred.p_rain.size() == 2);
  CHECK(pred.p_rain[0] >= 0.0);
  CHECK(pred.p_rain[0] <= 1.0);
  CHECK(pred.amount_samples.cols() == 500);
  CHECK(pred.amount_samples.minCoeff() >= 0.0);
}

TEST_CASE("config validation") {
  FitConfig config;
  config.m_v = 0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config.m_v = 10;
  config.method = FitConfig::Method::kFitcSts;
  config.m = 0;
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config.m = 10;
  config.nu = 1.0;  // no closed-form gradient for the Gaussian path
  CHECK_THROWS_AS(config.validate(), ConfigError);
  config.likelihood = FitConfig::Likelihood::kZcptn;
  CHECK_NOTHROW(config.validate());  // finite differences carry general nu
  CHECK(method_from_string("vif") == FitConfig::Method::kVif);
  CHECK_THROWS_AS(method_from_string("bogus"), ConfigError);
}

TEST_CASE("model_at_params rebuilds a usable model without optimizing") {
  const SpaceTimeDataset data = small_sim(31, 40, 5);
  FitConfig config;
  config.method = FitConfig::Method::kFitcSts;
  config.m = 16;
  config.seed = 2;
  const FittedModel model =
      model_at_params(data, config, gen_params(), std::nullopt, vec_t());
  std::vector<SpaceTimePoint> targets = {SpaceTimePoint{0.4, 0.4, 6.0}};
  const PredictiveDistribution pred = predict_model(model, targets, den_mat_t(1, 0));
  CHECK(std::isfinite(pred.mu[0]));
  CHECK(pred.var[0] > 0.0);
}
