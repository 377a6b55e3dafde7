/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_ESTIMATION_HPP
#define STGP_ESTIMATION_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "stgp/approximations.hpp"
#include "stgp/covariance.hpp"
#include "stgp/dataset.hpp"
#include "stgp/laplace.hpp"

namespace stgp {

struct FitConfig {
  enum class Method {
    kVecchiaEuclid,
    kVecchiaCorr,
    kFitcKmeanspp,
    kFitcSts,
    kVif
  };
  enum class Likelihood { kGaussian, kZcptn };

  Method method = Method::kVecchiaCorr;
  Likelihood likelihood = Likelihood::kGaussian;
  int m_v = 30;
  int m = 500;
  int pred_neighbors = 0;  // 0 means "use m_v"
  int max_iterations = 200;
  double tol_objective = 1e-8;
  double tol_gradient = 1e-5;
  double nu = 1.5;
  std::uint64_t seed = 0;

  bool vecchia_family() const {
    return method == Method::kVecchiaEuclid || method == Method::kVecchiaCorr ||
           method == Method::kVif;
  }
  bool inducing_family() const {
    return method == Method::kFitcKmeanspp || method == Method::kFitcSts ||
           method == Method::kVif;
  }
  int effective_pred_neighbors() const {
    return pred_neighbors > 0 ? pred_neighbors : m_v;
  }
  void validate() const;
};

const char* to_string(FitConfig::Method method);
FitConfig::Method method_from_string(const std::string& name);

struct TraceRow {
  int iteration = 0;
  double nll = 0.0;
  double grad_norm = 0.0;
  bool refresh = false;
};

struct FittedModel {
  FitConfig config;
  SpaceTimeDataset data;  // ordered training data the structures refer to
  CovarianceParams theta;
  std::optional<LikelihoodParams> lik;
  vec_t beta;
  std::vector<TraceRow> trace;
  bool converged = false;
  double final_nll = 0.0;
  // frozen selection state from the terminal refresh
  NeighborSets neighbors;
  InducingSet inducing;
  std::optional<LaplaceState> laplace;
};

/// Moment-based starting values: response variance split between the nugget
/// and the process, decay scales from 10% quantiles of pairwise separations.
CovarianceParams default_init(const SpaceTimeDataset& data, const FitConfig& config);

FittedModel fit(const SpaceTimeDataset& data, const FitConfig& config,
                const std::optional<CovarianceParams>& init = std::nullopt);

/// Assembles a ready-to-predict model at fixed parameters (no optimization):
/// orders the data, builds the selection state, and for the censored model
/// runs the Newton mode finder once.
FittedModel model_at_params(const SpaceTimeDataset& data, const FitConfig& config,
                            const CovarianceParams& theta,
                            const std::optional<LikelihoodParams>& lik,
                            const vec_t& beta);

/// Predictions from a fitted model (structure rebuilt at the estimate).
PredictiveDistribution predict_model(const FittedModel& model,
                                     const std::vector<SpaceTimePoint>& targets,
                                     const den_mat_t& X_p, int n_samples = 1000,
                                     std::uint64_t seed = 0);

void write_trace_csv(const std::string& path, const std::vector<TraceRow>& trace,
                     const std::string& header_comment = "");

}  // namespace stgp

#endif  // STGP_ESTIMATION_HPP
