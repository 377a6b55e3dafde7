/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_SCORING_HPP
#define STGP_SCORING_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stgp/approximations.hpp"
#include "stgp/types.hpp"

namespace stgp {

/// Closed-form CRPS of a Gaussian forecast, always non-negative.
double crps_gaussian(double y, double mu, double sigma);

/// Pairwise-form sample CRPS: mean|X_i - y| - (1/(2k^2)) sum_ij |X_i - X_j|.
double crps_samples(double y, const vec_t& samples);

struct OccurrenceScores {
  double brier = 0.0;
  double log_score = 0.0;
};

/// Brier and log scores of rain-occurrence probabilities against y > 0.
OccurrenceScores occurrence_scores(const vec_t& y, const vec_t& p_rain);

/// Probability integral transform values. Gaussian forecasts use the analytic
/// CDF; the censored model draws the zero-mass value uniformly on [0, F(0)].
vec_t pit_values(const vec_t& y, const PredictiveDistribution& pred,
                 bool randomized, std::uint64_t seed);

struct PointScores {
  double rmse = 0.0;
  double mae = 0.0;
};

/// RMSE over all pairs; MAE restricted to observed-positive rows when
/// positive_only is set. The point forecast is the predictive mean (a median
/// switch exists for the skewed model).
PointScores point_scores(const vec_t& y, const vec_t& point_forecast,
                         bool positive_only);

double ks_statistic(std::vector<double> values);

struct ScoreRow {
  std::string metric;
  double lead_time = 0.0;  // 0 encodes the all-leads aggregate
  double value = 0.0;
  double std_error = 0.0;
};

/// Mean and standard error of per-point scores grouped by lead time
/// (lead 0 row aggregates everything).
std::vector<ScoreRow> summarize_by_lead(const std::string& metric,
                                        const vec_t& per_point,
                                        const std::vector<double>& lead_times);

void write_score_csv(const std::string& path, const std::vector<ScoreRow>& rows,
                     const std::string& header_comment = "");

struct StationScoreRow {
  std::string metric;
  std::string station;
  double value = 0.0;
  double std_error = 0.0;
};

std::vector<StationScoreRow> summarize_by_station(
    const std::string& metric, const vec_t& per_point,
    const std::vector<std::string>& stations);

void write_station_score_csv(const std::string& path,
                             const std::vector<StationScoreRow>& rows,
                             const std::string& header_comment = "");

}  // namespace stgp

#endif  // STGP_SCORING_HPP
