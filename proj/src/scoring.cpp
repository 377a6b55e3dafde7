/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "stgp/laplace.hpp"

namespace stgp {

namespace {
constexpr double kInvSqrtPi = 0.5641895835477563;
}

double crps_gaussian(double y, double mu, double sigma) {
  if (!(sigma > 0.0)) throw ConfigError("crps_gaussian: sigma must be positive");
  const double z = (y - mu) / sigma;
  return sigma * (2.0 * norm_pdf(z) + z * (2.0 * norm_cdf(z) - 1.0) - kInvSqrtPi);
}

double crps_samples(double y, const vec_t& samples) {
  const auto k = samples.size();
  if (k < 2) throw ConfigError("crps_samples: need at least two samples");
  double term1 = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) term1 += std::abs(samples[i] - y);
  term1 /= static_cast<double>(k);
  // pairwise spread via the sorted-sample identity:
  // sum_ij |x_i - x_j| = 2 * sum_i (2i + 1 - k) x_(i)
  std::vector<double> sorted(samples.data(), samples.data() + k);
  std::sort(sorted.begin(), sorted.end());
  double spread = 0.0;
  for (Eigen::Index i = 0; i < k; ++i) {
    spread += (2.0 * static_cast<double>(i) + 1.0 - static_cast<double>(k)) *
              sorted[static_cast<std::size_t>(i)];
  }
  spread *= 2.0;
  return term1 - spread / (2.0 * static_cast<double>(k) * static_cast<double>(k));
}

OccurrenceScores occurrence_scores(const vec_t& y, const vec_t& p_rain) {
  if (y.size() != p_rain.size() || y.size() == 0) {
    throw DataError("occurrence_scores: length mismatch");
  }
  OccurrenceScores out;
  const auto n = y.size();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double p = p_rain[i];
    if (p < 0.0 || p > 1.0) throw DataError("occurrence_scores: probability outside [0,1]");
    const double obs = y[i] > 0.0 ? 1.0 : 0.0;
    out.brier += (p - obs) * (p - obs);
    const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
    out.log_score -= obs * std::log(pc) + (1.0 - obs) * std::log(1.0 - pc);
  }
  out.brier /= static_cast<double>(n);
  out.log_score /= static_cast<double>(n);
  return out;
}

vec_t pit_values(const vec_t& y, const PredictiveDistribution& pred,
                 bool randomized, std::uint64_t seed) {
  const auto n = y.size();
  if (pred.mu.size() != n) throw DataError("pit_values: length mismatch");
  vec_t out(n);
  std::mt19937_64 rng(mix_seed(seed, 0x917));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const bool censored = pred.lik.has_value();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!censored) {
      const double sd = std::sqrt(pred.var[i]);
      out[i] = norm_cdf((y[i] - pred.mu[i]) / sd);
      continue;
    }
    const double f = zcptn_cdf(y[i], pred.mu_latent[i], pred.var_latent[i], *pred.lik);
    if (y[i] == 0.0) {
      out[i] = randomized ? unif(rng) * f : f;
    } else {
      out[i] = f;
      if (randomized) unif(rng);  // keep the stream aligned across flags
    }
  }
  return out;
}

PointScores point_scores(const vec_t& y, const vec_t& point_forecast,
                         bool positive_only) {
  if (y.size() != point_forecast.size() || y.size() == 0) {
    throw DataError("point_scores: length mismatch");
  }
  PointScores out;
  double se = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double e = y[i] - point_forecast[i];
    se += e * e;
  }
  out.rmse = std::sqrt(se / static_cast<double>(y.size()));
  double ae = 0.0;
  Eigen::Index count = 0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    if (positive_only && !(y[i] > 0.0)) continue;
    ae += std::abs(y[i] - point_forecast[i]);
    ++count;
  }
  if (count == 0) throw DataError("point_scores: no rows left after the positive filter");
  out.mae = ae / static_cast<double>(count);
  return out;
}

double ks_statistic(std::vector<double> values) {
  if (values.empty()) throw DataError("ks_statistic: empty sample");
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double d = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double u = values[i];
    const double hi = (static_cast<double>(i) + 1.0) / n - u;
    const double lo = u - static_cast<double>(i) / n;
    d = std::max(d, std::max(hi, lo));
  }
  return d;
}

std::vector<ScoreRow> summarize_by_lead(const std::string& metric,
                                        const vec_t& per_point,
                                        const std::vector<double>& lead_times) {
  if (static_cast<std::size_t>(per_point.size()) != lead_times.size()) {
    throw DataError("summarize_by_lead: length mismatch");
  }
  std::map<double, std::vector<double>> groups;
  std::vector<double> all;
  for (Eigen::Index i = 0; i < per_point.size(); ++i) {
    groups[lead_times[static_cast<std::size_t>(i)]].push_back(per_point[i]);
    all.push_back(per_point[i]);
  }
  auto mean_se = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double se = v.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
    return std::pair<double, double>{mean, se};
  };
  std::vector<ScoreRow> rows;
  {
    const auto [m, se] = mean_se(all);
    rows.push_back({metric, 0.0, m, se});
  }
  for (const auto& [lead, v] : groups) {
    const auto [m, se] = mean_se(v);
    rows.push_back({metric, lead, m, se});
  }
  return rows;
}

void write_score_csv(const std::string& path, const std::vector<ScoreRow>& rows,
                     const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open score report: " + path);
  os.precision(12);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "metric,lead_time,value,std_error\n";
  for (const auto& row : rows) {
    os << row.metric << "," << row.lead_time << "," << row.value << ","
       << row.std_error << "\n";
  }
}

std::vector<StationScoreRow> summarize_by_station(
    const std::string& metric, const vec_t& per_point,
    const std::vector<std::string>& stations) {
  if (static_cast<std::size_t>(per_point.size()) != stations.size()) {
    throw DataError("summarize_by_station: length mismatch");
  }
  std::map<std::string, std::vector<double>> groups;
  for (Eigen::Index i = 0; i < per_point.size(); ++i) {
    groups[stations[static_cast<std::size_t>(i)]].push_back(per_point[i]);
  }
  std::vector<StationScoreRow> rows;
  for (const auto& [st, v] : groups) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double se = v.size() > 1 ? std::sqrt(var / (n - 1.0) / n) : 0.0;
    rows.push_back({metric, st, mean, se});
  }
  return rows;
}

void write_station_score_csv(const std::string& path,
                             const std::vector<StationScoreRow>& rows,
                             const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open station score report: " + path);
  os.precision(12);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "metric,station_id,value,std_error\n";
  for (const auto& row : rows) {
    os << row.metric << "," << row.station << "," << row.value << ","
       << row.std_error << "\n";
  }
}

}  // namespace stgp
