/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <vector>

#include <CLI11.hpp>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "stgp/dataset.hpp"
#include "stgp/estimation.hpp"
#include "stgp/neighbors.hpp"
#include "stgp/scoring.hpp"
#include "stgp/simulate.hpp"

namespace stgp {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream buf;
  buf << is.rdbuf();
  return from_string(buf.str(), path);
}

RunConfig RunConfig::from_string(const std::string& text,
                                 const std::string& origin) {
  RunConfig cfg;
  cfg.origin_ = origin;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    }
    cfg.values_[key] = val;
  }
  return cfg;
}

std::string RunConfig::str(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

std::string RunConfig::str_or(const std::string& key,
                              const std::string& fallback) const {
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double RunConfig::num(const std::string& key) const {
  const std::string v = str(key);
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': bad numeric value '" + v + "'");
  }
}

double RunConfig::num_or(const std::string& key, double fallback) const {
  return has(key) ? num(key) : fallback;
}

long RunConfig::integer(const std::string& key) const {
  const double v = num(key);
  const long r = std::lround(v);
  if (std::abs(v - static_cast<double>(r)) > 1e-9) {
    throw ConfigError("config key '" + key + "': expected an integer");
  }
  return r;
}

long RunConfig::integer_or(const std::string& key, long fallback) const {
  return has(key) ? integer(key) : fallback;
}

std::uint64_t RunConfig::seed() const {
  return static_cast<std::uint64_t>(integer_or("seed", 0));
}

std::string RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const std::string& s) {
    for (unsigned char ch : s) {
      h ^= ch;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& [k, v] : values_) {
    feed(k);
    feed("=");
    feed(v);
    feed("\n");
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::string RunConfig::provenance_comment() const {
  return "config_hash=" + hash() + " seed=" + std::to_string(seed());
}

namespace {

CovarianceParams sim_params(const RunConfig& cfg) {
  return CovarianceParams(cfg.num_or("sim.sigma2", 0.01),
                          cfg.num_or("sim.sigma1_2", 1.0), cfg.num_or("sim.a", 0.5),
                          cfg.num_or("sim.c", 20.0), cfg.num_or("sim.alpha", 0.4),
                          cfg.num_or("sim.nu", 1.5), cfg.num_or("sim.beta", 0.4),
                          cfg.num_or("sim.delta", 0.2));
}

FitConfig fit_config(const RunConfig& cfg) {
  FitConfig fc;
  fc.method = method_from_string(cfg.str_or("fit.method", "vecchia-corr"));
  const std::string lik = cfg.str_or("fit.likelihood", "gaussian");
  if (lik == "gaussian") {
    fc.likelihood = FitConfig::Likelihood::kGaussian;
  } else if (lik == "zcptn") {
    fc.likelihood = FitConfig::Likelihood::kZcptn;
  } else {
    throw ConfigError("fit.likelihood must be gaussian or zcptn");
  }
  fc.m_v = static_cast<int>(cfg.integer_or("fit.m_v", 30));
  fc.m = static_cast<int>(cfg.integer_or("fit.m", 500));
  fc.pred_neighbors = static_cast<int>(cfg.integer_or("fit.pred_neighbors", 0));
  fc.max_iterations = static_cast<int>(cfg.integer_or("fit.max_iter", 200));
  fc.tol_objective = cfg.num_or("fit.tol_obj", 1e-8);
  fc.tol_gradient = cfg.num_or("fit.tol_grad", 1e-5);
  fc.nu = cfg.num_or("fit.nu", 1.5);
  fc.seed = cfg.seed();
  fc.validate();
  return fc;
}

SplitSpec split_spec(const RunConfig& cfg) {
  SplitSpec spec;
  const std::string mode = cfg.str_or("split.mode", "temporal-cutoff");
  if (mode == "temporal-cutoff") {
    spec.mode = SplitSpec::Mode::kTemporalCutoff;
    spec.cutoff_time = cfg.num("split.cutoff");
  } else if (mode == "withheld-stations") {
    spec.mode = SplitSpec::Mode::kWithheldStations;
    spec.fraction = cfg.num_or("split.fraction", 0.25);
  } else if (mode == "withheld-space-time") {
    spec.mode = SplitSpec::Mode::kWithheldSpaceTime;
    spec.fraction = cfg.num_or("split.fraction", 0.25);
  } else {
    throw ConfigError("split.mode must be temporal-cutoff, withheld-stations, "
                      "or withheld-space-time");
  }
  spec.seed = cfg.seed();
  return spec;
}

void configure_threads(const RunConfig& cfg) {
#ifdef _OPENMP
  long threads = cfg.integer_or("threads", 0);
  if (const char* env = std::getenv("STGP_THREADS"); env != nullptr) {
    threads = std::strtol(env, nullptr, 10);
  }
  if (threads > 0) omp_set_num_threads(static_cast<int>(threads));
#else
  (void)cfg;
#endif
}

SpaceTimeDataset maybe_train_side(const RunConfig& cfg,
                                  const SpaceTimeDataset& data) {
  if (!cfg.has("split.mode") || cfg.str("split.mode") == "none") return data;
  return split(data, split_spec(cfg)).first;
}

int cmd_simulate(const RunConfig& cfg) {
  SimSpec spec;
  spec.n_locations = static_cast<int>(cfg.integer_or("sim.n_locations", 500));
  spec.n_times = static_cast<int>(cfg.integer_or("sim.n_times", 30));
  spec.n_replicates = static_cast<int>(cfg.integer_or("sim.n_replicates", 1));
  spec.x_min = cfg.num_or("sim.x_min", 0.0);
  spec.x_max = cfg.num_or("sim.x_max", 1.0);
  spec.y_min = cfg.num_or("sim.y_min", 0.0);
  spec.y_max = cfg.num_or("sim.y_max", 1.0);
  spec.theta = sim_params(cfg);
  spec.seed = cfg.seed();
  const std::string out = cfg.str("sim.out");
  const auto datasets = sample_exact_gp(spec);
  for (std::size_t rep = 0; rep < datasets.size(); ++rep) {
    std::string path = out;
    if (datasets.size() > 1) {
      const auto dot = path.rfind(".csv");
      const std::string stem = dot == std::string::npos ? path : path.substr(0, dot);
      path = stem + "_rep" + std::to_string(rep) + ".csv";
    }
    write_dataset_csv(path, datasets[rep], cfg.provenance_comment());
    std::cout << "wrote " << path << " (" << datasets[rep].n() << " rows)\n";
  }
  return 0;
}

int cmd_fit(const RunConfig& cfg) {
  const SpaceTimeDataset full = read_dataset_csv(cfg.str("data.csv"));
  const SpaceTimeDataset train = maybe_train_side(cfg, full);
  const FitConfig fc = fit_config(cfg);
  std::optional<CovarianceParams> init;
  if (cfg.has("fit.init")) {
    init = read_params_file(cfg.str("fit.init")).theta;
  }
  const FittedModel model = fit(train, fc, init);
  const std::string out_params = cfg.str_or("fit.out_params", "params.txt");
  {
    std::ofstream os(out_params);
    if (!os) throw ConfigError("cannot open " + out_params);
    os << "# " << cfg.provenance_comment() << "\n";
    write_params(os, model.theta, model.lik, model.beta);
  }
  if (cfg.has("fit.out_trace")) {
    write_trace_csv(cfg.str("fit.out_trace"), model.trace, cfg.provenance_comment());
  }
  std::cout << "fit " << to_string(fc.method) << ": nll=" << model.final_nll
            << " converged=" << (model.converged ? "yes" : "no")
            << " iterations=" << model.trace.size() << "\n";
  std::cout << "wrote " << out_params << "\n";
  return 0;
}

struct TargetTable {
  std::vector<SpaceTimePoint> points;
  den_mat_t X;
  vec_t y;  // may be empty when the target file has no value column
  std::vector<std::string> stations;
};

TargetTable read_targets(const std::string& path, int expected_p) {
  // target files reuse the dataset schema; a value column is optional
  std::ifstream probe(path);
  if (!probe) throw DataError("cannot open targets: " + path);
  std::string header_line;
  while (std::getline(probe, header_line)) {
    if (!header_line.empty() && header_line[0] != '#') break;
  }
  const bool has_value = header_line.find("value") != std::string::npos;
  TargetTable out;
  if (has_value) {
    const SpaceTimeDataset ds = read_dataset_csv(path);
    out.points = ds.points;
    out.X = ds.X;
    out.y = ds.y;
    out.stations = ds.station_id;
  } else {
    throw DataError(path + ": target files need the dataset schema "
                           "(x,y,t,value[,station_id,covariates])");
  }
  if (expected_p >= 0 && out.X.cols() != expected_p) {
    throw DataError(path + ": covariate count does not match the training data");
  }
  return out;
}

int cmd_predict(const RunConfig& cfg) {
  const SpaceTimeDataset full = read_dataset_csv(cfg.str("data.csv"));
  const SpaceTimeDataset train = maybe_train_side(cfg, full);
  const FitConfig fc = fit_config(cfg);
  const ParamFile params = read_params_file(cfg.str("predict.params"));
  const TargetTable targets = read_targets(cfg.str("predict.targets"), train.p());
  const int n_samples = static_cast<int>(cfg.integer_or("predict.n_samples", 1000));

  const FittedModel model =
      model_at_params(train, fc, params.theta, params.lik, params.beta_coef);
  const PredictiveDistribution pred =
      predict_model(model, targets.points, targets.X, n_samples, cfg.seed());

  const std::string out = cfg.str_or("predict.out", "predictions.csv");
  std::ofstream os(out);
  if (!os) throw ConfigError("cannot open " + out);
  os.precision(17);
  os << "# " << cfg.provenance_comment() << "\n";
  const bool zc = pred.lik.has_value();
  os << "x,y,t,mu,var" << (zc ? ",p_rain" : "") << "\n";
  for (int i = 0; i < pred.size(); ++i) {
    const auto& pt = targets.points[static_cast<std::size_t>(i)];
    os << pt.x << "," << pt.y << "," << pt.t << "," << pred.mu[i] << ","
       << pred.var[i];
    if (zc) os << "," << pred.p_rain[i];
    os << "\n";
  }
  std::cout << "wrote " << out << " (" << pred.size() << " targets)\n";
  if (zc && cfg.has("predict.samples_out")) {
    const std::string spath = cfg.str("predict.samples_out");
    std::ofstream ss(spath);
    if (!ss) throw ConfigError("cannot open " + spath);
    ss.precision(12);
    ss << "# " << cfg.provenance_comment() << "\n";
    for (int i = 0; i < pred.size(); ++i) {
      for (Eigen::Index s = 0; s < pred.amount_samples.cols(); ++s) {
        ss << (s ? "," : "") << pred.amount_samples(i, s);
      }
      ss << "\n";
    }
    std::cout << "wrote " << spath << "\n";
  }
  return 0;
}

struct PredictionFile {
  std::vector<SpaceTimePoint> points;
  vec_t mu, var, p_rain;
  bool has_p_rain = false;
};

PredictionFile read_predictions(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open predictions: " + path);
  std::string line;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) header.push_back(trim(f));
    break;
  }
  auto col = [&](const std::string& name) {
    for (std::size_t j = 0; j < header.size(); ++j) {
      if (header[j] == name) return static_cast<int>(j);
    }
    return -1;
  };
  const int cx = col("x"), cy = col("y"), ct = col("t"), cmu = col("mu"),
            cvar = col("var"), cp = col("p_rain");
  if (cx < 0 || cy < 0 || ct < 0 || cmu < 0 || cvar < 0) {
    throw DataError(path + ": expected columns x,y,t,mu,var[,p_rain]");
  }
  PredictionFile out;
  out.has_p_rain = cp >= 0;
  std::vector<double> mus, vars, ps;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::vector<std::string> fields;
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(trim(f));
    if (fields.size() != header.size()) throw DataError(path + ": ragged row");
    out.points.emplace_back(std::stod(fields[static_cast<std::size_t>(cx)]),
                            std::stod(fields[static_cast<std::size_t>(cy)]),
                            std::stod(fields[static_cast<std::size_t>(ct)]));
    mus.push_back(std::stod(fields[static_cast<std::size_t>(cmu)]));
    vars.push_back(std::stod(fields[static_cast<std::size_t>(cvar)]));
    if (cp >= 0) ps.push_back(std::stod(fields[static_cast<std::size_t>(cp)]));
  }
  const auto n = static_cast<Eigen::Index>(mus.size());
  out.mu = Eigen::Map<const vec_t>(mus.data(), n);
  out.var = Eigen::Map<const vec_t>(vars.data(), n);
  if (cp >= 0) out.p_rain = Eigen::Map<const vec_t>(ps.data(), n);
  return out;
}

den_mat_t read_samples_csv(const std::string& path, int n_rows) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open samples: " + path);
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) row.push_back(std::stod(trim(f)));
    rows.push_back(std::move(row));
  }
  if (static_cast<int>(rows.size()) != n_rows) {
    throw DataError(path + ": sample rows do not match predictions");
  }
  den_mat_t out(n_rows, static_cast<Eigen::Index>(rows[0].size()));
  for (int i = 0; i < n_rows; ++i) {
    if (rows[static_cast<std::size_t>(i)].size() !=
        static_cast<std::size_t>(out.cols())) {
      throw DataError(path + ": ragged sample rows");
    }
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      out(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
  }
  return out;
}

int cmd_evaluate(const RunConfig& cfg) {
  const SpaceTimeDataset truth = read_dataset_csv(cfg.str("data.csv"));
  const PredictionFile pred = read_predictions(cfg.str("eval.predictions"));
  if (static_cast<int>(pred.points.size()) != truth.n()) {
    throw DataError("evaluate: predictions and truth have different row counts");
  }
  for (int i = 0; i < truth.n(); ++i) {
    const auto& a = truth.points[static_cast<std::size_t>(i)];
    const auto& b = pred.points[static_cast<std::size_t>(i)];
    const double scale = std::max({std::abs(a.x), std::abs(a.y), std::abs(a.t), 1.0});
    if (std::abs(a.x - b.x) + std::abs(a.y - b.y) + std::abs(a.t - b.t) >
        1e-9 * scale) {
      throw DataError("evaluate: row " + std::to_string(i) +
                      " coordinates do not match the truth file");
    }
  }
  const double origin = cfg.num_or("eval.origin_t", 0.0);
  std::vector<double> leads(static_cast<std::size_t>(truth.n()));
  for (int i = 0; i < truth.n(); ++i) {
    leads[static_cast<std::size_t>(i)] =
        truth.points[static_cast<std::size_t>(i)].t - origin;
  }

  std::vector<ScoreRow> rows;
  const auto n = truth.y.size();
  vec_t sq_err = (truth.y - pred.mu).array().square();
  {
    auto r = summarize_by_lead("rmse", sq_err, leads);
    for (auto& row : r) {
      row.std_error = row.std_error / (2.0 * std::sqrt(std::max(row.value, 1e-300)));
      row.value = std::sqrt(row.value);
    }
    rows.insert(rows.end(), r.begin(), r.end());
  }
  vec_t abs_err = (truth.y - pred.mu).array().abs();
  {
    auto r = summarize_by_lead("mae", abs_err, leads);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  if (!pred.has_p_rain) {
    vec_t crps(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      crps[i] = crps_gaussian(truth.y[i], pred.mu[i], std::sqrt(pred.var[i]));
    }
    auto r = summarize_by_lead("crps", crps, leads);
    rows.insert(rows.end(), r.begin(), r.end());
  } else {
    vec_t brier(n), logsc(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double obs = truth.y[i] > 0.0 ? 1.0 : 0.0;
      const double p = std::clamp(pred.p_rain[i], 0.0, 1.0);
      brier[i] = (p - obs) * (p - obs);
      const double pc = std::clamp(p, 1e-12, 1.0 - 1e-12);
      logsc[i] = -(obs * std::log(pc) + (1.0 - obs) * std::log(1.0 - pc));
    }
    auto rb = summarize_by_lead("brier", brier, leads);
    rows.insert(rows.end(), rb.begin(), rb.end());
    auto rl = summarize_by_lead("log_score", logsc, leads);
    rows.insert(rows.end(), rl.begin(), rl.end());
    if (cfg.has("eval.samples")) {
      const den_mat_t samples =
          read_samples_csv(cfg.str("eval.samples"), truth.n());
      vec_t crps(n);
      for (Eigen::Index i = 0; i < n; ++i) {
        crps[i] = crps_samples(truth.y[i], samples.row(i).transpose());
      }
      auto r = summarize_by_lead("crps", crps, leads);
      rows.insert(rows.end(), r.begin(), r.end());
    }
  }

  const std::string out = cfg.str_or("eval.out", "scores.csv");
  write_score_csv(out, rows, cfg.provenance_comment());
  std::cout << "wrote " << out << "\n";
  if (cfg.has("eval.per_station_out") && truth.has_stations()) {
    std::vector<StationScoreRow> srows;
    auto add = [&](const std::string& metric, const vec_t& v) {
      auto r = summarize_by_station(metric, v, truth.station_id);
      srows.insert(srows.end(), r.begin(), r.end());
    };
    add("abs_error", abs_err);
    write_station_score_csv(cfg.str("eval.per_station_out"), srows,
                            cfg.provenance_comment());
    std::cout << "wrote " << cfg.str("eval.per_station_out") << "\n";
  }
  return 0;
}

int cmd_neighbors_debug(const RunConfig& cfg) {
  const SpaceTimeDataset full = read_dataset_csv(cfg.str("data.csv"));
  const SpaceTimeDataset data = order_observations(full, cfg.seed());
  const int m_v = static_cast<int>(cfg.integer_or("fit.m_v", 30));
  CovarianceParams theta;
  if (cfg.has("neighbors.params")) {
    theta = read_params_file(cfg.str("neighbors.params")).theta;
  } else {
    FitConfig fc;
    fc.seed = cfg.seed();
    fc.nu = cfg.num_or("fit.nu", 1.5);
    theta = default_init(data, fc);
  }
  const std::string metric = cfg.str_or("neighbors.metric", "dc");
  const std::string out = cfg.str_or("neighbors.out", "neighbors.csv");
  GneitingKernel kernel(theta);
  if (metric == "dc") {
    const NeighborSets sets = correlation_neighbors(data, kernel, m_v);
    const DcMetric dc(data, kernel);
    write_neighbor_debug_csv(out, sets, dc, cfg.provenance_comment());
  } else if (metric == "dr") {
    const InducingSet ind =
        sts_kmeanspp(data, static_cast<int>(cfg.integer_or("fit.m", 500)), cfg.seed());
    const InducingBasis basis(ind, kernel);
    const NeighborSets sets = residual_neighbors(data, kernel, basis, m_v);
    const DrMetric dr(data, kernel, basis);
    write_neighbor_debug_csv(out, sets, dr, cfg.provenance_comment());
  } else if (metric == "euclidean") {
    const EffectiveRanges ranges = effective_ranges(theta);
    const double ss = std::isfinite(ranges.space_range) ? ranges.space_range : 1.0;
    const double ts = std::isfinite(ranges.time_range) ? ranges.time_range : 1e6;
    const NeighborSets sets = euclidean_neighbors(data, m_v, ss, ts);
    // report scaled distances through a small adapter
    class ScaledMetric final : public PointMetric {
     public:
      ScaledMetric(const SpaceTimeDataset& d, double s, double t)
          : data_(&d), s_(s), t_(t) {}
      double operator()(int i, int j) const override {
        const auto& a = data_->points[static_cast<std::size_t>(i)];
        const auto& b = data_->points[static_cast<std::size_t>(j)];
        const double dx = (a.x - b.x) / s_, dy = (a.y - b.y) / s_,
                     dt = (a.t - b.t) / t_;
        return std::sqrt(dx * dx + dy * dy + dt * dt);
      }
      int size() const override { return data_->n(); }

     private:
      const SpaceTimeDataset* data_;
      double s_, t_;
    } scaled(data, ss, ts);
    write_neighbor_debug_csv(out, sets, scaled, cfg.provenance_comment());
  } else {
    throw ConfigError("neighbors.metric must be dc, dr, or euclidean");
  }
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_forecast_loop(const RunConfig& cfg) {
  const SpaceTimeDataset full = read_dataset_csv(cfg.str("data.csv"));
  if (!full.has_stations()) {
    throw DataError("forecast-loop: the dataset needs station labels");
  }
  const double t_start = cfg.num("forecast.t_start");
  const double t_end = cfg.num("forecast.t_end");
  const int horizon = static_cast<int>(cfg.integer_or("forecast.horizon", 5));
  const int refit_every = static_cast<int>(cfg.integer_or("forecast.refit_every", 30));
  const bool warm = cfg.integer_or("forecast.warm_start", 1) != 0;
  if (!(t_end >= t_start) || horizon < 1 || refit_every < 1) {
    throw ConfigError("forecast-loop: bad time range, horizon, or cadence");
  }
  const FitConfig fc = fit_config(cfg);

  // stations withheld once for spatio-temporal evaluation
  SplitSpec sspec;
  sspec.mode = SplitSpec::Mode::kWithheldStations;
  sspec.fraction = cfg.num_or("split.fraction", 0.25);
  sspec.seed = cfg.seed();
  const auto [obs_side, withheld_side] = split(full, sspec);
  std::set<std::string> withheld_stations(withheld_side.station_id.begin(),
                                          withheld_side.station_id.end());

  const std::string out_pred = cfg.str_or("forecast.out_predictions", "forecast.csv");
  std::ofstream os(out_pred);
  if (!os) throw ConfigError("cannot open " + out_pred);
  os.precision(17);
  os << "# " << cfg.provenance_comment() << "\n";
  const bool zc = fc.likelihood == FitConfig::Likelihood::kZcptn;
  os << "x,y,t,station_id,lead,withheld,value,mu,var" << (zc ? ",p_rain" : "")
     << "\n";

  std::optional<CovarianceParams> warm_theta;
  std::optional<FittedModel> model;
  std::vector<double> leads_all;
  std::vector<double> sq_err, abs_err, crps_all, brier_all, logsc_all;

  int steps_since_fit = refit_every;  // force an initial fit
  for (double t0 = t_start; t0 <= t_end; t0 += 1.0) {
    if (steps_since_fit >= refit_every) {
      std::vector<int> train_rows;
      for (int i = 0; i < full.n(); ++i) {
        if (full.points[static_cast<std::size_t>(i)].t <= t0 &&
            withheld_stations.count(full.station_id[static_cast<std::size_t>(i)]) == 0) {
          train_rows.push_back(i);
        }
      }
      if (train_rows.size() < 10) {
        throw DataError("forecast-loop: too little training data at t0=" +
                        std::to_string(t0));
      }
      const SpaceTimeDataset train = full.subset(train_rows);
      model = fit(train, fc, warm ? warm_theta : std::nullopt);
      warm_theta = model->theta;
      steps_since_fit = 0;
      std::cout << "refit at t0=" << t0 << " nll=" << model->final_nll << "\n";
    }
    ++steps_since_fit;

    std::vector<int> target_rows;
    for (int i = 0; i < full.n(); ++i) {
      const double t = full.points[static_cast<std::size_t>(i)].t;
      if (t > t0 && t <= t0 + horizon) target_rows.push_back(i);
    }
    if (target_rows.empty()) continue;
    const SpaceTimeDataset targets = full.subset(target_rows);
    const PredictiveDistribution pred = predict_model(
        *model, targets.points, targets.X,
        static_cast<int>(cfg.integer_or("predict.n_samples", 400)), cfg.seed());
    for (int i = 0; i < targets.n(); ++i) {
      const auto& pt = targets.points[static_cast<std::size_t>(i)];
      const double lead = pt.t - t0;
      const bool held =
          withheld_stations.count(targets.station_id[static_cast<std::size_t>(i)]) > 0;
      os << pt.x << "," << pt.y << "," << pt.t << ","
         << targets.station_id[static_cast<std::size_t>(i)] << "," << lead << ","
         << (held ? 1 : 0) << "," << targets.y[i] << "," << pred.mu[i] << ","
         << pred.var[i];
      if (zc) os << "," << pred.p_rain[i];
      os << "\n";
      leads_all.push_back(lead);
      const double err = targets.y[i] - pred.mu[i];
      sq_err.push_back(err * err);
      abs_err.push_back(std::abs(err));
      if (zc) {
        crps_all.push_back(
            crps_samples(targets.y[i], pred.amount_samples.row(i).transpose()));
        const double obs = targets.y[i] > 0.0 ? 1.0 : 0.0;
        const double p = std::clamp(pred.p_rain[i], 1e-12, 1.0 - 1e-12);
        brier_all.push_back((p - obs) * (p - obs));
        logsc_all.push_back(-(obs * std::log(p) + (1.0 - obs) * std::log(1.0 - p)));
      } else {
        crps_all.push_back(
            crps_gaussian(targets.y[i], pred.mu[i], std::sqrt(pred.var[i])));
      }
    }
  }

  const auto n_scored = static_cast<Eigen::Index>(leads_all.size());
  std::vector<ScoreRow> rows;
  auto append = [&](const std::string& metric, const std::vector<double>& v) {
    auto r = summarize_by_lead(metric, Eigen::Map<const vec_t>(v.data(), n_scored),
                               leads_all);
    rows.insert(rows.end(), r.begin(), r.end());
  };
  if (n_scored > 0) {
    {
      auto r = summarize_by_lead(
          "rmse", Eigen::Map<const vec_t>(sq_err.data(), n_scored), leads_all);
      for (auto& row : r) {
        row.std_error = row.std_error / (2.0 * std::sqrt(std::max(row.value, 1e-300)));
        row.value = std::sqrt(row.value);
      }
      rows.insert(rows.end(), r.begin(), r.end());
    }
    append("mae", abs_err);
    append("crps", crps_all);
    if (zc) {
      append("brier", brier_all);
      append("log_score", logsc_all);
    }
  }
  const std::string out_scores = cfg.str_or("forecast.out_scores", "forecast_scores.csv");
  write_score_csv(out_scores, rows, cfg.provenance_comment());
  std::cout << "wrote " << out_pred << " and " << out_scores << "\n";
  return 0;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"scalable space-time Gaussian process estimation and forecasting"};
  app.require_subcommand(1);
  std::string config_path;
  long threads_flag = 0;

  std::map<std::string, std::function<int(const RunConfig&)>> handlers = {
      {"simulate", cmd_simulate},       {"fit", cmd_fit},
      {"predict", cmd_predict},         {"evaluate", cmd_evaluate},
      {"neighbors-debug", cmd_neighbors_debug},
      {"forecast-loop", cmd_forecast_loop}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, handler] : handlers) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("-c,--config", config_path, "flat key = value config file")
        ->required();
    sub->add_option("--threads", threads_flag, "internal thread count override");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      app.exit(e);
      return 0;
    }
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    const RunConfig cfg = RunConfig::from_file(config_path);
    configure_threads(cfg);
#ifdef _OPENMP
    if (threads_flag > 0) omp_set_num_threads(static_cast<int>(threads_flag));
#endif
    for (const auto& [name, handler] : handlers) {
      if (app.get_subcommand(name)->parsed()) return handler(cfg);
    }
    std::cerr << "config error: no command given\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace stgp
