/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#include "stgp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace stgp {

SpaceTimeDataset::SpaceTimeDataset(std::vector<SpaceTimePoint> pts, vec_t y_,
                                   den_mat_t X_,
                                   std::vector<std::string> stations)
    : points(std::move(pts)),
      y(std::move(y_)),
      X(std::move(X_)),
      station_id(std::move(stations)) {
  if (X.size() == 0) X.resize(static_cast<Eigen::Index>(points.size()), 0);
  ordering.resize(points.size());
  std::iota(ordering.begin(), ordering.end(), 0);
  validate();
}

void SpaceTimeDataset::validate() const {
  const auto nn = points.size();
  if (nn == 0) throw DataError("SpaceTimeDataset: empty dataset");
  if (static_cast<std::size_t>(y.size()) != nn ||
      static_cast<std::size_t>(X.rows()) != nn ||
      (!station_id.empty() && station_id.size() != nn) ||
      ordering.size() != nn) {
    throw DataError("SpaceTimeDataset: row-aligned fields have mismatched lengths");
  }
  for (const auto& pt : points) {
    if (!std::isfinite(pt.x) || !std::isfinite(pt.y) || !std::isfinite(pt.t)) {
      throw DataError("SpaceTimeDataset: non-finite coordinates");
    }
  }
  if (!y.allFinite() || !X.allFinite()) {
    throw DataError("SpaceTimeDataset: non-finite response or covariates");
  }
  std::vector<bool> seen(nn, false);
  for (int idx : ordering) {
    if (idx < 0 || static_cast<std::size_t>(idx) >= nn || seen[idx]) {
      throw DataError("SpaceTimeDataset: ordering is not a permutation");
    }
    seen[idx] = true;
  }
}

SpaceTimeDataset SpaceTimeDataset::subset(const std::vector<int>& rows) const {
  if (rows.empty()) throw DataError("SpaceTimeDataset::subset: empty selection");
  SpaceTimeDataset out;
  const auto m = rows.size();
  out.points.reserve(m);
  out.y.resize(static_cast<Eigen::Index>(m));
  out.X.resize(static_cast<Eigen::Index>(m), X.cols());
  if (has_stations()) out.station_id.reserve(m);
  for (std::size_t k = 0; k < m; ++k) {
    const int i = rows[k];
    if (i < 0 || i >= n()) throw DataError("SpaceTimeDataset::subset: row out of range");
    out.points.push_back(points[static_cast<std::size_t>(i)]);
    out.y[static_cast<Eigen::Index>(k)] = y[i];
    out.X.row(static_cast<Eigen::Index>(k)) = X.row(i);
    if (has_stations()) out.station_id.push_back(station_id[static_cast<std::size_t>(i)]);
  }
  out.ordering.resize(m);
  std::iota(out.ordering.begin(), out.ordering.end(), 0);
  out.validate();
  return out;
}

SpaceTimeDataset order_observations(const SpaceTimeDataset& data,
                                    std::uint64_t seed) {
  data.validate();
  const int n = data.n();
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](int a, int b) {
    return data.points[static_cast<std::size_t>(a)].t <
           data.points[static_cast<std::size_t>(b)].t;
  });
  // shuffle within blocks of exactly equal t, one generator across blocks
  std::mt19937_64 rng(mix_seed(seed, 0x0bde11));
  std::size_t block_start = 0;
  for (std::size_t k = 1; k <= perm.size(); ++k) {
    const bool block_end =
        k == perm.size() ||
        data.points[static_cast<std::size_t>(perm[k])].t !=
            data.points[static_cast<std::size_t>(perm[block_start])].t;
    if (block_end) {
      for (std::size_t j = k - 1; j > block_start; --j) {
        std::uniform_int_distribution<std::size_t> pick(block_start, j);
        std::swap(perm[j], perm[pick(rng)]);
      }
      block_start = k;
    }
  }
  SpaceTimeDataset out = data.subset(perm);
  // compose with the input's ordering so mapping to original rows survives
  out.ordering.resize(perm.size());
  for (std::size_t k = 0; k < perm.size(); ++k) {
    out.ordering[k] = data.ordering[static_cast<std::size_t>(perm[k])];
  }
  return out;
}

std::pair<SpaceTimeDataset, SpaceTimeDataset> split(const SpaceTimeDataset& data,
                                                    const SplitSpec& spec) {
  data.validate();
  const int n = data.n();
  std::vector<int> train_rows, test_rows;
  switch (spec.mode) {
    case SplitSpec::Mode::kTemporalCutoff: {
      double tmin = data.points[0].t, tmax = data.points[0].t;
      for (const auto& pt : data.points) {
        tmin = std::min(tmin, pt.t);
        tmax = std::max(tmax, pt.t);
      }
      if (spec.cutoff_time < tmin || spec.cutoff_time >= tmax) {
        throw DataError("split: cutoff outside the observed time span");
      }
      for (int i = 0; i < n; ++i) {
        (data.points[static_cast<std::size_t>(i)].t <= spec.cutoff_time
             ? train_rows
             : test_rows)
            .push_back(i);
      }
      break;
    }
    case SplitSpec::Mode::kWithheldStations: {
      if (!data.has_stations()) {
        throw DataError("split: withheld-stations requires station labels");
      }
      if (!(spec.fraction > 0.0 && spec.fraction < 1.0)) {
        throw DataError("split: fraction must be in (0, 1)");
      }
      std::set<std::string> station_set(data.station_id.begin(),
                                        data.station_id.end());
      std::vector<std::string> stations(station_set.begin(), station_set.end());
      std::mt19937_64 rng(mix_seed(spec.seed, 0x5717));
      std::shuffle(stations.begin(), stations.end(), rng);
      const auto n_test = static_cast<std::size_t>(
          std::lround(spec.fraction * static_cast<double>(stations.size())));
      if (n_test == 0 || n_test >= stations.size()) {
        throw DataError("split: fraction yields an empty train or test side");
      }
      std::set<std::string> withheld(stations.begin(),
                                     stations.begin() + static_cast<long>(n_test));
      for (int i = 0; i < n; ++i) {
        (withheld.count(data.station_id[static_cast<std::size_t>(i)]) ? test_rows
                                                                      : train_rows)
            .push_back(i);
      }
      break;
    }
    case SplitSpec::Mode::kWithheldSpaceTime: {
      if (!(spec.fraction > 0.0 && spec.fraction < 1.0)) {
        throw DataError("split: fraction must be in (0, 1)");
      }
      std::vector<int> rows(static_cast<std::size_t>(n));
      std::iota(rows.begin(), rows.end(), 0);
      std::mt19937_64 rng(mix_seed(spec.seed, 0x57));
      std::shuffle(rows.begin(), rows.end(), rng);
      const auto n_test = static_cast<std::size_t>(
          std::lround(spec.fraction * static_cast<double>(n)));
      if (n_test == 0 || n_test >= static_cast<std::size_t>(n)) {
        throw DataError("split: fraction yields an empty train or test side");
      }
      test_rows.assign(rows.begin(), rows.begin() + static_cast<long>(n_test));
      train_rows.assign(rows.begin() + static_cast<long>(n_test), rows.end());
      std::sort(test_rows.begin(), test_rows.end());
      std::sort(train_rows.begin(), train_rows.end());
      break;
    }
  }
  if (train_rows.empty() || test_rows.empty()) {
    throw DataError("split: one side of the partition is empty");
  }
  return {data.subset(train_rows), data.subset(test_rows)};
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) {
    const auto b = field.find_first_not_of(" \t\r");
    const auto e = field.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string()
                                         : field.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_num(const std::string& s, const std::string& path, int lineno) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    if (!std::isfinite(v)) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path + ":" + std::to_string(lineno) +
                    ": missing or non-numeric value '" + s + "'");
  }
}

}  // namespace

SpaceTimeDataset read_dataset_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset: " + path);
  std::string line;
  int lineno = 0;
  std::vector<std::string> header;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    header = split_csv_line(line);
    break;
  }
  if (header.empty()) throw DataError(path + ": missing header row");

  int col_x = -1, col_y = -1, col_t = -1, col_value = -1, col_station = -1;
  std::vector<int> covariate_cols;
  std::vector<std::string> covariate_names;
  for (int j = 0; j < static_cast<int>(header.size()); ++j) {
    const std::string& name = header[static_cast<std::size_t>(j)];
    if (name == "x") col_x = j;
    else if (name == "y") col_y = j;
    else if (name == "t") col_t = j;
    else if (name == "value") col_value = j;
    else if (name == "station_id") col_station = j;
    else {
      covariate_cols.push_back(j);
      covariate_names.push_back(name);
    }
  }
  if (col_x < 0 || col_y < 0 || col_t < 0 || col_value < 0) {
    throw DataError(path + ": required columns are x, y, t, value");
  }

  std::vector<SpaceTimePoint> pts;
  std::vector<double> yv;
  std::vector<std::string> stations;
  std::vector<double> covariates;  // row-major
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto fields = split_csv_line(line);
    if (fields.size() != header.size()) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": expected " + std::to_string(header.size()) + " fields");
    }
    const double x = parse_num(fields[static_cast<std::size_t>(col_x)], path, lineno);
    const double y = parse_num(fields[static_cast<std::size_t>(col_y)], path, lineno);
    const double t = parse_num(fields[static_cast<std::size_t>(col_t)], path, lineno);
    const double v = parse_num(fields[static_cast<std::size_t>(col_value)], path, lineno);
    pts.emplace_back(x, y, t);
    yv.push_back(v);
    if (col_station >= 0) {
      const std::string& s = fields[static_cast<std::size_t>(col_station)];
      if (s.empty()) {
        throw DataError(path + ":" + std::to_string(lineno) + ": empty station_id");
      }
      stations.push_back(s);
    }
    for (int j : covariate_cols) {
      covariates.push_back(parse_num(fields[static_cast<std::size_t>(j)], path, lineno));
    }
  }
  if (pts.empty()) throw DataError(path + ": no data rows");

  const auto n = static_cast<Eigen::Index>(pts.size());
  const auto p = static_cast<Eigen::Index>(covariate_cols.size());
  den_mat_t X(n, p);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < p; ++j) {
      X(i, j) = covariates[static_cast<std::size_t>(i * p + j)];
    }
  }
  return SpaceTimeDataset(std::move(pts),
                          Eigen::Map<const vec_t>(yv.data(), n), std::move(X),
                          std::move(stations));
}

void write_dataset_csv(const std::string& path, const SpaceTimeDataset& data,
                       const std::string& header_comment) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open output dataset: " + path);
  os.precision(17);
  if (!header_comment.empty()) os << "# " << header_comment << "\n";
  os << "x,y,t,value";
  if (data.has_stations()) os << ",station_id";
  for (int j = 0; j < data.p(); ++j) os << ",x" << j;
  os << "\n";
  for (int i = 0; i < data.n(); ++i) {
    const auto& pt = data.points[static_cast<std::size_t>(i)];
    os << pt.x << "," << pt.y << "," << pt.t << "," << data.y[i];
    if (data.has_stations()) os << "," << data.station_id[static_cast<std::size_t>(i)];
    for (int j = 0; j < data.p(); ++j) os << "," << data.X(i, j);
    os << "\n";
  }
}

}  // namespace stgp
