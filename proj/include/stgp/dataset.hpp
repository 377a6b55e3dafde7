/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_DATASET_HPP
#define STGP_DATASET_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stgp/types.hpp"

namespace stgp {

/// Row-aligned space-time observations. `ordering[k]` is the input row stored
/// at position k, so consumers can map results back to the original order.
struct SpaceTimeDataset {
  std::vector<SpaceTimePoint> points;
  vec_t y;
  den_mat_t X;  // n x p, p may be 0
  std::vector<std::string> station_id;  // empty or length n
  std::vector<int> ordering;            // permutation, length n

  SpaceTimeDataset() = default;
  SpaceTimeDataset(std::vector<SpaceTimePoint> pts, vec_t y_, den_mat_t X_,
                   std::vector<std::string> stations = {});

  int n() const { return static_cast<int>(points.size()); }
  int p() const { return static_cast<int>(X.cols()); }
  bool has_stations() const { return !station_id.empty(); }

  /// Subset by row positions (ordering reset to identity on the result).
  SpaceTimeDataset subset(const std::vector<int>& rows) const;

  void validate() const;
};

/// Train/test split specification.
struct SplitSpec {
  enum class Mode { kWithheldStations, kTemporalCutoff, kWithheldSpaceTime };
  Mode mode = Mode::kTemporalCutoff;
  double fraction = 0.25;   // withheld fraction for the station / space-time modes
  double cutoff_time = 0.0; // train rows satisfy t <= cutoff_time
  std::uint64_t seed = 0;
};

/// Sorts rows by ascending time; ties within a time block are permuted
/// uniformly at random by the seeded generator. The composed permutation is
/// recorded in `ordering`.
SpaceTimeDataset order_observations(const SpaceTimeDataset& data,
                                    std::uint64_t seed);

std::pair<SpaceTimeDataset, SpaceTimeDataset> split(const SpaceTimeDataset& data,
                                                    const SplitSpec& spec);

/// CSV with header; required columns x, y, t, value; optional station_id;
/// remaining numeric columns become covariates in header order. Lines starting
/// with '#' are ignored. Missing values are rejected.
SpaceTimeDataset read_dataset_csv(const std::string& path);
void write_dataset_csv(const std::string& path, const SpaceTimeDataset& data,
                       const std::string& header_comment = "");

}  // namespace stgp

#endif  // STGP_DATASET_HPP
