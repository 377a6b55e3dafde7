/*!
 * This file is part of stgp, a C++ library for scalable spatio-temporal
 * Gaussian process regression.
 *
 * Licensed under the Apache License Version 2.0. See LICENSE file in the
 * project root for license information.
 */
#ifndef STGP_CLI_HPP
#define STGP_CLI_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>

namespace stgp {

/// Flat `section.key = value` configuration with '#' comments.
class RunConfig {
 public:
  static RunConfig from_file(const std::string& path);
  static RunConfig from_string(const std::string& text, const std::string& origin);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  std::string str(const std::string& key) const;
  std::string str_or(const std::string& key, const std::string& fallback) const;
  double num(const std::string& key) const;
  double num_or(const std::string& key, double fallback) const;
  long integer(const std::string& key) const;
  long integer_or(const std::string& key, long fallback) const;

  std::uint64_t seed() const;
  /// FNV-1a hash of the canonical key=value listing, for artifact headers.
  std::string hash() const;
  std::string provenance_comment() const;

 private:
  std::map<std::string, std::string> values_;
  std::string origin_;
};

/// Entry point used by the binary: dispatches simulate / fit / predict /
/// evaluate / neighbors-debug / forecast-loop. Returns the process exit code
/// (0 ok, 2 config error, 3 data error, 4 numerical failure).
int run(int argc, const char* const* argv);

}  // namespace stgp

#endif  // STGP_CLI_HPP
