#pragma once

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bikedepth/pipeline.hpp"
#include "bikedepth/synthetic.hpp"

namespace testing_support {

namespace fs = std::filesystem;
using namespace bikedepth;

/// Fresh directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& label = "t") {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("bikedepth-" + label + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
             std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  out << text;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Small network for pipeline tests: two groups of three terminals over 400 days.
inline synth::Options small_network() {
  synth::Options o;
  o.group_sizes = {3, 3};
  o.days = 400;
  o.pickups_per_day = 30;
  o.shocks = 6;
  return o;
}

/// Writes the small dataset plus config.json into `dir`; returns the config path.
inline fs::path write_small_fixture(const fs::path& dir, bool weather = true) {
  const auto ds = synth::generate(small_network());
  synth::write_dataset(dir, ds);
  json cfg = {{"data", {{"trips", "trips.csv"}, {"stations", "stations.csv"}}},
              {"detection", {{"resamples", 40}}},
              {"sweep", {{"rho", {-1.0, 0.15, 1.0}}}},
              {"cache_dir", "cache"},
              {"output_dir", "run"}};
  if (weather) cfg["data"]["weather"] = "weather.csv";
  write_file(dir / "config.json", cfg.dump(2));
  return dir / "config.json";
}

/// Hash of every regular file under `root`, keyed by relative path.
inline std::map<std::string, std::string> tree_digest(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = sha256_file(e.path().string());
  return out;
}

// ---------------------------------------------------------------------------
// Oracles, written independently of the library code they check
// ---------------------------------------------------------------------------

/// Least squares via normal equations solved by Gauss-Jordan elimination in long double.
inline std::vector<long double> normal_equations(const std::vector<std::vector<double>>& X, const std::vector<double>& y) {
  const std::size_t p = X.front().size();
  std::vector<std::vector<long double>> A(p, std::vector<long double>(p + 1, 0.0L));
  for (std::size_t r = 0; r < X.size(); ++r)
    for (std::size_t i = 0; i < p; ++i) {
      for (std::size_t j = 0; j < p; ++j) A[i][j] += static_cast<long double>(X[r][i]) * X[r][j];
      A[i][p] += static_cast<long double>(X[r][i]) * y[r];
    }
  for (std::size_t c = 0; c < p; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < p; ++r)
      if (std::fabs(A[r][c]) > std::fabs(A[piv][c])) piv = r;
    std::swap(A[c], A[piv]);
    for (std::size_t r = 0; r < p; ++r) {
      if (r == c) continue;
      const long double f = A[r][c] / A[c][c];
      for (std::size_t k = c; k <= p; ++k) A[r][k] -= f * A[c][k];
    }
  }
  std::vector<long double> beta(p);
  for (std::size_t i = 0; i < p; ++i) beta[i] = A[i][p] / A[i][i];
  return beta;
}

/// Indicator row for the (weekday, month, year) design with Sunday / December / ref_year baselines.
inline std::vector<double> indicator_row(const Date& d, bool day, bool month, bool year, const std::vector<int>& years,
                                         int ref_year) {
  std::vector<double> row{1.0};
  const unsigned wd = static_cast<unsigned>(std::chrono::weekday{std::chrono::sys_days{d}}.c_encoding());
  if (day)
    for (unsigned k = 1; k <= 6; ++k) row.push_back(wd == k ? 1.0 : 0.0);
  if (month)
    for (unsigned m = 1; m <= 11; ++m) row.push_back(static_cast<unsigned>(d.month()) == m ? 1.0 : 0.0);
  if (year)
    for (int y : years)
      if (y != ref_year) row.push_back(static_cast<int>(d.year()) == y ? 1.0 : 0.0);
  return row;
}

/// Minimum spanning forest weight by enumerating every edge subset of size n - components.
inline double brute_force_msf_weight(std::size_t n, const std::vector<std::tuple<std::size_t, std::size_t, double>>& edges) {
  auto components = [&](const std::vector<std::size_t>& chosen) {
    std::vector<std::size_t> label(n);
    for (std::size_t i = 0; i < n; ++i) label[i] = i;
    auto relabel = [&](std::size_t from, std::size_t to) {
      for (auto& l : label)
        if (l == from) l = to;
    };
    bool acyclic = true;
    for (std::size_t k : chosen) {
      auto [a, b, w] = edges[k];
      if (label[a] == label[b]) acyclic = false;
      else relabel(label[b], label[a]);
    }
    std::vector<std::size_t> distinct(label.begin(), label.end());
    std::sort(distinct.begin(), distinct.end());
    return std::pair{acyclic, static_cast<std::size_t>(std::unique(distinct.begin(), distinct.end()) - distinct.begin())};
  };
  std::vector<std::size_t> all(edges.size());
  for (std::size_t k = 0; k < edges.size(); ++k) all[k] = k;
  const std::size_t target = n - components(all).second;
  double best = std::numeric_limits<double>::infinity();
  const std::size_t m = edges.size();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << m); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountll(mask)) != target) continue;
    std::vector<std::size_t> chosen;
    double w = 0;
    for (std::size_t k = 0; k < m; ++k)
      if (mask >> k & 1) {
        chosen.push_back(k);
        w += std::get<2>(edges[k]);
      }
    if (w < best && components(chosen).first) best = w;
  }
  return target == 0 ? 0.0 : best;
}

/// Great-circle distance by the spherical law of cosines (independent of the haversine form).
inline double cosine_law_distance_m(double lat1, double lon1, double lat2, double lon2) {
  const double r = 6371000.0, k = M_PI / 180.0;
  const double c = std::sin(lat1 * k) * std::sin(lat2 * k) + std::cos(lat1 * k) * std::cos(lat2 * k) * std::cos((lon2 - lon1) * k);
  return r * std::acos(std::clamp(c, -1.0, 1.0));
}

/// Sample quantile by sorting, type 7.
inline double sorted_quantile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  return lo + 1 < v.size() ? v[lo] + frac * (v[lo + 1] - v[lo]) : v[lo];
}

}  // namespace testing_support
