#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "bikedepth/baseline.hpp"
#include "bikedepth/core.hpp"
#include "bikedepth/hashing.hpp"

namespace bikedepth {

enum class DepthMethod { h_modal, fraiman_muniz };

inline std::string to_string(DepthMethod m) { return m == DepthMethod::h_modal ? "h_modal" : "fraiman_muniz"; }

inline DepthMethod parse_depth_method(const std::string& s) {
  if (s == "h_modal") return DepthMethod::h_modal;
  if (s == "fraiman_muniz") return DepthMethod::fraiman_muniz;
  throw ConfigError("unknown depth method '" + s + "'");
}

/// Linear-interpolation sample quantile (Hyndman-Fan type 7). Reorders `v`.
inline double quantile_inplace(std::vector<double>& v, double p) {
  if (v.empty()) throw ArgumentError("quantile of empty sample");
  const double pos = p * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  std::nth_element(v.begin(), v.begin() + static_cast<long>(lo), v.end());
  const double a = v[lo];
  if (frac == 0.0 || lo + 1 >= v.size()) return a;
  const double b = *std::min_element(v.begin() + static_cast<long>(lo) + 1, v.end());
  return a + frac * (b - a);
}

inline double quantile(std::vector<double> v, double p) { return quantile_inplace(v, p); }

namespace detail {

/// h-modal depth with Gaussian kernel; bandwidth = 15th percentile of pairwise L2 distances.
inline std::vector<double> h_modal_depth(const std::vector<Curve>& pool, double bandwidth_quantile = 0.15) {
  const std::size_t n = pool.size();
  std::vector<double> sq(n * n, 0.0);
  std::vector<double> dist;
  dist.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    const Curve& x = pool[i];
    for (std::size_t j = i + 1; j < n; ++j) {
      const Curve& y = pool[j];
      double s = 0;
      for (std::size_t h = 0; h < kHours; ++h) {
        const double d = x[h] - y[h];
        s += d * d;
      }
      sq[i * n + j] = sq[j * n + i] = s;
      dist.push_back(std::sqrt(s));
    }
  }
  constexpr double kNorm = 0.3989422804014327;  // 1/sqrt(2*pi)
  std::vector<double> depth(n, kNorm);           // self term K(0)
  if (n < 2) return depth;
  double h = quantile_inplace(dist, bandwidth_quantile);
  if (!(h > 0)) {
    double smallest = 0;
    for (double d : dist)
      if (d > 0 && (smallest == 0 || d < smallest)) smallest = d;
    h = smallest;
  }
  if (!(h > 0)) {
    // Every curve identical: each pair sits at kernel maximum.
    std::fill(depth.begin(), depth.end(), kNorm * static_cast<double>(n));
    return depth;
  }
  const double scale = -0.5 / (h * h);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    const double* row = &sq[i * n];
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) s += std::exp(row[j] * scale);
    depth[i] += kNorm * s;
  }
  return depth;
}

/// Fraiman-Muniz depth: grid mean of 1 - |1/2 - F_t(x(t))| with F_t the pointwise ECDF.
inline std::vector<double> fraiman_muniz_depth(const std::vector<Curve>& pool) {
  const std::size_t n = pool.size();
  std::vector<double> depth(n, 0.0);
  std::vector<double> col(n);
  for (std::size_t h = 0; h < kHours; ++h) {
    for (std::size_t i = 0; i < n; ++i) col[i] = pool[i][h];
    std::vector<double> sorted = col;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n; ++i) {
      const auto le = std::upper_bound(sorted.begin(), sorted.end(), col[i]) - sorted.begin();
      const double f = static_cast<double>(le) / static_cast<double>(n);
      depth[i] += 1.0 - std::abs(0.5 - f);
    }
  }
  for (auto& d : depth) d /= static_cast<double>(kHours);
  return depth;
}

}  // namespace detail

/// Depth of each curve relative to the pool; low depth = outlying. Only the ordering is meaningful.
inline std::vector<double> functional_depth(const std::vector<Curve>& pool, DepthMethod method = DepthMethod::h_modal) {
  if (pool.empty()) return {};
  return method == DepthMethod::h_modal ? detail::h_modal_depth(pool) : detail::fraiman_muniz_depth(pool);
}

struct ThresholdOptions {
  DepthMethod method = DepthMethod::h_modal;
  int resamples = 200;         // B
  double smoothing = 0.05;     // gamma: covariance scale of the smoothing perturbation
  double percentile = 0.01;    // per-resample depth quantile
  std::size_t min_pool = 10;
};

/// Depth cutoff from depth-weighted smoothed bootstrap: the median over resamples of the
/// `percentile` quantile of resampled depths. Throws InsufficientData for small or all-zero pools.
inline double bootstrap_threshold(const std::vector<Curve>& pool, const ThresholdOptions& opt, std::uint64_t seed,
                                  const std::vector<double>* pool_depths = nullptr) {
  const std::size_t n = pool.size();
  if (n < opt.min_pool) throw InsufficientData("pool has " + std::to_string(n) + " curves; need " + std::to_string(opt.min_pool));
  const bool all_zero = std::all_of(pool.begin(), pool.end(), [](const Curve& c) {
    return std::all_of(c.begin(), c.end(), [](double v) { return v == 0.0; });
  });
  if (all_zero) throw InsufficientData("pool curves are all zero");
  if (opt.resamples < 1) throw ArgumentError("bootstrap needs at least one resample");

  const std::vector<double> depths = pool_depths ? *pool_depths : functional_depth(pool, opt.method);
  std::vector<double> weights = depths;
  double wsum = 0;
  for (double w : weights) wsum += w;
  if (!(wsum > 0)) std::fill(weights.begin(), weights.end(), 1.0);

  // Smoothing perturbation ~ N(0, gamma * Sigma), Sigma the pool covariance over the grid.
  Eigen::MatrixXd data(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kHours));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t h = 0; h < kHours; ++h) data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(h)) = pool[i][h];
  const Eigen::RowVectorXd mean = data.colwise().mean();
  const Eigen::MatrixXd centered = data.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Eigen::VectorXd scales = (eig.eigenvalues().array().max(0.0) * opt.smoothing).sqrt();
  const Eigen::MatrixXd factor = eig.eigenvectors() * scales.asDiagonal();

  std::vector<double> lows(static_cast<std::size_t>(opt.resamples));
  std::vector<Curve> sample(n);
  Eigen::VectorXd z(static_cast<Eigen::Index>(kHours));
  for (int b = 0; b < opt.resamples; ++b) {
    std::mt19937_64 rng(derive_seed(seed, "resample/" + std::to_string(b)));
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
      const Curve& src = pool[pick(rng)];
      for (auto& v : z) v = normal(rng);
      const Eigen::VectorXd noise = factor * z;
      for (std::size_t h = 0; h < kHours; ++h) sample[i][h] = src[h] + noise(static_cast<Eigen::Index>(h));
    }
    auto d = functional_depth(sample, opt.method);
    lows[static_cast<std::size_t>(b)] = quantile_inplace(d, opt.percentile);
  }
  const double c = quantile(lows, 0.5);
  if (!(c > 0)) throw NumericError("bootstrap produced a nonpositive depth threshold");
  return c;
}

// ---------------------------------------------------------------------------
// Per-terminal scoring
// ---------------------------------------------------------------------------

/// z = (C - d) / C; positive exactly when the day falls below the threshold.
inline double normalize_depth(double depth, double threshold) {
  if (!(threshold > 0)) throw ArgumentError("depth threshold must be positive");
  return (threshold - depth) / threshold;
}

struct DepthRecord {
  TerminalId terminal;
  Date date;
  PartitionLabel partition;
  double depth = 0.0;
  std::optional<double> threshold;  // absent when the pool could not support one
  std::optional<double> z;

  bool flagged() const { return z && *z > 0; }
};

inline std::uint64_t pool_seed(std::uint64_t root, const std::string& kind, const TerminalId& terminal,
                               const PartitionLabel& p) {
  return derive_seed(root, kind + "/" + terminal + "/" + to_string(p));
}

/// Depths, thresholds and normalized depths for one terminal's residual days, pooled by partition.
inline std::vector<DepthRecord> score_terminal(const std::vector<ResidualCurve>& residuals, const ThresholdOptions& opt,
                                               std::uint64_t root_seed, const std::string& kind = "usage",
                                               std::vector<std::string>* warnings = nullptr) {
  std::map<PartitionLabel, std::vector<std::size_t>> pools;
  for (std::size_t i = 0; i < residuals.size(); ++i) pools[residuals[i].partition].push_back(i);
  std::vector<DepthRecord> out(residuals.size());
  for (const auto& [label, idx] : pools) {
    std::vector<Curve> pool;
    pool.reserve(idx.size());
    for (std::size_t i : idx) pool.push_back(residuals[i].values);
    const auto depths = functional_depth(pool, opt.method);
    std::optional<double> c;
    try {
      c = bootstrap_threshold(pool, opt, pool_seed(root_seed, kind, residuals[idx.front()].terminal, label), &depths);
    } catch (const InsufficientData& e) {
      if (warnings)
        warnings->push_back(residuals[idx.front()].terminal + " " + to_string(label) + ": insufficient data (" + e.what() + ")");
    }
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& r = residuals[idx[k]];
      DepthRecord rec{r.terminal, r.date, label, depths[k], c, std::nullopt};
      if (c) rec.z = normalize_depth(depths[k], *c);
      out[idx[k]] = rec;
    }
  }
  return out;
}

}  // namespace bikedepth
