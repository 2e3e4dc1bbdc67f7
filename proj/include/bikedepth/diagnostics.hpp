#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <vector>

#include "bikedepth/baseline.hpp"
#include "bikedepth/core.hpp"

namespace bikedepth {

/// Daily totals of one terminal's curves, in the given (date-sorted) order.
inline std::vector<double> daily_totals(const std::vector<DailyCurve>& curves) {
  std::vector<double> out;
  out.reserve(curves.size());
  for (const auto& c : curves) out.push_back(c.total());
  return out;
}

/// Sample variance over a centered window (truncated at the edges). A window holding a single
/// value has variance 0. For even windows the extra day falls before the centre.
inline std::vector<double> rolling_variance(const std::vector<double>& series, int window_days) {
  if (window_days < 2) throw ArgumentError("window_days must be at least 2");
  const auto n = static_cast<long>(series.size());
  const long before = window_days / 2;
  const long after = window_days - 1 - before;
  std::vector<double> out(series.size(), 0.0);
  for (long i = 0; i < n; ++i) {
    const long lo = std::max(0L, i - before), hi = std::min(n - 1, i + after);
    const long m = hi - lo + 1;
    if (m < 2) continue;
    double mean = 0;
    for (long k = lo; k <= hi; ++k) mean += series[static_cast<std::size_t>(k)];
    mean /= static_cast<double>(m);
    double ss = 0;
    for (long k = lo; k <= hi; ++k) {
      const double d = series[static_cast<std::size_t>(k)] - mean;
      ss += d * d;
    }
    out[static_cast<std::size_t>(i)] = ss / static_cast<double>(m - 1);
  }
  return out;
}

struct BinsegOptions {
  int max_cpts = 8;
  std::optional<double> penalty;  // default log(N), on the negative log-likelihood scale
  int min_segment = 2;
};

/// Binary segmentation for changes in variance of a zero-mean normal series.
/// Returns sorted indices where a new segment starts.
inline std::vector<std::size_t> binseg_changepoints(const std::vector<double>& series,
                                                    const BinsegOptions& opt = {}) {
  const std::size_t n = series.size();
  if (n < 4) throw ArgumentError("binary segmentation needs at least 4 points");
  const double penalty = opt.penalty.value_or(std::log(static_cast<double>(n)));
  const auto min_seg = static_cast<std::size_t>(std::max(1, opt.min_segment));

  std::vector<double> csum(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) csum[i + 1] = csum[i] + series[i] * series[i];
  // Negative log-likelihood of [a, b) up to constants: (m/2) log(sigma^2).
  auto nll = [&](std::size_t a, std::size_t b) {
    const double m = static_cast<double>(b - a);
    const double var = std::max((csum[b] - csum[a]) / m, 1e-300);
    return 0.5 * m * std::log(var);
  };
  struct Split {
    double gain = -1;
    std::size_t at = 0;
  };
  auto best_split = [&](std::size_t a, std::size_t b) {
    Split s;
    if (b - a < 2 * min_seg) return s;
    const double whole = nll(a, b);
    for (std::size_t k = a + min_seg; k + min_seg <= b; ++k) {
      const double g = whole - nll(a, k) - nll(k, b);
      if (g > s.gain) s = {g, k};
    }
    return s;
  };

  std::vector<std::pair<std::size_t, std::size_t>> segments{{0, n}};
  std::vector<std::size_t> cpts;
  while (static_cast<int>(cpts.size()) < opt.max_cpts) {
    Split best;
    std::size_t which = 0;
    for (std::size_t i = 0; i < segments.size(); ++i) {
      auto s = best_split(segments[i].first, segments[i].second);
      if (s.gain > best.gain) {
        best = s;
        which = i;
      }
    }
    if (best.gain < penalty || best.gain <= 0) break;
    auto [a, b] = segments[which];
    segments[which] = {a, best.at};
    segments.push_back({best.at, b});
    cpts.push_back(best.at);
  }
  std::sort(cpts.begin(), cpts.end());
  return cpts;
}

/// Adjusted Fisher-Pearson sample skewness G1. Undefined (nullopt) for fewer than three values
/// or zero variance.
inline std::optional<double> skewness(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 3) return std::nullopt;
  double mean = 0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  double m2 = 0, m3 = 0;
  for (double v : values) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
  }
  m2 /= static_cast<double>(n);
  m3 /= static_cast<double>(n);
  if (m2 <= 0) return std::nullopt;
  const double g1 = m3 / std::pow(m2, 1.5);
  const double nn = static_cast<double>(n);
  return std::sqrt(nn * (nn - 1)) / (nn - 2) * g1;
}

/// log(x + offset) elementwise.
inline std::vector<DayObservation> log_transform(std::vector<DayObservation> obs, double offset = 1.0) {
  if (!(offset > 0)) throw ArgumentError("log offset must be positive");
  for (auto& o : obs)
    for (auto& v : o.values) v = std::log(v + offset);
  return obs;
}

inline std::vector<DayObservation> inverse_log_transform(std::vector<DayObservation> obs, double offset = 1.0) {
  for (auto& o : obs)
    for (auto& v : o.values) v = std::exp(v) - offset;
  return obs;
}

/// Sample autocorrelation of the hour-`hour` residual series across calendar days.
/// Missing days break lag pairs; the denominator is the full-sample sum of squares.
inline std::vector<double> interdaily_acf(const std::vector<ResidualCurve>& res, std::size_t hour, std::size_t max_lag) {
  if (hour >= kHours) throw ArgumentError("hour must be in 0..23");
  if (res.size() < max_lag + 2) throw ArgumentError("too few days for the requested lag");
  std::map<long, double> by_day;
  for (const auto& r : res) by_day[to_days(r.date).time_since_epoch().count()] = r.values[hour];
  double mean = 0;
  for (const auto& [d, v] : by_day) mean += v;
  mean /= static_cast<double>(by_day.size());
  double denom = 0;
  for (const auto& [d, v] : by_day) denom += (v - mean) * (v - mean);
  std::vector<double> acf(max_lag + 1, 0.0);
  if (denom <= 0) {
    acf[0] = 1.0;
    return acf;
  }
  for (std::size_t lag = 0; lag <= max_lag; ++lag) {
    double s = 0;
    for (const auto& [d, v] : by_day) {
      auto it = by_day.find(d + static_cast<long>(lag));
      if (it != by_day.end()) s += (v - mean) * (it->second - mean);
    }
    acf[lag] = s / denom;
  }
  return acf;
}

}  // namespace bikedepth
