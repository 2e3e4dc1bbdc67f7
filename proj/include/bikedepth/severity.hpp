#pragma once

#include <boost/math/special_functions/beta.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <boost/math/tools/minima.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "bikedepth/core.hpp"

namespace bikedepth {

/// Beta distribution scaled to the support (0, S), S = cluster size.
struct SeverityModel {
  TerminalId cluster;
  double alpha = 1.0;
  double beta = 1.0;
  double lower = 0.0;  // a
  double upper = 1.0;  // c = S
  std::size_t samples = 0;
  bool mle_refined = false;
};

struct BetaFitOptions {
  std::size_t min_samples = 20;
  double min_shape = 1e-3;
  int max_iterations = 200;
};

struct BetaFitResult {
  std::optional<SeverityModel> model;  // absent: severity unavailable for this cluster
  std::string note;
};

namespace detail {

struct BetaStats {
  double n = 0;
  double sum_log = 0;    // sum log u
  double sum_log1m = 0;  // sum log(1-u)
};

inline double beta_loglik(const BetaStats& s, double a, double b) {
  return (a - 1) * s.sum_log + (b - 1) * s.sum_log1m - s.n * (std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b));
}

}  // namespace detail

/// Method-of-moments start refined by Newton maximum likelihood on the rescaled samples z/S.
inline BetaFitResult fit_beta4(const std::vector<double>& z, double upper, const BetaFitOptions& opt = {},
                               const TerminalId& cluster = {}) {
  BetaFitResult out;
  if (!(upper > 0)) throw ArgumentError("upper bound must be positive");
  if (z.size() < opt.min_samples) {
    out.note = "severity unavailable: " + std::to_string(z.size()) + " exceedance days (need " +
               std::to_string(opt.min_samples) + ")";
    return out;
  }
  constexpr double kEps = 1e-9;
  std::vector<double> u;
  u.reserve(z.size());
  for (double v : z) u.push_back(std::clamp(v / upper, kEps, 1.0 - kEps));

  const double n = static_cast<double>(u.size());
  double mean = 0;
  for (double v : u) mean += v;
  mean /= n;
  double var = 0;
  for (double v : u) var += (v - mean) * (v - mean);
  var /= n - 1;

  double a = 1.0, b = 1.0;
  if (var > 0 && var < mean * (1 - mean)) {
    const double common = mean * (1 - mean) / var - 1;
    a = std::max(mean * common, opt.min_shape);
    b = std::max((1 - mean) * common, opt.min_shape);
  } else {
    out.note = "moment estimates invalid; maximum likelihood from alpha=beta=1";
  }

  detail::BetaStats s{n, 0, 0};
  for (double v : u) {
    s.sum_log += std::log(v);
    s.sum_log1m += std::log1p(-v);
  }
  SeverityModel m{cluster, a, b, 0.0, upper, u.size(), false};
  if (std::isfinite(s.sum_log) && std::isfinite(s.sum_log1m)) {
    double ll = detail::beta_loglik(s, a, b);
    for (int it = 0; it < opt.max_iterations; ++it) {
      const double psi_ab = boost::math::digamma(a + b);
      const double g1 = n * (psi_ab - boost::math::digamma(a)) + s.sum_log;
      const double g2 = n * (psi_ab - boost::math::digamma(b)) + s.sum_log1m;
      const double t_ab = boost::math::trigamma(a + b);
      const double h11 = n * (t_ab - boost::math::trigamma(a));
      const double h22 = n * (t_ab - boost::math::trigamma(b));
      const double h12 = n * t_ab;
      const double det = h11 * h22 - h12 * h12;
      if (!(std::abs(det) > 0)) break;
      double da = -(h22 * g1 - h12 * g2) / det;
      double db = -(-h12 * g1 + h11 * g2) / det;
      double step = 1.0;
      bool improved = false;
      for (int k = 0; k < 60; ++k, step *= 0.5) {
        const double na = a + step * da, nb = b + step * db;
        if (na < opt.min_shape || nb < opt.min_shape) continue;
        const double nll = detail::beta_loglik(s, na, nb);
        if (nll >= ll) {
          a = na;
          b = nb;
          ll = nll;
          improved = true;
          break;
        }
      }
      if (!improved || std::abs(step * da) + std::abs(step * db) < 1e-12 * (a + b)) break;
    }
    m.alpha = std::max(a, opt.min_shape);
    m.beta = std::max(b, opt.min_shape);
    m.mle_refined = true;
  }
  out.model = m;
  return out;
}

/// Severity theta = F(z) under the scaled Beta; z outside [0, S] is clamped.
inline double severity(const SeverityModel& m, double z, bool* clamped = nullptr) {
  const double span = m.upper - m.lower;
  double u = (z - m.lower) / span;
  if (clamped) *clamped = u < 0 || u > 1;
  u = std::clamp(u, 0.0, 1.0);
  if (u == 0.0) return 0.0;
  if (u == 1.0) return 1.0;
  return boost::math::ibeta(m.alpha, m.beta, u);
}

/// Log-likelihood of samples on (0, S) under the scaled Beta density.
inline double beta4_loglik(const SeverityModel& m, const std::vector<double>& z) {
  const double span = m.upper - m.lower;
  double ll = 0;
  const double lb = std::lgamma(m.alpha) + std::lgamma(m.beta) - std::lgamma(m.alpha + m.beta);
  for (double v : z) {
    const double u = (v - m.lower) / span;
    if (u <= 0 || u >= 1) return -std::numeric_limits<double>::infinity();
    ll += (m.alpha - 1) * std::log(u) + (m.beta - 1) * std::log1p(-u) - lb - std::log(span);
  }
  return ll;
}

// ---------------------------------------------------------------------------
// Generalized Pareto comparison fit (exceedances over zero)
// ---------------------------------------------------------------------------

struct GpdModel {
  double shape = 0.0;  // xi
  double scale = 1.0;  // sigma
};

inline double gpd_loglik(const GpdModel& g, const std::vector<double>& x) {
  if (!(g.scale > 0)) return -std::numeric_limits<double>::infinity();
  double ll = 0;
  for (double v : x) {
    if (v < 0) return -std::numeric_limits<double>::infinity();
    if (std::abs(g.shape) < 1e-10) {
      ll += -std::log(g.scale) - v / g.scale;
    } else {
      const double t = 1 + g.shape * v / g.scale;
      if (t <= 0) return -std::numeric_limits<double>::infinity();
      ll += -std::log(g.scale) - (1 / g.shape + 1) * std::log(t);
    }
  }
  return ll;
}

/// Profile maximum likelihood: Brent over the shape, Brent over log-scale within.
inline GpdModel fit_gpd(const std::vector<double>& x) {
  if (x.empty()) throw ArgumentError("GPD fit needs samples");
  double mean = 0, xmax = 0;
  for (double v : x) {
    mean += v;
    xmax = std::max(xmax, v);
  }
  mean /= static_cast<double>(x.size());
  constexpr double kBad = 1e300;
  auto best_scale = [&](double xi) {
    // With xi < 0 the support ends at -sigma/xi, which must cover the sample maximum.
    const double lo_scale = xi < 0 ? std::log(-xi * xmax * (1 + 1e-9) + 1e-12) : std::log(mean * 1e-3 + 1e-12);
    const double hi_scale = std::log(std::max(mean, xmax) * 1e3 + 1e-9);
    auto neg = [&](double ls) {
      const double ll = gpd_loglik({xi, std::exp(ls)}, x);
      return std::isfinite(ll) ? -ll : kBad;
    };
    return boost::math::tools::brent_find_minima(neg, lo_scale, hi_scale, 40);
  };
  auto profile = [&](double xi) { return best_scale(xi).second; };
  const auto r = boost::math::tools::brent_find_minima(profile, -0.99, 2.0, 40);
  return {r.first, std::exp(best_scale(r.first).first)};
}

}  // namespace bikedepth
