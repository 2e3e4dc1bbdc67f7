#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bikedepth/core.hpp"
#include "bikedepth/ingestion.hpp"

namespace bikedepth {

// ---------------------------------------------------------------------------
// Partitions
// ---------------------------------------------------------------------------

enum class Season { summer, winter };
enum class DayType { weekday, weekend };

struct PartitionLabel {
  Season season = Season::summer;
  DayType daytype = DayType::weekday;

  bool operator==(const PartitionLabel&) const = default;
  auto operator<=>(const PartitionLabel&) const = default;

  /// 0..3 in the order summer-weekday, winter-weekday, summer-weekend, winter-weekend.
  int index() const {
    return (daytype == DayType::weekend ? 2 : 0) + (season == Season::winter ? 1 : 0);
  }
};

inline std::string to_string(const PartitionLabel& p) {
  return std::string(p.season == Season::summer ? "summer" : "winter") + "-" +
         (p.daytype == DayType::weekday ? "weekday" : "weekend");
}

inline PartitionLabel parse_partition(const std::string& s) {
  PartitionLabel p;
  if (s.rfind("summer-", 0) == 0) p.season = Season::summer;
  else if (s.rfind("winter-", 0) == 0) p.season = Season::winter;
  else throw DataError("bad partition label '" + s + "'");
  const auto tail = s.substr(7);
  if (tail == "weekday") p.daytype = DayType::weekday;
  else if (tail == "weekend") p.daytype = DayType::weekend;
  else throw DataError("bad partition label '" + s + "'");
  return p;
}

/// Summer is the inclusive (month, day) interval [start, end] within each year.
struct SeasonBoundaries {
  unsigned summer_start_month = 4;
  unsigned summer_start_day = 1;
  unsigned summer_end_month = 10;
  unsigned summer_end_day = 31;
};

inline PartitionLabel assign_partition(const Date& date, const SeasonBoundaries& b = {}) {
  const unsigned key = month_of(date) * 100 + static_cast<unsigned>(date.day());
  const unsigned lo = b.summer_start_month * 100 + b.summer_start_day;
  const unsigned hi = b.summer_end_month * 100 + b.summer_end_day;
  const bool summer = lo <= hi ? (key >= lo && key <= hi) : (key >= lo || key <= hi);
  const unsigned wd = weekday_of(date);
  return {summer ? Season::summer : Season::winter,
          (wd == 0 || wd == 6) ? DayType::weekend : DayType::weekday};
}

// ---------------------------------------------------------------------------
// Regression model
// ---------------------------------------------------------------------------

enum class Factor { day = 0, month = 1, year = 2 };

inline std::string to_string(Factor f) {
  switch (f) {
    case Factor::day: return "day";
    case Factor::month: return "month";
    case Factor::year: return "year";
  }
  return "day";
}

struct FactorSet {
  bool day = false;
  bool month = false;
  bool year = false;

  bool operator==(const FactorSet&) const = default;

  static FactorSet all() { return {true, true, true}; }
  bool has(Factor f) const {
    return f == Factor::day ? day : f == Factor::month ? month : year;
  }
  int count() const { return int(day) + int(month) + int(year); }

  /// Model numbering used in the CV-MSE comparison table (1 = none .. 8 = all three).
  int model_number() const {
    static constexpr int kTable[2][2][2] = {{{1, 4}, {3, 6}}, {{2, 7}, {5, 8}}};
    return kTable[day][month][year];
  }
  static FactorSet from_model_number(int n) {
    for (int mask = 0; mask < 8; ++mask) {
      FactorSet f{bool(mask & 1), bool(mask & 2), bool(mask & 4)};
      if (f.model_number() == n) return f;
    }
    throw ArgumentError("model number must be in 1..8");
  }
};

inline std::string to_string(const FactorSet& f) {
  std::string s;
  for (Factor x : {Factor::day, Factor::month, Factor::year})
    if (f.has(x)) s += (s.empty() ? "" : "+") + to_string(x);
  return s.empty() ? "none" : s;
}

inline FactorSet parse_factor_set(const std::string& s) {
  FactorSet f;
  if (s == "none" || s.empty()) return f;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, '+')) {
    if (tok == "day") f.day = true;
    else if (tok == "month") f.month = true;
    else if (tok == "year") f.year = true;
    else throw ConfigError("unknown factor '" + tok + "'");
  }
  return f;
}

/// One non-reference factor level; weekday uses 0=Sun..6=Sat, months 1..12.
struct Level {
  Factor factor = Factor::day;
  int value = 0;

  bool operator==(const Level&) const = default;
  auto operator<=>(const Level&) const = default;
};

inline std::string to_string(const Level& l) { return to_string(l.factor) + ":" + std::to_string(l.value); }

/// A day's observed curve on the hourly grid (counts or transformed counts).
struct DayObservation {
  Date date;
  Curve values{};
};

inline std::vector<DayObservation> to_observations(const std::vector<DailyCurve>& curves) {
  std::vector<DayObservation> out;
  out.reserve(curves.size());
  for (const auto& c : curves) {
    DayObservation o{c.date, {}};
    for (std::size_t h = 0; h < kHours; ++h) o.values[h] = c.counts[h];
    out.push_back(o);
  }
  return out;
}

struct RegressionModel {
  TerminalId terminal;
  FactorSet factors;
  int reference_year = 0;  // reference levels: Sunday, December, reference_year
  Curve intercept{};
  std::vector<Level> levels;         // active indicator columns
  std::vector<Curve> coefficients;   // parallel to `levels`
  std::vector<Level> dropped;        // requested levels removed (unobserved or collinear)
  std::vector<std::string> warnings;

  const Curve* coefficient(const Level& l) const {
    auto it = std::find(levels.begin(), levels.end(), l);
    return it == levels.end() ? nullptr : &coefficients[static_cast<std::size_t>(it - levels.begin())];
  }
};

namespace detail {

inline bool level_active(const Level& l, const Date& d) {
  switch (l.factor) {
    case Factor::day: return static_cast<int>(weekday_of(d)) == l.value;
    case Factor::month: return static_cast<int>(month_of(d)) == l.value;
    case Factor::year: return year_of(d) == l.value;
  }
  return false;
}

/// Non-reference levels the design would contain for `factors` given the observed years.
inline std::vector<Level> candidate_levels(const FactorSet& factors, const std::set<int>& years,
                                           int reference_year) {
  std::vector<Level> out;
  if (factors.day)
    for (int d = 1; d <= 6; ++d) out.push_back({Factor::day, d});
  if (factors.month)
    for (int m = 1; m <= 11; ++m) out.push_back({Factor::month, m});
  if (factors.year)
    for (int y : years)
      if (y != reference_year) out.push_back({Factor::year, y});
  return out;
}

inline Eigen::MatrixXd design_matrix(const std::vector<DayObservation>& obs, const std::vector<Level>& levels) {
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(obs.size()),
                                            static_cast<Eigen::Index>(levels.size() + 1));
  for (std::size_t i = 0; i < obs.size(); ++i) {
    X(static_cast<Eigen::Index>(i), 0) = 1.0;
    for (std::size_t j = 0; j < levels.size(); ++j)
      if (level_active(levels[j], obs[i].date)) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j + 1)) = 1.0;
  }
  return X;
}

inline Eigen::MatrixXd response_matrix(const std::vector<DayObservation>& obs) {
  Eigen::MatrixXd Y(static_cast<Eigen::Index>(obs.size()), static_cast<Eigen::Index>(kHours));
  for (std::size_t i = 0; i < obs.size(); ++i)
    for (std::size_t h = 0; h < kHours; ++h) Y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(h)) = obs[i].values[h];
  return Y;
}

/// Removes unobserved levels, then any columns the pivoted QR finds collinear.
/// Returns the surviving levels; `dropped` and `warnings` collect the rest.
inline std::vector<Level> prune_levels(const std::vector<DayObservation>& obs, std::vector<Level> levels,
                                       std::vector<Level>& dropped, std::vector<std::string>& warnings) {
  std::vector<Level> observed;
  for (const auto& l : levels) {
    bool seen = std::any_of(obs.begin(), obs.end(), [&](const DayObservation& o) { return level_active(l, o.date); });
    if (seen) {
      observed.push_back(l);
    } else {
      dropped.push_back(l);
      warnings.push_back("level " + to_string(l) + " not observed; dropped");
    }
  }
  Eigen::MatrixXd X = design_matrix(obs, observed);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  const auto rank = qr.rank();
  if (rank == X.cols()) return observed;
  // Keep the columns chosen first by the pivoting; the intercept is always kept.
  std::vector<bool> keep(static_cast<std::size_t>(X.cols()), false);
  keep[0] = true;
  const auto& perm = qr.colsPermutation().indices();
  for (Eigen::Index k = 0; k < rank; ++k) keep[static_cast<std::size_t>(perm(k))] = true;
  std::vector<Level> out;
  for (std::size_t j = 0; j < observed.size(); ++j) {
    if (keep[j + 1]) {
      out.push_back(observed[j]);
    } else {
      dropped.push_back(observed[j]);
      warnings.push_back("level " + to_string(observed[j]) + " collinear with design; dropped");
    }
  }
  return out;
}

}  // namespace detail

/// Reference year used when none is pinned: the latest year present.
inline int default_reference_year(const std::vector<DayObservation>& obs) {
  int y = std::numeric_limits<int>::min();
  for (const auto& o : obs) y = std::max(y, year_of(o.date));
  return y;
}

/// Pointwise OLS of each hour on an indicator design (Sunday/December/reference-year baseline).
/// The 24 hourly fits share one design matrix.
inline RegressionModel fit_regression(const std::vector<DayObservation>& obs, const FactorSet& factors,
                                      std::optional<int> reference_year = std::nullopt,
                                      const TerminalId& terminal = {}) {
  if (obs.empty()) throw ArgumentError("cannot fit a regression to zero days");
  RegressionModel m;
  m.terminal = terminal;
  m.factors = factors;
  m.reference_year = reference_year.value_or(default_reference_year(obs));
  std::set<int> years;
  for (const auto& o : obs) years.insert(year_of(o.date));
  // Years outside the observed set never enter the design, but an explicitly pinned reference
  // year must still be excluded.
  auto candidates = detail::candidate_levels(factors, years, m.reference_year);
  if (obs.size() < candidates.size() + 2)
    throw ArgumentError("fewer days than coefficients; refusing to fit");

  m.levels = detail::prune_levels(obs, candidates, m.dropped, m.warnings);
  const Eigen::MatrixXd X = detail::design_matrix(obs, m.levels);
  const Eigen::MatrixXd Y = detail::response_matrix(obs);
  const Eigen::MatrixXd B = X.colPivHouseholderQr().solve(Y);

  for (std::size_t h = 0; h < kHours; ++h) m.intercept[h] = B(0, static_cast<Eigen::Index>(h));
  m.coefficients.resize(m.levels.size());
  for (std::size_t j = 0; j < m.levels.size(); ++j)
    for (std::size_t h = 0; h < kHours; ++h)
      m.coefficients[j][h] = B(static_cast<Eigen::Index>(j + 1), static_cast<Eigen::Index>(h));
  return m;
}

inline RegressionModel fit_regression(const std::vector<DailyCurve>& curves, const FactorSet& factors,
                                      std::optional<int> reference_year = std::nullopt) {
  return fit_regression(to_observations(curves), factors, reference_year,
                        curves.empty() ? TerminalId{} : curves.front().terminal);
}

struct MeanPrediction {
  Curve values{};
  bool dropped_level = false;  // the date's own level had no coefficient
};

inline MeanPrediction predict_mean(const RegressionModel& model, const Date& date) {
  MeanPrediction p{model.intercept, false};
  for (std::size_t j = 0; j < model.levels.size(); ++j)
    if (detail::level_active(model.levels[j], date))
      for (std::size_t h = 0; h < kHours; ++h) p.values[h] += model.coefficients[j][h];

  auto check = [&](Factor f, int value, bool is_reference) {
    if (!model.factors.has(f) || is_reference) return;
    if (!model.coefficient({f, value})) p.dropped_level = true;
  };
  check(Factor::day, static_cast<int>(weekday_of(date)), weekday_of(date) == 0);
  check(Factor::month, static_cast<int>(month_of(date)), month_of(date) == 12);
  check(Factor::year, year_of(date), year_of(date) == model.reference_year);
  return p;
}

struct ResidualCurve {
  TerminalId terminal;
  Date date;
  Curve values{};
  PartitionLabel partition;

  double integral() const {
    double s = 0;
    for (double v : values) s += v;
    return s;
  }
};

inline std::vector<ResidualCurve> residuals(const RegressionModel& model, const std::vector<DayObservation>& obs,
                                            const SeasonBoundaries& seasons = {}) {
  std::vector<ResidualCurve> out;
  out.reserve(obs.size());
  for (const auto& o : obs) {
    const auto mean = predict_mean(model, o.date);
    ResidualCurve r{model.terminal, o.date, {}, assign_partition(o.date, seasons)};
    for (std::size_t h = 0; h < kHours; ++h) r.values[h] = o.values[h] - mean.values[h];
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validated model selection
// ---------------------------------------------------------------------------

struct CvResult {
  double cv_mse = 0.0;
  std::vector<std::string> warnings;
};

/// Leave-one-out CV-MSE: mean over days of the grid-mean squared prediction error.
/// Uses the hat-matrix identity e_i / (1 - h_ii); days whose level occurs once are refit
/// explicitly with that level dropped.
inline CvResult cv_mse(const std::vector<DayObservation>& obs, const FactorSet& factors,
                       std::optional<int> reference_year = std::nullopt) {
  const int ref = reference_year.value_or(default_reference_year(obs));
  const RegressionModel full = fit_regression(obs, factors, ref);
  CvResult out;
  out.warnings = full.warnings;

  const Eigen::MatrixXd X = detail::design_matrix(obs, full.levels);
  const Eigen::MatrixXd Y = detail::response_matrix(obs);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  const Eigen::MatrixXd B = qr.solve(Y);
  const Eigen::MatrixXd E = Y - X * B;
  const Eigen::Index n = X.rows(), p = X.cols();
  const Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);

  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double leverage = Q.row(i).squaredNorm();
    double sq = 0.0;
    if (1.0 - leverage > 1e-10) {
      sq = E.row(i).squaredNorm() / ((1.0 - leverage) * (1.0 - leverage));
    } else {
      std::vector<DayObservation> rest;
      rest.reserve(obs.size() - 1);
      for (Eigen::Index k = 0; k < n; ++k)
        if (k != i) rest.push_back(obs[static_cast<std::size_t>(k)]);
      const auto loo = fit_regression(rest, factors, ref);
      const auto pred = predict_mean(loo, obs[static_cast<std::size_t>(i)].date);
      for (std::size_t h = 0; h < kHours; ++h) {
        const double d = obs[static_cast<std::size_t>(i)].values[h] - pred.values[h];
        sq += d * d;
      }
      out.warnings.push_back("day " + to_string(obs[static_cast<std::size_t>(i)].date) +
                             " holds a singleton level; left-out prediction drops it");
    }
    total += sq / static_cast<double>(kHours);
  }
  out.cv_mse = total / static_cast<double>(n);
  return out;
}

struct ModelSelection {
  FactorSet chosen;
  std::array<double, 8> cv_mse{};  // index = model number - 1
  std::vector<std::string> warnings;
};

/// All eight factor subsets in tie-break order: fewer factors first, then day < month < year.
inline std::array<FactorSet, 8> factor_sets_in_preference_order() {
  return {FactorSet{}, FactorSet{true, false, false}, FactorSet{false, true, false},
          FactorSet{false, false, true}, FactorSet{true, true, false}, FactorSet{true, false, true},
          FactorSet{false, true, true}, FactorSet{true, true, true}};
}

inline ModelSelection select_model(const std::vector<DayObservation>& obs,
                                   std::optional<int> reference_year = std::nullopt) {
  ModelSelection sel;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& f : factor_sets_in_preference_order()) {
    auto r = cv_mse(obs, f, reference_year);
    sel.cv_mse[static_cast<std::size_t>(f.model_number() - 1)] = r.cv_mse;
    for (auto& w : r.warnings) sel.warnings.push_back("model " + std::to_string(f.model_number()) + ": " + w);
    // Strictly better beyond rounding noise; equal values keep the earlier (simpler) model.
    const double tol = 1e-9 * std::max(std::abs(best), std::abs(r.cv_mse)) + 1e-12;
    if (!std::isfinite(best) || r.cv_mse < best - tol) {
      best = r.cv_mse;
      sel.chosen = f;
    }
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Model persistence (versioned text format)
// ---------------------------------------------------------------------------

inline void write_model(std::ostream& out, const RegressionModel& m) {
  out << "bikedepth-regression-model 1\n";
  out << "terminal " << m.terminal << '\n';
  out << "factors " << to_string(m.factors) << '\n';
  out << "reference_year " << m.reference_year << '\n';
  auto curve = [&](const Curve& c) {
    for (double v : c) out << ' ' << format_double(v);
    out << '\n';
  };
  out << "intercept";
  curve(m.intercept);
  for (std::size_t j = 0; j < m.levels.size(); ++j) {
    out << "coef " << to_string(m.levels[j]);
    curve(m.coefficients[j]);
  }
  for (const auto& l : m.dropped) out << "dropped " << to_string(l) << '\n';
}

inline RegressionModel read_model(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != "bikedepth-regression-model 1")
    throw DataError("unsupported regression model file version");
  RegressionModel m;
  auto parse_level = [](const std::string& s) {
    const auto colon = s.find(':');
    if (colon == std::string::npos) throw DataError("bad level '" + s + "'");
    const std::string f = s.substr(0, colon);
    Level l;
    l.factor = f == "day" ? Factor::day : f == "month" ? Factor::month : Factor::year;
    l.value = std::stoi(s.substr(colon + 1));
    return l;
  };
  auto read_curve = [](std::istringstream& ss) {
    Curve c{};
    for (auto& v : c)
      if (!(ss >> v)) throw DataError("short coefficient curve");
    return c;
  };
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "terminal") {
      std::getline(ss >> std::ws, m.terminal);
    } else if (key == "factors") {
      std::string f;
      ss >> f;
      m.factors = parse_factor_set(f);
    } else if (key == "reference_year") {
      ss >> m.reference_year;
    } else if (key == "intercept") {
      m.intercept = read_curve(ss);
    } else if (key == "coef") {
      std::string l;
      ss >> l;
      m.levels.push_back(parse_level(l));
      m.coefficients.push_back(read_curve(ss));
    } else if (key == "dropped") {
      std::string l;
      ss >> l;
      m.dropped.push_back(parse_level(l));
    }
  }
  return m;
}

}  // namespace bikedepth
