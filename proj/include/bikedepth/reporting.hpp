#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "bikedepth/clustering.hpp"
#include "bikedepth/core.hpp"
#include "bikedepth/csv.hpp"
#include "bikedepth/depth.hpp"
#include "bikedepth/detection.hpp"
#include "json.hpp"

namespace bikedepth {

/// A cluster-day exceedance with its severity (absent when the cluster has no fitted model).
struct ScoredClusterDay {
  ClusterDayExceedance exceedance;
  std::optional<double> severity;
};

// ---------------------------------------------------------------------------
// Alert list
// ---------------------------------------------------------------------------

struct AlertEntry {
  std::size_t rank = 0;
  Date date;
  TerminalId cluster;
  std::optional<double> severity;
  double z_n = 0.0;
  Direction direction = Direction::positive;
  std::vector<TerminalId> detected;    // members flagged that day
  std::vector<TerminalId> co_cluster;  // remaining members
};

/// Ranks the day's outlier clusters by severity (descending, ties by cluster id). Clusters without
/// a severity model follow, ranked by raw z_n.
inline std::vector<AlertEntry> alert_list(const Date& date, const std::vector<ScoredClusterDay>& days,
                                          const std::map<TerminalId, std::vector<TerminalId>>& members) {
  std::vector<const ScoredClusterDay*> rows;
  for (const auto& d : days)
    if (d.exceedance.date == date && d.exceedance.is_outlier()) rows.push_back(&d);
  std::sort(rows.begin(), rows.end(), [](const ScoredClusterDay* x, const ScoredClusterDay* y) {
    if (x->severity.has_value() != y->severity.has_value()) return x->severity.has_value();
    if (x->severity && *x->severity != *y->severity) return *x->severity > *y->severity;
    if (!x->severity && x->exceedance.z_n != y->exceedance.z_n) return x->exceedance.z_n > y->exceedance.z_n;
    return x->exceedance.cluster < y->exceedance.cluster;
  });
  std::vector<AlertEntry> out;
  for (const auto* r : rows) {
    AlertEntry e;
    e.rank = out.size() + 1;
    e.date = date;
    e.cluster = r->exceedance.cluster;
    e.severity = r->severity;
    e.z_n = r->exceedance.z_n;
    e.direction = r->exceedance.direction.value_or(Direction::positive);
    e.detected = r->exceedance.contributors;
    if (auto it = members.find(e.cluster); it != members.end())
      for (const auto& t : it->second)
        if (std::find(e.detected.begin(), e.detected.end(), t) == e.detected.end()) e.co_cluster.push_back(t);
    out.push_back(std::move(e));
  }
  return out;
}

inline std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? sep : "") + v[i];
  return s;
}

inline void write_alerts_csv(std::ostream& out, const std::vector<AlertEntry>& alerts) {
  out << "rank,date,cluster,severity,z_n,direction,detected_terminals,co_cluster_terminals\n";
  for (const auto& a : alerts) {
    csv::write_row(out, {std::to_string(a.rank), to_string(a.date), a.cluster,
                         a.severity ? format_double(*a.severity) : std::string("NA"), format_double(a.z_n),
                         a.direction == Direction::positive ? "up" : "down", join(a.detected, " "),
                         join(a.co_cluster, " ")});
  }
}

inline nlohmann::json alerts_json(const std::vector<AlertEntry>& alerts) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& a : alerts) {
    arr.push_back({{"rank", a.rank},
                   {"date", to_string(a.date)},
                   {"cluster", a.cluster},
                   {"severity", a.severity ? nlohmann::json(*a.severity) : nlohmann::json(nullptr)},
                   {"z_n", a.z_n},
                   {"direction", to_string(a.direction)},
                   {"arrow", a.direction == Direction::positive ? "↑" : "↓"},
                   {"detected", a.detected},
                   {"co_cluster", a.co_cluster}});
  }
  return arr;
}

// ---------------------------------------------------------------------------
// Spatiotemporal heatmap
// ---------------------------------------------------------------------------

enum class ClusterOrder { distance, north_south, west_east };

inline ClusterOrder parse_cluster_order(const std::string& s) {
  if (s == "distance") return ClusterOrder::distance;
  if (s == "north_south") return ClusterOrder::north_south;
  if (s == "west_east") return ClusterOrder::west_east;
  throw ArgumentError("unknown cluster order '" + s + "'");
}

/// Sorts cluster ids by centroid position: distance to `center` ascending, latitude descending,
/// or longitude ascending. Ties fall back to cluster id.
inline std::vector<TerminalId> order_clusters(const std::map<TerminalId, GeoPoint>& centroids, const GeoPoint& center,
                                              ClusterOrder order) {
  std::vector<std::pair<double, TerminalId>> keyed;
  for (const auto& [c, p] : centroids) {
    double key = 0;
    switch (order) {
      case ClusterOrder::distance: key = haversine_m(center.lat, center.lon, p.lat, p.lon); break;
      case ClusterOrder::north_south: key = -p.lat; break;
      case ClusterOrder::west_east: key = p.lon; break;
    }
    keyed.emplace_back(key, c);
  }
  std::sort(keyed.begin(), keyed.end());
  std::vector<TerminalId> out;
  for (auto& [k, c] : keyed) out.push_back(c);
  return out;
}

struct HeatmapCell {
  bool outlier = false;
  std::optional<double> severity;
  std::optional<Direction> direction;
};

struct Heatmap {
  std::vector<Date> dates;
  std::vector<TerminalId> clusters;
  std::vector<std::vector<HeatmapCell>> cells;  // [date][cluster]
};

inline Heatmap severity_heatmap(const DateRange& range, const std::vector<TerminalId>& ordered_clusters,
                                const std::vector<ScoredClusterDay>& days) {
  Heatmap h;
  h.dates = range.dates();
  h.clusters = ordered_clusters;
  std::map<TerminalId, std::size_t> col;
  for (std::size_t j = 0; j < ordered_clusters.size(); ++j) col[ordered_clusters[j]] = j;
  h.cells.assign(h.dates.size(), std::vector<HeatmapCell>(ordered_clusters.size()));
  for (const auto& d : days) {
    if (!d.exceedance.is_outlier() || !range.contains(d.exceedance.date)) continue;
    auto it = col.find(d.exceedance.cluster);
    if (it == col.end()) continue;
    const auto row = static_cast<std::size_t>((to_days(d.exceedance.date) - to_days(range.first)).count());
    h.cells[row][it->second] = {true, d.severity, d.exceedance.direction};
  }
  return h;
}

/// CSV matrix: rows are dates, columns clusters; blank = no outlier, NA = severity unavailable.
inline void write_heatmap_csv(std::ostream& out, const Heatmap& h) {
  out << "date";
  for (const auto& c : h.clusters) out << ',' << csv::quote(c);
  out << '\n';
  for (std::size_t i = 0; i < h.dates.size(); ++i) {
    out << to_string(h.dates[i]);
    for (const auto& cell : h.cells[i]) {
      out << ',';
      if (cell.outlier) out << (cell.severity ? format_double(*cell.severity) : std::string("NA"));
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Time series and counts
// ---------------------------------------------------------------------------

struct PosNegDay {
  Date date;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

inline std::vector<PosNegDay> pos_neg_series(const DateRange& range, const std::vector<ScoredClusterDay>& days) {
  std::vector<PosNegDay> out;
  for (const auto& d : range.dates()) out.push_back({d, 0, 0});
  for (const auto& d : days) {
    if (!d.exceedance.is_outlier() || !range.contains(d.exceedance.date)) continue;
    auto& row = out[static_cast<std::size_t>((to_days(d.exceedance.date) - to_days(range.first)).count())];
    if (d.exceedance.direction.value_or(Direction::positive) == Direction::positive) ++row.positive;
    else ++row.negative;
  }
  return out;
}

/// Days with z_{n,s} > 0 per terminal; terminals never flagged are omitted.
inline std::map<TerminalId, std::size_t> terminal_outlier_counts(const DateRange& range,
                                                                 const std::vector<DepthRecord>& records) {
  std::map<TerminalId, std::size_t> out;
  for (const auto& r : records)
    if (range.contains(r.date) && r.flagged()) ++out[r.terminal];
  return out;
}

/// u.v / (|u||v|); undefined when either vector is zero.
inline std::optional<double> cosine_similarity(const std::vector<double>& u, const std::vector<double>& v) {
  if (u.size() != v.size()) throw ArgumentError("cosine similarity needs equal-length vectors");
  double dot = 0, nu = 0, nv = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    nu += u[i] * u[i];
    nv += v[i] * v[i];
  }
  if (nu <= 0 || nv <= 0) return std::nullopt;
  return dot / (std::sqrt(nu) * std::sqrt(nv));
}

// ---------------------------------------------------------------------------
// Weather cross-tabulation
// ---------------------------------------------------------------------------

struct WeatherDay {
  Date date;
  double temperature_f = 0.0;
  double precipitation_in = 0.0;
};

struct WeatherSchema {
  std::string date = "datetime";
  std::string temperature = "temp";
  std::string precipitation = "precip";
  std::string units = "us";  // "us": degF + inches, "metric": degC + mm
};

struct WeatherParseResult {
  std::vector<WeatherDay> days;
  std::vector<RowError> errors;
};

inline WeatherParseResult parse_weather(std::istream& in, const WeatherSchema& schema = {}) {
  if (schema.units != "us" && schema.units != "metric") throw ConfigError("weather units must be 'us' or 'metric'");
  csv::Reader reader(in);
  const auto c_date = reader.require(schema.date);
  const auto c_temp = reader.require(schema.temperature);
  const auto c_prec = reader.require(schema.precipitation);
  const std::size_t needed = std::max({c_date, c_temp, c_prec}) + 1;
  WeatherParseResult out;
  std::map<Date, bool> seen;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() < needed) {
      out.errors.push_back({reader.line_number(), "too few fields"});
      continue;
    }
    auto d = parse_date(row[c_date]);
    if (!d) {
      out.errors.push_back({reader.line_number(), "bad date"});
      continue;
    }
    WeatherDay w{*d, 0, 0};
    try {
      w.temperature_f = std::stod(row[c_temp]);
      w.precipitation_in = row[c_prec].empty() ? 0.0 : std::stod(row[c_prec]);
    } catch (const std::exception&) {
      out.errors.push_back({reader.line_number(), "bad number"});
      continue;
    }
    if (schema.units == "metric") {
      w.temperature_f = w.temperature_f * 9.0 / 5.0 + 32.0;
      w.precipitation_in /= 25.4;
    }
    if (seen[*d]) {
      out.errors.push_back({reader.line_number(), "duplicate date"});
      continue;
    }
    seen[*d] = true;
    out.days.push_back(w);
  }
  return out;
}

struct SeverityBins {
  std::vector<double> temperature_edges{15, 20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70, 75, 80, 85, 90, 95};
  std::vector<double> precipitation_edges{0, 0.01, 0.1, 0.5, 1, 2};
  std::vector<double> severity_edges{0, 0.25, 0.5, 0.75, 1};
};

struct CrossTab {
  std::vector<std::string> rows;
  std::vector<std::string> columns;              // first column is "no outlier"
  std::vector<std::vector<std::size_t>> counts;  // [row][column]
  std::vector<std::vector<double>> proportions;  // rows sum to 1 when nonempty
};

struct DaySeverity {
  Date date;
  std::optional<double> max_severity;           // over all outlier clusters that day
  std::optional<double> max_negative_severity;  // over negative outlier clusters
};

struct WeatherCrossTabs {
  CrossTab temperature;    // all outliers
  CrossTab precipitation;  // negative outliers only
  std::size_t missing_weather = 0;
};

namespace detail {

/// Edges e0 < ... < ek give bins "<e0", "[e0,e1)", ..., ">=ek".
inline std::size_t open_bin(const std::vector<double>& edges, double x) {
  return static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), x) - edges.begin());
}

inline std::vector<std::string> open_bin_labels(const std::vector<double>& edges) {
  std::vector<std::string> out{"<" + format_double(edges.front())};
  for (std::size_t i = 0; i + 1 < edges.size(); ++i)
    out.push_back("[" + format_double(edges[i]) + "," + format_double(edges[i + 1]) + ")");
  out.push_back(">=" + format_double(edges.back()));
  return out;
}

/// Severity column: 0 = no outlier; k >= 1 for theta in (e_{k-1}, e_k] (theta <= e_1 maps to 1).
inline std::size_t severity_column(const std::vector<double>& edges, std::optional<double> theta) {
  if (!theta) return 0;
  for (std::size_t k = 1; k < edges.size(); ++k)
    if (*theta <= edges[k]) return k;
  return edges.size() - 1;
}

inline CrossTab make_crosstab(const std::vector<double>& row_edges, const std::vector<double>& sev_edges) {
  CrossTab t;
  t.rows = open_bin_labels(row_edges);
  t.columns.push_back("no outlier");
  for (std::size_t k = 0; k + 1 < sev_edges.size(); ++k)
    t.columns.push_back("(" + format_double(sev_edges[k]) + "," + format_double(sev_edges[k + 1]) + "]");
  t.counts.assign(t.rows.size(), std::vector<std::size_t>(t.columns.size(), 0));
  return t;
}

inline void finish(CrossTab& t) {
  t.proportions.assign(t.rows.size(), std::vector<double>(t.columns.size(), 0.0));
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    std::size_t total = 0;
    for (auto c : t.counts[i]) total += c;
    if (total == 0) continue;
    for (std::size_t j = 0; j < t.columns.size(); ++j)
      t.proportions[i][j] = static_cast<double>(t.counts[i][j]) / static_cast<double>(total);
  }
}

}  // namespace detail

inline WeatherCrossTabs weather_crosstab(const std::vector<DaySeverity>& days, const std::vector<WeatherDay>& weather,
                                         const SeverityBins& bins = {}) {
  auto sorted = [](const std::vector<double>& v) { return !v.empty() && std::is_sorted(v.begin(), v.end()); };
  if (!sorted(bins.temperature_edges) || !sorted(bins.precipitation_edges) || bins.severity_edges.size() < 2 ||
      !sorted(bins.severity_edges))
    throw ArgumentError("bin edges must be nonempty and sorted");
  std::map<Date, const WeatherDay*> by_date;
  for (const auto& w : weather) by_date[w.date] = &w;
  WeatherCrossTabs out{detail::make_crosstab(bins.temperature_edges, bins.severity_edges),
                       detail::make_crosstab(bins.precipitation_edges, bins.severity_edges), 0};
  for (const auto& d : days) {
    auto it = by_date.find(d.date);
    if (it == by_date.end()) {
      ++out.missing_weather;
      continue;
    }
    const auto& w = *it->second;
    ++out.temperature.counts[detail::open_bin(bins.temperature_edges, w.temperature_f)]
                             [detail::severity_column(bins.severity_edges, d.max_severity)];
    ++out.precipitation.counts[detail::open_bin(bins.precipitation_edges, w.precipitation_in)]
                               [detail::severity_column(bins.severity_edges, d.max_negative_severity)];
  }
  detail::finish(out.temperature);
  detail::finish(out.precipitation);
  return out;
}

inline nlohmann::json crosstab_json(const CrossTab& t) {
  return {{"rows", t.rows}, {"columns", t.columns}, {"counts", t.counts}, {"proportions", t.proportions}};
}

}  // namespace bikedepth
