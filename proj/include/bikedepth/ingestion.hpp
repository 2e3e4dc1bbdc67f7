#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bikedepth/core.hpp"
#include "bikedepth/csv.hpp"

namespace bikedepth {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct TripRecord {
  Timestamp pickup_time;
  Timestamp dropoff_time;
  TerminalId origin_terminal;
  TerminalId dest_terminal;
  std::int64_t duration_seconds = 0;

  bool operator==(const TripRecord&) const = default;
};

struct Terminal {
  TerminalId id;
  double latitude = 0.0;
  double longitude = 0.0;
  std::optional<Date> first_active_date;
};

enum class CurveKind { usage, pickup, dropoff };

inline std::string to_string(CurveKind k) {
  switch (k) {
    case CurveKind::usage: return "usage";
    case CurveKind::pickup: return "pickup";
    case CurveKind::dropoff: return "dropoff";
  }
  return "usage";
}

inline CurveKind parse_curve_kind(const std::string& s) {
  if (s == "usage") return CurveKind::usage;
  if (s == "pickup") return CurveKind::pickup;
  if (s == "dropoff") return CurveKind::dropoff;
  throw ConfigError("unknown curve kind '" + s + "'");
}

struct DailyCurve {
  TerminalId terminal;
  Date date;
  CurveKind kind = CurveKind::usage;
  HourlyCounts counts{};

  int total() const {
    int s = 0;
    for (int c : counts) s += c;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

/// Column names in the trip file. Defaults follow the public Capital Bikeshare export.
struct TripSchema {
  std::string pickup_time = "Start date";
  std::string dropoff_time = "End date";
  std::string origin_terminal = "Start station number";
  std::string dest_terminal = "End station number";
};

struct StationSchema {
  std::string id = "id";
  std::string latitude = "latitude";
  std::string longitude = "longitude";
};

struct RowError {
  std::size_t line = 0;
  std::string message;
};

struct TripParseResult {
  std::vector<TripRecord> trips;
  std::vector<RowError> errors;
};

/// One record per valid row, in input order. Malformed rows are reported with their line number.
/// Throws ConfigError when a mapped column is missing from the header.
inline TripParseResult parse_trips(std::istream& source, const TripSchema& schema = {}) {
  csv::Reader reader(source);
  const std::size_t c_pick = reader.require(schema.pickup_time);
  const std::size_t c_drop = reader.require(schema.dropoff_time);
  const std::size_t c_orig = reader.require(schema.origin_terminal);
  const std::size_t c_dest = reader.require(schema.dest_terminal);
  const std::size_t needed = std::max({c_pick, c_drop, c_orig, c_dest}) + 1;

  TripParseResult out;
  std::vector<std::string> row;
  while (reader.next(row)) {
    const std::size_t line = reader.line_number();
    if (row.size() < needed) {
      out.errors.push_back({line, "too few fields"});
      continue;
    }
    auto pick = parse_timestamp(row[c_pick]);
    auto drop = parse_timestamp(row[c_drop]);
    if (!pick || !drop) {
      out.errors.push_back({line, "unparseable timestamp"});
      continue;
    }
    if (*drop < *pick) {
      out.errors.push_back({line, "drop-off before pick-up"});
      continue;
    }
    if (row[c_orig].empty() || row[c_dest].empty()) {
      out.errors.push_back({line, "empty terminal id"});
      continue;
    }
    out.trips.push_back({*pick, *drop, row[c_orig], row[c_dest], (*drop - *pick).count()});
  }
  return out;
}

struct StationParseResult {
  std::vector<Terminal> terminals;
  std::vector<RowError> errors;
};

inline StationParseResult parse_stations(std::istream& source, const StationSchema& schema = {}) {
  csv::Reader reader(source);
  const std::size_t c_id = reader.require(schema.id);
  const std::size_t c_lat = reader.require(schema.latitude);
  const std::size_t c_lon = reader.require(schema.longitude);
  const std::size_t needed = std::max({c_id, c_lat, c_lon}) + 1;

  StationParseResult out;
  std::set<TerminalId> seen;
  std::vector<std::string> row;
  while (reader.next(row)) {
    const std::size_t line = reader.line_number();
    if (row.size() < needed || row[c_id].empty()) {
      out.errors.push_back({line, "malformed station row"});
      continue;
    }
    double lat = 0, lon = 0;
    try {
      lat = std::stod(row[c_lat]);
      lon = std::stod(row[c_lon]);
    } catch (const std::exception&) {
      out.errors.push_back({line, "unparseable coordinate"});
      continue;
    }
    if (lat < -90 || lat > 90 || lon < -180 || lon > 180) {
      out.errors.push_back({line, "coordinate out of bounds"});
      continue;
    }
    if (!seen.insert(row[c_id]).second) {
      out.errors.push_back({line, "duplicate station id"});
      continue;
    }
    out.terminals.push_back({row[c_id], lat, lon, std::nullopt});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cleansing
// ---------------------------------------------------------------------------

struct CleanseResult {
  std::vector<TripRecord> trips;
  std::map<TerminalId, Date> first_active;
  std::size_t removed_short = 0;
};

/// Drops trips shorter than `min_duration_s` (strict) and records each terminal's first
/// appearance across `prior_history` and the retained trips.
inline CleanseResult cleanse_trips(const std::vector<TripRecord>& trips,
                                   std::int64_t min_duration_s = 60,
                                   const std::vector<TripRecord>* prior_history = nullptr) {
  if (min_duration_s < 0) throw ArgumentError("min_duration_s must be nonnegative");
  CleanseResult out;
  auto touch = [&](const TerminalId& id, const Date& d) {
    auto [it, inserted] = out.first_active.try_emplace(id, d);
    if (!inserted && d < it->second) it->second = d;
  };
  if (prior_history) {
    for (const auto& t : *prior_history) {
      touch(t.origin_terminal, date_of(t.pickup_time));
      touch(t.dest_terminal, date_of(t.dropoff_time));
    }
  }
  out.trips.reserve(trips.size());
  for (const auto& t : trips) {
    if (t.duration_seconds < min_duration_s) {
      ++out.removed_short;
      continue;
    }
    out.trips.push_back(t);
    touch(t.origin_terminal, date_of(t.pickup_time));
    touch(t.dest_terminal, date_of(t.dropoff_time));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

struct AggregateResult {
  std::vector<DailyCurve> curves;  // sorted by (terminal, date)
  std::size_t dropped_events = 0;  // events at terminals outside `first_active`
};

/// Bins pick-up / drop-off events by hour of day per terminal-day. A curve exists for every
/// date in `range` on or after the terminal's first active date (all-zero when idle).
inline AggregateResult aggregate_daily_curves(const std::vector<TripRecord>& trips, CurveKind kind,
                                              const DateRange& range,
                                              const std::map<TerminalId, Date>& first_active) {
  if (range.last < range.first) throw ArgumentError("date range ends before it starts");
  const auto origin = to_days(range.first);
  const std::size_t ndays = range.days();

  std::map<TerminalId, std::vector<HourlyCounts>> grid;
  for (const auto& [id, first] : first_active) grid[id].assign(ndays, HourlyCounts{});

  AggregateResult out;
  auto add = [&](const TerminalId& id, Timestamp t) {
    auto it = grid.find(id);
    if (it == grid.end()) {
      ++out.dropped_events;
      return;
    }
    const auto day = std::chrono::floor<std::chrono::days>(t);
    const auto offset = (day - origin).count();
    if (offset < 0 || static_cast<std::size_t>(offset) >= ndays) return;
    ++it->second[static_cast<std::size_t>(offset)][static_cast<std::size_t>(hour_of(t))];
  };
  for (const auto& t : trips) {
    if (kind != CurveKind::dropoff) add(t.origin_terminal, t.pickup_time);
    if (kind != CurveKind::pickup) add(t.dest_terminal, t.dropoff_time);
  }

  for (const auto& [id, days] : grid) {
    const Date first = first_active.at(id);
    for (std::size_t i = 0; i < ndays; ++i) {
      Date d{origin + std::chrono::days{static_cast<int>(i)}};
      if (d < first) continue;
      out.curves.push_back({id, d, kind, days[i]});
    }
  }
  return out;
}

struct TerminalSummary {
  double mean_annual_usage = 0.0;
  long long total_usage = 0;
  std::size_t active_days = 0;
};

inline std::map<TerminalId, TerminalSummary> terminal_summary(const std::vector<DailyCurve>& curves) {
  std::map<TerminalId, TerminalSummary> out;
  for (const auto& c : curves) {
    auto& s = out[c.terminal];
    s.total_usage += c.total();
    ++s.active_days;
  }
  for (auto& [id, s] : out) {
    const double years = static_cast<double>(s.active_days) / 365.25;
    s.mean_annual_usage = years > 0 ? static_cast<double>(s.total_usage) / years : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curve store: one CSV per kind per year, columns terminal,date,h00..h23
// ---------------------------------------------------------------------------

inline std::string curve_store_header() {
  std::string h = "terminal,date";
  char buf[8];
  for (std::size_t i = 0; i < kHours; ++i) {
    std::snprintf(buf, sizeof buf, ",h%02zu", i);
    h += buf;
  }
  return h;
}

/// Writes curves (any mix of kinds/years) and returns the file paths written, sorted.
inline std::vector<std::string> write_curve_store(const std::filesystem::path& dir,
                                                  const std::vector<DailyCurve>& curves) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::vector<const DailyCurve*>> files;
  for (const auto& c : curves)
    files["curves_" + to_string(c.kind) + "_" + std::to_string(year_of(c.date)) + ".csv"].push_back(&c);
  std::vector<std::string> written;
  for (auto& [name, rows] : files) {
    std::stable_sort(rows.begin(), rows.end(), [](const DailyCurve* a, const DailyCurve* b) {
      return a->terminal != b->terminal ? a->terminal < b->terminal : a->date < b->date;
    });
    std::ofstream out(dir / name, std::ios::binary);
    out << curve_store_header() << '\n';
    for (const DailyCurve* c : rows) {
      out << csv::quote(c->terminal) << ',' << to_string(c->date);
      for (int v : c->counts) out << ',' << v;
      out << '\n';
    }
    written.push_back((dir / name).string());
  }
  return written;
}

inline std::vector<DailyCurve> read_curve_store(const std::filesystem::path& dir, CurveKind kind) {
  std::vector<std::filesystem::path> paths;
  const std::string prefix = "curves_" + to_string(kind) + "_";
  if (std::filesystem::exists(dir)) {
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      const auto name = e.path().filename().string();
      if (name.rfind(prefix, 0) == 0 && e.path().extension() == ".csv") paths.push_back(e.path());
    }
  }
  std::sort(paths.begin(), paths.end());
  std::vector<DailyCurve> out;
  for (const auto& p : paths) {
    std::ifstream in(p);
    csv::Reader reader(in);
    std::vector<std::string> row;
    while (reader.next(row)) {
      if (row.size() != kHours + 2) throw DataError("malformed curve store row in " + p.string());
      DailyCurve c;
      c.terminal = row[0];
      auto d = parse_date(row[1]);
      if (!d) throw DataError("bad date in curve store " + p.string());
      c.date = *d;
      c.kind = kind;
      for (std::size_t h = 0; h < kHours; ++h) c.counts[h] = std::stoi(row[h + 2]);
      out.push_back(std::move(c));
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const DailyCurve& a, const DailyCurve& b) {
    return a.terminal != b.terminal ? a.terminal < b.terminal : a.date < b.date;
  });
  return out;
}

inline void write_terminals(const std::filesystem::path& path, const std::vector<Terminal>& terminals) {
  std::ofstream out(path, std::ios::binary);
  out << "id,latitude,longitude,first_active_date\n";
  for (const auto& t : terminals) {
    out << csv::quote(t.id) << ',' << format_double(t.latitude) << ',' << format_double(t.longitude)
        << ',' << (t.first_active_date ? to_string(*t.first_active_date) : std::string()) << '\n';
  }
}

inline std::vector<Terminal> read_terminals(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  csv::Reader reader(in);
  std::vector<Terminal> out;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() < 3) throw DataError("malformed terminal row");
    Terminal t{row[0], std::stod(row[1]), std::stod(row[2]), std::nullopt};
    if (row.size() > 3 && !row[3].empty()) t.first_active_date = parse_date(row[3]);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace bikedepth
