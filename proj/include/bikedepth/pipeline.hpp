#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bikedepth/baseline.hpp"
#include "bikedepth/clustering.hpp"
#include "bikedepth/core.hpp"
#include "bikedepth/csv.hpp"
#include "bikedepth/depth.hpp"
#include "bikedepth/detection.hpp"
#include "bikedepth/diagnostics.hpp"
#include "bikedepth/hashing.hpp"
#include "bikedepth/ingestion.hpp"
#include "bikedepth/reporting.hpp"
#include "bikedepth/severity.hpp"
#include "json.hpp"

namespace bikedepth {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kDataRootEnv = "BIKEDEPTH_DATA_ROOT";

// Exit codes shared by the CLI and the manifest.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;
inline constexpr int kExitAudit = 5;

// ---------------------------------------------------------------------------
// Deterministic parallel loop
// ---------------------------------------------------------------------------

/// Runs f(0..n-1) on up to `threads` workers. Callers write results by index, so output does not
/// depend on scheduling. The exception from the lowest failing index is rethrown.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = n;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        f(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < std::min<std::size_t>(threads, n); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ClusterParams {
  double rho = 0.15;
  GraphParams graph;
};

struct PipelineConfig {
  fs::path data_root;
  std::vector<fs::path> trips;
  fs::path stations;
  std::optional<fs::path> prior_history;
  std::optional<fs::path> weather;
  TripSchema trip_columns;
  StationSchema station_columns;
  WeatherSchema weather_columns;

  std::int64_t min_duration_s = 60;
  std::optional<Date> start;
  std::optional<Date> end;
  std::vector<CurveKind> kinds{CurveKind::usage};

  std::string factor_policy = "cv-select";  // or "fixed"
  FactorSet factors{true, true, true};      // used when the policy is fixed
  std::optional<int> reference_year;
  SeasonBoundaries seasons;
  bool log_transform = false;
  double log_offset = 1.0;

  ClusterParams clustering;
  ThresholdOptions threshold;
  std::uint64_t seed = 20240601;

  BetaFitOptions severity;
  SeverityBins bins;
  ClusterOrder order = ClusterOrder::distance;
  SweepGrid sweep{{-1.0, 0.0, 0.1, 0.15, 0.2, 0.3, 0.5, 1.0}, {5000.0}, {500.0}, {1000.0}};

  fs::path cache_dir = "cache";
  fs::path output_dir = "run";
  double audit_fraction = 0.05;
  bool audit = false;
  unsigned threads = 1;
};

namespace detail {

/// Reads an object while tracking which keys were consumed, so typos surface as errors.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <class T>
  std::optional<T> get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return std::nullopt;
    try {
      return it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <class T>
  void read(const std::string& key, T& out) {
    if (auto v = get<T>(key)) out = *v;
  }

  std::optional<ObjectReader> child(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return std::nullopt;
    return ObjectReader(*it, where_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where_ + "." + it.key());
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

inline void parse_month_day(const std::string& s, unsigned& month, unsigned& day) {
  int m = 0, d = 0;
  if (s.size() != 5 || s[2] != '-' || !parse_uint(s.substr(0, 2), m) || !parse_uint(s.substr(3, 2), d) ||
      !std::chrono::month_day{std::chrono::month{static_cast<unsigned>(m)}, std::chrono::day{static_cast<unsigned>(d)}}.ok())
    throw ConfigError("season boundary '" + s + "' must be MM-DD");
  month = static_cast<unsigned>(m);
  day = static_cast<unsigned>(d);
}

inline std::string month_day_string(unsigned m, unsigned d) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "%02u-%02u", m, d);
  return buf;
}

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

inline bool sorted_nonempty(const std::vector<double>& v) {
  return !v.empty() && std::is_sorted(v.begin(), v.end()) && std::adjacent_find(v.begin(), v.end()) == v.end();
}

}  // namespace detail

/// Builds a config from JSON. Relative data paths resolve against the data root (the
/// BIKEDEPTH_DATA_ROOT environment variable, else "data.root", else `base_dir`); cache and
/// output directories resolve against `base_dir`.
inline PipelineConfig config_from_json(const json& j, const fs::path& base_dir = fs::current_path(),
                                       bool check_paths = true) {
  PipelineConfig c;
  detail::ObjectReader top(j, "config");

  fs::path root = base_dir;
  std::optional<std::string> trips_one;
  std::optional<std::vector<std::string>> trips_many;
  std::optional<std::string> stations, prior, weather;
  if (auto data = top.child("data")) {
    if (auto r = data->get<std::string>("root")) root = fs::path(*r).is_absolute() ? fs::path(*r) : base_dir / *r;
    const json* tj = nullptr;
    if (j.contains("data") && j["data"].contains("trips")) tj = &j["data"]["trips"];
    if (tj && tj->is_string()) trips_one = data->get<std::string>("trips");
    else trips_many = data->get<std::vector<std::string>>("trips");
    stations = data->get<std::string>("stations");
    prior = data->get<std::string>("prior_history");
    weather = data->get<std::string>("weather");
    data->finish();
  }
  if (const char* env = std::getenv(kDataRootEnv); env && *env) root = env;
  c.data_root = fs::absolute(root).lexically_normal();
  auto resolve = [&](const std::string& p) {
    const fs::path q(p);
    return (q.is_absolute() ? q : c.data_root / q).lexically_normal();
  };
  if (trips_one) c.trips.push_back(resolve(*trips_one));
  if (trips_many)
    for (const auto& t : *trips_many) c.trips.push_back(resolve(t));
  detail::require(!c.trips.empty(), "data.trips must name at least one trip file");
  detail::require(stations.has_value(), "data.stations is required");
  c.stations = resolve(*stations);
  if (prior) c.prior_history = resolve(*prior);
  if (weather) c.weather = resolve(*weather);
  if (check_paths) {
    std::vector<fs::path> all = c.trips;
    all.push_back(c.stations);
    if (c.prior_history) all.push_back(*c.prior_history);
    if (c.weather) all.push_back(*c.weather);
    for (const auto& p : all) detail::require(fs::is_regular_file(p), "data file not found: " + p.string());
  }

  if (auto cols = top.child("columns")) {
    if (auto t = cols->child("trips")) {
      t->read("pickup_time", c.trip_columns.pickup_time);
      t->read("dropoff_time", c.trip_columns.dropoff_time);
      t->read("origin_terminal", c.trip_columns.origin_terminal);
      t->read("dest_terminal", c.trip_columns.dest_terminal);
      t->finish();
    }
    if (auto s = cols->child("stations")) {
      s->read("id", c.station_columns.id);
      s->read("latitude", c.station_columns.latitude);
      s->read("longitude", c.station_columns.longitude);
      s->finish();
    }
    if (auto w = cols->child("weather")) {
      w->read("date", c.weather_columns.date);
      w->read("temperature", c.weather_columns.temperature);
      w->read("precipitation", c.weather_columns.precipitation);
      w->read("units", c.weather_columns.units);
      w->finish();
    }
    cols->finish();
  }
  detail::require(c.weather_columns.units == "us" || c.weather_columns.units == "metric",
                  "columns.weather.units must be 'us' or 'metric'");

  if (auto in = top.child("ingest")) {
    in->read("min_duration_s", c.min_duration_s);
    auto date_field = [&](const std::string& key, std::optional<Date>& out) {
      if (auto s = in->get<std::string>(key)) {
        out = parse_date(*s);
        detail::require(out.has_value() && s->size() == 10, "ingest." + key + " must be YYYY-MM-DD");
      }
    };
    date_field("start", c.start);
    date_field("end", c.end);
    in->finish();
  }
  detail::require(c.min_duration_s >= 0, "ingest.min_duration_s must be >= 0");
  detail::require(!(c.start && c.end && *c.end < *c.start), "ingest.end precedes ingest.start");

  if (auto kinds = top.get<std::vector<std::string>>("kinds")) {
    c.kinds.clear();
    for (const auto& k : *kinds) {
      try {
        c.kinds.push_back(parse_curve_kind(k));
      } catch (const std::exception&) {
        throw ConfigError("unknown curve kind '" + k + "'");
      }
    }
  }
  detail::require(!c.kinds.empty(), "kinds must be nonempty");
  detail::require(std::set<CurveKind>(c.kinds.begin(), c.kinds.end()).size() == c.kinds.size(), "kinds repeat");

  if (auto b = top.child("baseline")) {
    b->read("policy", c.factor_policy);
    if (auto f = b->get<std::string>("factors")) {
      try {
        c.factors = parse_factor_set(*f);
      } catch (const std::exception&) {
        throw ConfigError("baseline.factors: cannot parse '" + *f + "'");
      }
    }
    if (auto y = b->get<int>("reference_year")) c.reference_year = *y;
    b->read("log_transform", c.log_transform);
    b->read("log_offset", c.log_offset);
    if (auto s = b->child("season")) {
      if (auto v = s->get<std::string>("summer_start"))
        detail::parse_month_day(*v, c.seasons.summer_start_month, c.seasons.summer_start_day);
      if (auto v = s->get<std::string>("summer_end"))
        detail::parse_month_day(*v, c.seasons.summer_end_month, c.seasons.summer_end_day);
      s->finish();
    }
    b->finish();
  }
  detail::require(c.factor_policy == "cv-select" || c.factor_policy == "fixed",
                  "baseline.policy must be 'cv-select' or 'fixed'");
  detail::require(c.log_offset > 0, "baseline.log_offset must be > 0");

  if (auto cl = top.child("clustering")) {
    cl->read("rho", c.clustering.rho);
    cl->read("radius_m", c.clustering.graph.radius_m);
    cl->read("d_inner_m", c.clustering.graph.d_inner_m);
    cl->read("d_outer_m", c.clustering.graph.d_outer_m);
    cl->finish();
  }
  detail::require(c.clustering.rho >= -1 && c.clustering.rho <= 1, "clustering.rho must lie in [-1, 1]");
  detail::require(c.clustering.graph.radius_m > 0 && c.clustering.graph.d_inner_m > 0 && c.clustering.graph.d_outer_m > 0,
                  "clustering distances must be > 0");

  if (auto d = top.child("detection")) {
    if (auto m = d->get<std::string>("depth")) {
      try {
        c.threshold.method = parse_depth_method(*m);
      } catch (const ConfigError&) {
        throw ConfigError("detection.depth must be 'h_modal' or 'fraiman_muniz'");
      }
    }
    d->read("resamples", c.threshold.resamples);
    d->read("smoothing", c.threshold.smoothing);
    d->read("percentile", c.threshold.percentile);
    d->read("min_pool", c.threshold.min_pool);
    d->read("seed", c.seed);
    d->finish();
  }
  detail::require(c.threshold.resamples >= 1 && c.threshold.resamples <= 100000, "detection.resamples must be in [1, 100000]");
  detail::require(c.threshold.smoothing >= 0, "detection.smoothing must be >= 0");
  detail::require(c.threshold.percentile > 0 && c.threshold.percentile <= 0.5, "detection.percentile must be in (0, 0.5]");
  detail::require(c.threshold.min_pool >= 3, "detection.min_pool must be >= 3");

  if (auto s = top.child("severity")) {
    s->read("min_samples", c.severity.min_samples);
    s->read("temperature_edges", c.bins.temperature_edges);
    s->read("precipitation_edges", c.bins.precipitation_edges);
    s->read("severity_edges", c.bins.severity_edges);
    s->finish();
  }
  detail::require(c.severity.min_samples >= 2, "severity.min_samples must be >= 2");
  detail::require(detail::sorted_nonempty(c.bins.temperature_edges) && detail::sorted_nonempty(c.bins.precipitation_edges),
                  "weather bin edges must be strictly increasing");
  detail::require(detail::sorted_nonempty(c.bins.severity_edges) && c.bins.severity_edges.size() >= 2 &&
                      c.bins.severity_edges.front() == 0.0 && c.bins.severity_edges.back() == 1.0,
                  "severity.severity_edges must increase from 0 to 1");

  if (auto r = top.child("report")) {
    if (auto o = r->get<std::string>("order")) {
      try {
        c.order = parse_cluster_order(*o);
      } catch (const ArgumentError& e) {
        throw ConfigError(std::string("report.order: ") + e.what());
      }
    }
    r->finish();
  }

  if (auto s = top.child("sweep")) {
    s->read("rho", c.sweep.rho);
    s->read("radius_m", c.sweep.radius_m);
    s->read("d_inner_m", c.sweep.d_inner_m);
    s->read("d_outer_m", c.sweep.d_outer_m);
    s->finish();
  }
  detail::require(!c.sweep.rho.empty() && !c.sweep.radius_m.empty() && !c.sweep.d_inner_m.empty() &&
                      !c.sweep.d_outer_m.empty(),
                  "sweep grid must be nonempty in every dimension");
  for (double r : c.sweep.rho) detail::require(r >= -1 && r <= 1, "sweep.rho values must lie in [-1, 1]");
  for (const auto* v : {&c.sweep.radius_m, &c.sweep.d_inner_m, &c.sweep.d_outer_m})
    for (double x : *v) detail::require(x > 0, "sweep distances must be > 0");

  if (auto p = top.get<std::string>("cache_dir")) c.cache_dir = *p;
  if (auto p = top.get<std::string>("output_dir")) c.output_dir = *p;
  c.cache_dir = (c.cache_dir.is_absolute() ? c.cache_dir : base_dir / c.cache_dir).lexically_normal();
  c.output_dir = (c.output_dir.is_absolute() ? c.output_dir : base_dir / c.output_dir).lexically_normal();
  top.read("audit_fraction", c.audit_fraction);
  top.read("audit", c.audit);
  top.read("threads", c.threads);
  detail::require(c.audit_fraction >= 0 && c.audit_fraction <= 1, "audit_fraction must be in [0, 1]");
  detail::require(c.threads >= 1 && c.threads <= 256, "threads must be in [1, 256]");
  top.finish();
  return c;
}

inline PipelineConfig load_config(const fs::path& path, const json& overrides = json::object()) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  if (!overrides.empty()) j.merge_patch(overrides);
  return config_from_json(j, fs::absolute(path).parent_path());
}

/// Fully explicit form of the config; its hash identifies a run.
inline json config_to_json(const PipelineConfig& c) {
  std::vector<std::string> trips, kinds;
  for (const auto& t : c.trips) trips.push_back(t.string());
  for (auto k : c.kinds) kinds.push_back(to_string(k));
  auto opt_path = [](const std::optional<fs::path>& p) { return p ? json(p->string()) : json(nullptr); };
  auto opt_date = [](const std::optional<Date>& d) { return d ? json(to_string(*d)) : json(nullptr); };
  std::string order = c.order == ClusterOrder::distance ? "distance" : c.order == ClusterOrder::north_south ? "north_south" : "west_east";
  return {
      {"data",
       {{"root", c.data_root.string()},
        {"trips", trips},
        {"stations", c.stations.string()},
        {"prior_history", opt_path(c.prior_history)},
        {"weather", opt_path(c.weather)}}},
      {"columns",
       {{"trips",
         {{"pickup_time", c.trip_columns.pickup_time},
          {"dropoff_time", c.trip_columns.dropoff_time},
          {"origin_terminal", c.trip_columns.origin_terminal},
          {"dest_terminal", c.trip_columns.dest_terminal}}},
        {"stations",
         {{"id", c.station_columns.id}, {"latitude", c.station_columns.latitude}, {"longitude", c.station_columns.longitude}}},
        {"weather",
         {{"date", c.weather_columns.date},
          {"temperature", c.weather_columns.temperature},
          {"precipitation", c.weather_columns.precipitation},
          {"units", c.weather_columns.units}}}}},
      {"ingest", {{"min_duration_s", c.min_duration_s}, {"start", opt_date(c.start)}, {"end", opt_date(c.end)}}},
      {"kinds", kinds},
      {"baseline",
       {{"policy", c.factor_policy},
        {"factors", to_string(c.factors)},
        {"reference_year", c.reference_year ? json(*c.reference_year) : json(nullptr)},
        {"log_transform", c.log_transform},
        {"log_offset", c.log_offset},
        {"season",
         {{"summer_start", detail::month_day_string(c.seasons.summer_start_month, c.seasons.summer_start_day)},
          {"summer_end", detail::month_day_string(c.seasons.summer_end_month, c.seasons.summer_end_day)}}}}},
      {"clustering",
       {{"rho", c.clustering.rho},
        {"radius_m", c.clustering.graph.radius_m},
        {"d_inner_m", c.clustering.graph.d_inner_m},
        {"d_outer_m", c.clustering.graph.d_outer_m}}},
      {"detection",
       {{"depth", to_string(c.threshold.method)},
        {"resamples", c.threshold.resamples},
        {"smoothing", c.threshold.smoothing},
        {"percentile", c.threshold.percentile},
        {"min_pool", c.threshold.min_pool},
        {"seed", c.seed}}},
      {"severity",
       {{"min_samples", c.severity.min_samples},
        {"temperature_edges", c.bins.temperature_edges},
        {"precipitation_edges", c.bins.precipitation_edges},
        {"severity_edges", c.bins.severity_edges}}},
      {"report", {{"order", order}}},
      {"sweep",
       {{"rho", c.sweep.rho}, {"radius_m", c.sweep.radius_m}, {"d_inner_m", c.sweep.d_inner_m}, {"d_outer_m", c.sweep.d_outer_m}}},
      {"cache_dir", c.cache_dir.string()},
      {"output_dir", c.output_dir.string()},
      {"audit_fraction", c.audit_fraction},
      {"audit", c.audit},
      {"threads", c.threads},
  };
}

inline std::string config_hash(const PipelineConfig& c) {
  json j = config_to_json(c);
  // Execution knobs that cannot change any artifact stay out of the run identity.
  j.erase("threads");
  j.erase("audit");
  j.erase("audit_fraction");
  j.erase("output_dir");
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Artifact readers and writers
// ---------------------------------------------------------------------------

namespace artifacts {

inline std::string curve_header(const std::string& prefix) {
  std::string h = prefix;
  char buf[8];
  for (std::size_t i = 0; i < kHours; ++i) {
    std::snprintf(buf, sizeof buf, ",h%02zu", i);
    h += buf;
  }
  return h;
}

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::binary);
  out << j.dump(2) << '\n';
}

inline json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("corrupt artifact " + p.string() + ": " + e.what());
  }
}

inline std::ifstream open(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot open " + p.string());
  return in;
}

inline double to_double(const std::string& s, const fs::path& where) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) throw DataError("bad number '" + s + "' in " + where.string());
  return v;
}

inline Date to_date(const std::string& s, const fs::path& where) {
  auto d = parse_date(s);
  if (!d) throw DataError("bad date '" + s + "' in " + where.string());
  return *d;
}

inline void write_residuals(const fs::path& p, const std::vector<ResidualCurve>& rows) {
  std::ofstream out(p, std::ios::binary);
  out << curve_header("terminal,date,partition") << '\n';
  for (const auto& r : rows) {
    out << csv::quote(r.terminal) << ',' << to_string(r.date) << ',' << to_string(r.partition);
    for (double v : r.values) out << ',' << format_double(v);
    out << '\n';
  }
}

/// Residual curves grouped by terminal, each group in date order.
inline std::map<TerminalId, std::vector<ResidualCurve>> read_residuals(const fs::path& p) {
  auto in = open(p);
  csv::Reader reader(in);
  std::map<TerminalId, std::vector<ResidualCurve>> out;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() != kHours + 3) throw DataError("malformed residual row in " + p.string());
    ResidualCurve r{row[0], to_date(row[1], p), {}, parse_partition(row[2])};
    for (std::size_t h = 0; h < kHours; ++h) r.values[h] = to_double(row[h + 3], p);
    out[r.terminal].push_back(r);
  }
  return out;
}

inline void write_depths(const fs::path& p, const std::vector<DepthRecord>& rows) {
  std::ofstream out(p, std::ios::binary);
  out << "terminal,date,partition,depth,threshold,z\n";
  for (const auto& r : rows)
    out << csv::quote(r.terminal) << ',' << to_string(r.date) << ',' << to_string(r.partition) << ','
        << format_double(r.depth) << ',' << (r.threshold ? format_double(*r.threshold) : "") << ','
        << (r.z ? format_double(*r.z) : "") << '\n';
}

inline std::vector<DepthRecord> read_depths(const fs::path& p) {
  auto in = open(p);
  csv::Reader reader(in);
  std::vector<DepthRecord> out;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() != 6) throw DataError("malformed depth row in " + p.string());
    DepthRecord r{row[0], to_date(row[1], p), parse_partition(row[2]), to_double(row[3], p), std::nullopt, std::nullopt};
    if (!row[4].empty()) r.threshold = to_double(row[4], p);
    if (!row[5].empty()) r.z = to_double(row[5], p);
    out.push_back(r);
  }
  return out;
}

struct Assignment {
  std::map<TerminalId, TerminalId> cluster_of;
  std::map<TerminalId, std::vector<TerminalId>> members;
};

inline Assignment read_assignment(const fs::path& p) {
  auto in = open(p);
  csv::Reader reader(in);
  Assignment a;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() != 3) throw DataError("malformed assignment row in " + p.string());
    a.cluster_of[row[0]] = row[1];
    a.members[row[1]].push_back(row[0]);
  }
  return a;
}

inline std::string join_ids(const std::vector<TerminalId>& ids) { return join(ids, " "); }

inline std::vector<TerminalId> split_ids(const std::string& s) {
  std::vector<TerminalId> out;
  std::istringstream ss(s);
  for (std::string t; ss >> t;) out.push_back(t);
  return out;
}

inline void write_cluster_days(const fs::path& p, const std::vector<ScoredClusterDay>& rows) {
  std::ofstream out(p, std::ios::binary);
  out << "cluster,date,size,z_n,severity,direction,contributors,missing\n";
  for (const auto& r : rows) {
    const auto& e = r.exceedance;
    csv::write_row(out, {e.cluster, to_string(e.date), std::to_string(e.size), format_double(e.z_n),
                         r.severity ? format_double(*r.severity) : "", e.direction ? to_string(*e.direction) : "",
                         join_ids(e.contributors), join_ids(e.missing)});
  }
}

inline std::vector<ScoredClusterDay> read_cluster_days(const fs::path& p) {
  auto in = open(p);
  csv::Reader reader(in);
  std::vector<ScoredClusterDay> out;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() != 8) throw DataError("malformed cluster-day row in " + p.string());
    ScoredClusterDay d;
    d.exceedance.cluster = row[0];
    d.exceedance.date = to_date(row[1], p);
    d.exceedance.size = static_cast<std::size_t>(std::stoul(row[2]));
    d.exceedance.z_n = to_double(row[3], p);
    if (!row[4].empty()) d.severity = to_double(row[4], p);
    if (!row[5].empty()) d.exceedance.direction = parse_direction(row[5]);
    d.exceedance.contributors = split_ids(row[6]);
    d.exceedance.missing = split_ids(row[7]);
    out.push_back(std::move(d));
  }
  return out;
}

struct CorrelationRow {
  TerminalId a, b;
  double distance_m = 0;
  std::optional<double> rho;
  std::size_t days_used = 0;
};

inline std::vector<CorrelationRow> read_correlations(const fs::path& p) {
  auto in = open(p);
  csv::Reader reader(in);
  std::vector<CorrelationRow> out;
  std::vector<std::string> row;
  while (reader.next(row)) {
    if (row.size() != 5) throw DataError("malformed correlation row in " + p.string());
    CorrelationRow r{row[0], row[1], to_double(row[2], p), std::nullopt, static_cast<std::size_t>(std::stoul(row[4]))};
    if (!row[3].empty()) r.rho = to_double(row[3], p);
    out.push_back(r);
  }
  return out;
}

/// Counts data rows (lines after the header) of a delimited file.
inline std::size_t count_rows(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  return lines ? lines - 1 : 0;
}

inline std::vector<fs::path> list_files(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir));
  std::sort(out.begin(), out.end());
  return out;
}

inline bool same_bytes(const fs::path& a, const fs::path& b) {
  std::ifstream x(a, std::ios::binary), y(b, std::ios::binary);
  if (!x || !y) return false;
  std::istreambuf_iterator<char> xi(x), yi(y), end;
  return std::equal(xi, end, yi, end);
}

/// True when both directories hold the same relative file names with identical bytes.
inline bool same_tree(const fs::path& a, const fs::path& b, std::vector<std::string>* differences = nullptr) {
  const auto fa = list_files(a), fb = list_files(b);
  bool same = fa == fb;
  if (!same && differences) differences->push_back("file sets differ");
  for (const auto& f : fa) {
    if (!fs::exists(b / f)) continue;
    if (!same_bytes(a / f, b / f)) {
      same = false;
      if (differences) differences->push_back(f.string());
    }
  }
  return same;
}

}  // namespace artifacts

// ---------------------------------------------------------------------------
// Content-addressed stage cache
// ---------------------------------------------------------------------------

inline constexpr int kStageFormatVersion = 1;

/// Stage outputs live in <root>/<stage>/<key>/; a directory is complete once stage.json exists.
/// Entries are written to a scratch directory and renamed into place, never modified afterwards.
class ArtifactCache {
 public:
  explicit ArtifactCache(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }
  fs::path dir(const std::string& stage, const std::string& key) const { return root_ / stage / key; }
  bool has(const std::string& stage, const std::string& key) const {
    return fs::is_regular_file(dir(stage, key) / "stage.json");
  }

  fs::path scratch(const std::string& label) const {
    static std::atomic<unsigned long> counter{0};
    const auto tag = std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()) + "-" +
                     std::to_string(counter.fetch_add(1));
    fs::path p = root_ / "tmp" / (label + "-" + tag);
    fs::create_directories(p);
    return p;
  }

  /// Moves a finished scratch directory into place. If another writer won the race, the existing
  /// entry is kept and the scratch copy discarded.
  void publish(const fs::path& scratch_dir, const std::string& stage, const std::string& key) const {
    const fs::path target = dir(stage, key);
    fs::create_directories(target.parent_path());
    std::error_code ec;
    fs::rename(scratch_dir, target, ec);
    if (ec) {
      fs::remove_all(scratch_dir);
      if (!has(stage, key)) throw DataError("cannot publish cache entry " + target.string() + ": " + ec.message());
    }
  }

 private:
  fs::path root_;
};

struct StageRecord {
  std::string name;
  std::string kind;  // empty for kind-independent stages
  std::string key;
  fs::path dir;
  bool cache_hit = false;
  std::string status = "pending";  // complete | failed
  std::string started;
  std::string finished;
  std::vector<std::string> warnings;
  std::string error;
};

inline std::string utc_now() {
  const auto now = std::chrono::floor<std::chrono::milliseconds>(std::chrono::system_clock::now());
  const auto day = std::chrono::floor<std::chrono::days>(now);
  const auto ms = (now - day).count();
  char buf[40];
  std::snprintf(buf, sizeof buf, "%sT%02lld:%02lld:%02lld.%03lldZ", to_string(Date{day}).c_str(),
                static_cast<long long>(ms / 3600000), static_cast<long long>(ms / 60000 % 60),
                static_cast<long long>(ms / 1000 % 60), static_cast<long long>(ms % 1000));
  return buf;
}

/// Stage output directory handle.
struct StageRef {
  std::string key;
  fs::path dir;
};

struct AuditResult {
  std::size_t hits = 0;
  std::vector<std::string> sampled;  // "stage/key"
  std::vector<std::string> mismatches;
};

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Runs stages against a cache. Each stage is a pure function of its upstream stage directories
/// and its slice of the config; the cache key hashes exactly those.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)), cache_(cfg_.cache_dir) {}

  const PipelineConfig& config() const { return cfg_; }
  const ArtifactCache& cache() const { return cache_; }
  const std::vector<StageRecord>& records() const { return records_; }

  // ---- stage entry points ------------------------------------------------

  StageRef ingest() {
    json inputs = {{"trips", json::array()},
                   {"stations", sha256_file(cfg_.stations.string())},
                   {"prior_history", cfg_.prior_history ? json(sha256_file(cfg_.prior_history->string())) : json(nullptr)},
                   {"trip_columns", config_to_json(cfg_)["columns"]["trips"]},
                   {"station_columns", config_to_json(cfg_)["columns"]["stations"]},
                   {"ingest", config_to_json(cfg_)["ingest"]}};
    for (const auto& t : cfg_.trips) inputs["trips"].push_back(sha256_file(t.string()));
    return run("ingest", "", inputs, [this](const fs::path& out) { return ingest_stage(out); });
  }

  StageRef baseline(CurveKind kind, const StageRef& ingested) {
    json b = config_to_json(cfg_)["baseline"];
    json inputs = {{"ingest", ingested.key}, {"kind", to_string(kind)}, {"baseline", b}};
    return run("baseline", to_string(kind), inputs,
               [this, kind, ingested](const fs::path& out) { return baseline_stage(kind, ingested.dir, out); });
  }

  StageRef depth(CurveKind kind, const StageRef& base) {
    json inputs = {{"baseline", base.key}, {"kind", to_string(kind)}, {"detection", config_to_json(cfg_)["detection"]}};
    return run("depth", to_string(kind), inputs,
               [this, kind, base](const fs::path& out) { return depth_stage(kind, base.dir, out); });
  }

  static json correlation_inputs(const StageRef& ingested, const StageRef& base, double max_distance_m) {
    return {{"ingest", ingested.key}, {"baseline", base.key}, {"max_distance_m", max_distance_m}};
  }

  StageRef correlation(CurveKind kind, const StageRef& ingested, const StageRef& base, double max_distance_m) {
    const json inputs = correlation_inputs(ingested, base, max_distance_m);
    return run("correlation", to_string(kind), inputs, [this, ingested, base, max_distance_m](const fs::path& out) {
      return correlation_stage(ingested.dir, base.dir, max_distance_m, out);
    });
  }

  static json cluster_inputs(const StageRef& corr, const ClusterParams& p) {
    return {{"correlation", corr.key}, {"params", params_json(p)}};
  }

  StageRef cluster(CurveKind kind, const StageRef& corr, const ClusterParams& p) {
    const json inputs = cluster_inputs(corr, p);
    return run("cluster", to_string(kind), inputs, [corr, p](const fs::path& out) { return cluster_stage(corr.dir, p, out); });
  }

  json detect_inputs(const StageRef& base, const StageRef& dep, const StageRef& clu) const {
    return {{"baseline", base.key}, {"depth", dep.key}, {"cluster", clu.key}, {"min_samples", cfg_.severity.min_samples}};
  }

  StageRef detect(CurveKind kind, const StageRef& base, const StageRef& dep, const StageRef& clu) {
    const json inputs = detect_inputs(base, dep, clu);
    return run("detect", to_string(kind), inputs, [this, base, dep, clu](const fs::path& out) {
      return detect_stage(base.dir, dep.dir, clu.dir, out);
    });
  }

  json report_inputs(const StageRef& ingested, const StageRef& dep, const StageRef& clu, const StageRef& det) const {
    const json c = config_to_json(cfg_);
    return {{"ingest", ingested.key},
            {"depth", dep.key},
            {"cluster", clu.key},
            {"detect", det.key},
            {"order", c["report"]["order"]},
            {"bins", c["severity"]},
            {"weather", cfg_.weather ? json(sha256_file(cfg_.weather->string())) : json(nullptr)},
            {"weather_columns", c["columns"]["weather"]}};
  }

  StageRef report(CurveKind kind, const StageRef& ingested, const StageRef& dep, const StageRef& clu, const StageRef& det) {
    const json inputs = report_inputs(ingested, dep, clu, det);
    return run("report", to_string(kind), inputs, [this, ingested, dep, clu, det](const fs::path& out) {
      return report_stage(ingested.dir, dep.dir, clu.dir, det.dir, out);
    });
  }

  StageRef sweep(CurveKind kind, const StageRef& ingested, const StageRef& base) {
    json inputs = {{"ingest", ingested.key}, {"baseline", base.key}, {"grid", config_to_json(cfg_)["sweep"]}};
    return run("sweep", to_string(kind), inputs,
               [this, ingested, base](const fs::path& out) { return sweep_stage(ingested.dir, base.dir, out); });
  }

  StageRef compare(const std::map<CurveKind, StageRef>& bases, const std::map<CurveKind, StageRef>& clusters,
                   const std::map<CurveKind, StageRef>& detects, const StageRef& ingested) {
    json inputs = {{"ingest", ingested.key},
                   {"pickup", {bases.at(CurveKind::pickup).key, clusters.at(CurveKind::pickup).key, detects.at(CurveKind::pickup).key}},
                   {"dropoff", {bases.at(CurveKind::dropoff).key, clusters.at(CurveKind::dropoff).key, detects.at(CurveKind::dropoff).key}},
                   {"params", params_json(cfg_.clustering)},
                   {"rho_grid", cfg_.sweep.rho}};
    const auto pb = bases.at(CurveKind::pickup).dir, db = bases.at(CurveKind::dropoff).dir;
    const auto pc = clusters.at(CurveKind::pickup).dir, dc = clusters.at(CurveKind::dropoff).dir;
    const auto pd = detects.at(CurveKind::pickup).dir, dd = detects.at(CurveKind::dropoff).dir;
    return run("compare", "", inputs, [this, ingested, pb, db, pc, dc, pd, dd](const fs::path& out) {
      return compare_stage(ingested.dir, pb, db, pc, dc, pd, dd, out);
    });
  }

  /// The completed cache entry a stage with these inputs would produce, if it exists.
  std::optional<StageRef> cached(const std::string& name, CurveKind kind, const json& inputs) const {
    const std::string key = stage_key(name, to_string(kind), inputs);
    if (!cache_.has(name, key)) return std::nullopt;
    return StageRef{key, cache_.dir(name, key)};
  }

  /// Distance up to which pairwise correlations are precomputed for a parameter set.
  static double correlation_reach(const GraphParams& g) { return std::max(g.d_inner_m, g.d_outer_m); }

  static json params_json(const ClusterParams& p) {
    return {{"rho", p.rho}, {"radius_m", p.graph.radius_m}, {"d_inner_m", p.graph.d_inner_m}, {"d_outer_m", p.graph.d_outer_m}};
  }

  /// Recomputes a sample of cache-hit stages into scratch space and compares bytes.
  AuditResult audit(double fraction) {
    AuditResult r;
    std::vector<std::pair<std::string, std::size_t>> hits;
    for (std::size_t i = 0; i < records_.size(); ++i)
      if (records_[i].cache_hit) hits.emplace_back(sha256_hex(std::to_string(cfg_.seed) + "/" + records_[i].key), i);
    r.hits = hits.size();
    if (hits.empty() || fraction <= 0) return r;
    std::sort(hits.begin(), hits.end());
    const auto k = std::min(hits.size(), static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(hits.size()))));
    for (std::size_t s = 0; s < k; ++s) {
      const auto& rec = records_[hits[s].second];
      r.sampled.push_back(rec.name + "/" + rec.key);
      const fs::path scratch = cache_.scratch("audit-" + rec.name);
      try {
        json meta = recompute_[hits[s].second](scratch);
        write_stage_json(scratch, rec, meta);
        std::vector<std::string> diffs;
        if (!artifacts::same_tree(rec.dir, scratch, &diffs))
          r.mismatches.push_back(rec.name + "/" + rec.key + ": " + join(diffs, ", "));
      } catch (const std::exception& e) {
        r.mismatches.push_back(rec.name + "/" + rec.key + ": recomputation failed: " + e.what());
      }
      fs::remove_all(scratch);
    }
    return r;
  }

 private:
  using StageFn = std::function<json(const fs::path&)>;

  json stage_inputs_(const std::string& name, const std::string& kind, const json& inputs) const {
    return {{"stage", name}, {"kind", kind}, {"format", kStageFormatVersion}, {"inputs", inputs}};
  }

  std::string stage_key(const std::string& name, const std::string& kind, const json& inputs) const {
    return sha256_hex(stage_inputs_(name, kind, inputs).dump());
  }

  void write_stage_json(const fs::path& dir, const StageRecord& rec, const json& meta) const {
    artifacts::write_json(dir / "stage.json", {{"stage", rec.name}, {"kind", rec.kind}, {"key", rec.key}, {"meta", meta}});
  }

  StageRef run(const std::string& name, const std::string& kind, const json& inputs, StageFn fn) {
    StageRecord rec;
    rec.name = name;
    rec.kind = kind;
    rec.key = stage_key(name, kind, inputs);
    rec.dir = cache_.dir(name, rec.key);
    rec.started = utc_now();
    if (cache_.has(name, rec.key)) {
      rec.cache_hit = true;
      const json stage = artifacts::read_json(rec.dir / "stage.json");
      if (stage.contains("meta") && stage["meta"].contains("warnings"))
        rec.warnings = stage["meta"]["warnings"].get<std::vector<std::string>>();
    } else {
      const fs::path scratch = cache_.scratch(name);
      try {
        json meta = fn(scratch);
        if (meta.contains("warnings")) rec.warnings = meta["warnings"].get<std::vector<std::string>>();
        write_stage_json(scratch, rec, meta);
      } catch (const std::exception& e) {
        fs::remove_all(scratch);
        rec.status = "failed";
        rec.error = e.what();
        rec.finished = utc_now();
        records_.push_back(rec);
        recompute_.push_back(fn);
        throw;
      }
      cache_.publish(scratch, name, rec.key);
    }
    rec.status = "complete";
    rec.finished = utc_now();
    records_.push_back(rec);
    recompute_.push_back(std::move(fn));
    return {rec.key, rec.dir};
  }

  // ---- stage bodies -----------------------------------------------------

  json ingest_stage(const fs::path& out) const {
    std::vector<std::string> warnings;
    auto stations_in = artifacts::open(cfg_.stations);
    const auto stations = parse_stations(stations_in, cfg_.station_columns);
    for (const auto& e : stations.errors)
      warnings.push_back("stations line " + std::to_string(e.line) + ": " + e.message);

    std::vector<TripRecord> trips;
    std::size_t row_errors = 0, rows_read = 0;
    json error_sample = json::array();
    for (const auto& path : cfg_.trips) {
      auto in = artifacts::open(path);
      auto parsed = parse_trips(in, cfg_.trip_columns);
      rows_read += parsed.trips.size() + parsed.errors.size();
      row_errors += parsed.errors.size();
      for (const auto& e : parsed.errors)
        if (error_sample.size() < 50) error_sample.push_back(path.filename().string() + ":" + std::to_string(e.line) + ": " + e.message);
      trips.insert(trips.end(), std::make_move_iterator(parsed.trips.begin()), std::make_move_iterator(parsed.trips.end()));
    }
    if (row_errors) warnings.push_back(std::to_string(row_errors) + " malformed trip rows excluded");

    std::vector<TripRecord> prior;
    if (cfg_.prior_history) {
      auto in = artifacts::open(*cfg_.prior_history);
      prior = parse_trips(in, cfg_.trip_columns).trips;
    }
    auto cleansed = cleanse_trips(trips, cfg_.min_duration_s, cfg_.prior_history ? &prior : nullptr);
    if (cleansed.trips.empty()) throw DataError("no valid trips after cleansing");

    DateRange range;
    if (cfg_.start && cfg_.end) {
      range = {*cfg_.start, *cfg_.end};
    } else {
      Date lo = date_of(cleansed.trips.front().pickup_time), hi = lo;
      for (const auto& t : cleansed.trips) {
        lo = std::min(lo, date_of(t.pickup_time));
        hi = std::max(hi, date_of(t.pickup_time));
      }
      range = {cfg_.start.value_or(lo), cfg_.end.value_or(hi)};
    }
    if (range.last < range.first) throw DataError("configured date range holds no data");

    // Terminals need coordinates; those without are reported and their events dropped.
    std::map<TerminalId, Date> first_active;
    std::vector<Terminal> terminals;
    std::set<TerminalId> with_coords;
    for (const auto& s : stations.terminals) with_coords.insert(s.id);
    std::size_t no_coords = 0;
    for (const auto& [id, d] : cleansed.first_active) {
      if (!with_coords.count(id)) {
        ++no_coords;
        continue;
      }
      if (d > range.last) continue;
      first_active[id] = d;
    }
    if (no_coords) warnings.push_back(std::to_string(no_coords) + " terminals in trips have no station coordinates");
    for (auto s : stations.terminals) {
      auto it = first_active.find(s.id);
      if (it == first_active.end()) continue;
      s.first_active_date = it->second;
      terminals.push_back(s);
    }
    std::sort(terminals.begin(), terminals.end(), [](const Terminal& a, const Terminal& b) { return a.id < b.id; });
    if (terminals.empty()) throw DataError("no terminal has both trips and coordinates");

    write_terminals(out / "terminals.csv", terminals);
    json counts = json::object();
    std::ofstream summary(out / "summary.csv", std::ios::binary);
    summary << "terminal,kind,total,active_days,mean_annual\n";
    std::size_t dropped_events = 0;
    for (auto kind : {CurveKind::usage, CurveKind::pickup, CurveKind::dropoff}) {
      auto agg = aggregate_daily_curves(cleansed.trips, kind, range, first_active);
      dropped_events = std::max(dropped_events, agg.dropped_events);
      write_curve_store(out, agg.curves);
      counts[to_string(kind)] = agg.curves.size();
      for (const auto& [id, s] : terminal_summary(agg.curves))
        summary << csv::quote(id) << ',' << to_string(kind) << ',' << s.total_usage << ',' << s.active_days << ','
                << format_double(s.mean_annual_usage) << '\n';
    }
    return {{"rows_read", rows_read},
            {"row_errors", row_errors},
            {"row_error_sample", error_sample},
            {"removed_short", cleansed.removed_short},
            {"trips", cleansed.trips.size()},
            {"dropped_events", dropped_events},
            {"range", {{"first", to_string(range.first)}, {"last", to_string(range.last)}}},
            {"terminals", terminals.size()},
            {"curves", counts},
            {"warnings", warnings}};
  }

  json baseline_stage(CurveKind kind, const fs::path& ingest_dir, const fs::path& out) const {
    const auto curves = read_curve_store(ingest_dir, kind);
    std::map<TerminalId, std::vector<DailyCurve>> by_terminal;
    for (const auto& c : curves) by_terminal[c.terminal].push_back(c);
    std::vector<TerminalId> ids;
    for (const auto& [id, v] : by_terminal) ids.push_back(id);

    struct Fit {
      std::optional<RegressionModel> model;
      std::optional<ModelSelection> selection;
      std::vector<ResidualCurve> residuals;
      std::string skipped;
    };
    std::vector<Fit> fits(ids.size());
    parallel_for(ids.size(), cfg_.threads, [&](std::size_t i) {
      auto obs = to_observations(by_terminal.at(ids[i]));
      if (cfg_.log_transform) obs = log_transform(std::move(obs), cfg_.log_offset);
      try {
        FactorSet factors = cfg_.factors;
        if (cfg_.factor_policy == "cv-select") {
          fits[i].selection = select_model(obs, cfg_.reference_year);
          factors = fits[i].selection->chosen;
        }
        fits[i].model = fit_regression(obs, factors, cfg_.reference_year, ids[i]);
        fits[i].residuals = residuals(*fits[i].model, obs, cfg_.seasons);
      } catch (const ArgumentError& e) {
        fits[i].skipped = e.what();
      }
    });

    std::vector<std::string> warnings;
    fs::create_directories(out / "models");
    std::ofstream index(out / "models" / "index.csv", std::ios::binary);
    index << "terminal,file,factors,model_number\n";
    std::ofstream selection(out / "selection.csv", std::ios::binary);
    selection << "terminal,chosen,model_number";
    for (int m = 1; m <= 8; ++m) selection << ",cv_mse_" << m;
    selection << '\n';
    std::ofstream diag(out / "diagnostics.csv", std::ios::binary);
    diag << "terminal,residual_skewness,acf1_h08,acf1_h17\n";
    std::vector<ResidualCurve> all;
    std::size_t fitted = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto& f = fits[i];
      if (!f.model) {
        warnings.push_back(ids[i] + ": baseline not fitted (" + f.skipped + ")");
        continue;
      }
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.model", fitted++);
      {
        std::ofstream m(out / "models" / name, std::ios::binary);
        write_model(m, *f.model);
      }
      csv::write_row(index, {ids[i], name, to_string(f.model->factors), std::to_string(f.model->factors.model_number())});
      for (const auto& w : f.model->warnings) warnings.push_back(ids[i] + ": " + w);
      if (f.selection) {
        selection << csv::quote(ids[i]) << ',' << to_string(f.selection->chosen) << ',' << f.selection->chosen.model_number();
        for (double v : f.selection->cv_mse) selection << ',' << format_double(v);
        selection << '\n';
      }
      std::vector<double> pooled;
      for (const auto& r : f.residuals) pooled.insert(pooled.end(), r.values.begin(), r.values.end());
      auto fmt = [](std::optional<double> v) { return v ? format_double(*v) : std::string(); };
      auto acf1 = [&](std::size_t hour) -> std::optional<double> {
        if (f.residuals.size() < 3) return std::nullopt;
        return interdaily_acf(f.residuals, hour, 1)[1];
      };
      diag << csv::quote(ids[i]) << ',' << fmt(skewness(pooled)) << ',' << fmt(acf1(8)) << ',' << fmt(acf1(17)) << '\n';
      all.insert(all.end(), f.residuals.begin(), f.residuals.end());
    }
    if (fitted == 0) throw DataError("no terminal has enough days for a baseline fit");
    artifacts::write_residuals(out / "residuals.csv", all);
    return {{"kind", to_string(kind)},
            {"terminals_fitted", fitted},
            {"terminals_skipped", ids.size() - fitted},
            {"log_transform", cfg_.log_transform},
            {"residual_rows", all.size()},
            {"warnings", warnings}};
  }

  json depth_stage(CurveKind kind, const fs::path& baseline_dir, const fs::path& out) const {
    const auto res = artifacts::read_residuals(baseline_dir / "residuals.csv");
    std::vector<const std::vector<ResidualCurve>*> groups;
    for (const auto& [id, v] : res) groups.push_back(&v);
    std::vector<std::vector<DepthRecord>> scored(groups.size());
    std::vector<std::vector<std::string>> notes(groups.size());
    parallel_for(groups.size(), cfg_.threads, [&](std::size_t i) {
      scored[i] = score_terminal(*groups[i], cfg_.threshold, cfg_.seed, to_string(kind), &notes[i]);
    });
    std::vector<DepthRecord> all;
    std::vector<std::string> warnings;
    std::ofstream thresholds(out / "thresholds.csv", std::ios::binary);
    thresholds << "terminal,partition,pool_size,threshold\n";
    std::size_t flagged = 0, unscored = 0;
    for (std::size_t i = 0; i < groups.size(); ++i) {
      std::map<PartitionLabel, std::pair<std::size_t, std::optional<double>>> pools;
      for (const auto& r : scored[i]) {
        auto& p = pools[r.partition];
        ++p.first;
        p.second = r.threshold;
        flagged += r.flagged();
        unscored += !r.z.has_value();
      }
      for (const auto& [label, p] : pools)
        thresholds << csv::quote(groups[i]->front().terminal) << ',' << to_string(label) << ',' << p.first << ','
                   << (p.second ? format_double(*p.second) : "") << '\n';
      warnings.insert(warnings.end(), notes[i].begin(), notes[i].end());
      all.insert(all.end(), scored[i].begin(), scored[i].end());
    }
    std::stable_sort(all.begin(), all.end(), [](const DepthRecord& a, const DepthRecord& b) {
      return a.terminal != b.terminal ? a.terminal < b.terminal : a.date < b.date;
    });
    artifacts::write_depths(out / "depths.csv", all);
    return {{"kind", to_string(kind)},
            {"records", all.size()},
            {"flagged_terminal_days", flagged},
            {"insufficient_data_days", unscored},
            {"warnings", warnings}};
  }

  static std::vector<Terminal> participating_terminals(const fs::path& ingest_dir,
                                                       const std::map<TerminalId, std::vector<ResidualCurve>>& res) {
    std::vector<Terminal> out;
    for (const auto& t : read_terminals(ingest_dir / "terminals.csv"))
      if (res.count(t.id)) out.push_back(t);
    return out;
  }

  json correlation_stage(const fs::path& ingest_dir, const fs::path& baseline_dir, double reach_m, const fs::path& out) const {
    const auto res = artifacts::read_residuals(baseline_dir / "residuals.csv");
    const auto terminals = participating_terminals(ingest_dir, res);
    write_terminals(out / "terminals.csv", terminals);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    std::vector<double> dist;
    for (std::size_t i = 0; i < terminals.size(); ++i)
      for (std::size_t j = i + 1; j < terminals.size(); ++j) {
        const double d = haversine_m(terminals[i].latitude, terminals[i].longitude, terminals[j].latitude, terminals[j].longitude);
        if (d < reach_m) {
          pairs.emplace_back(i, j);
          dist.push_back(d);
        }
      }
    std::map<TerminalId, StandardizedCurves> unit;
    std::size_t constant_days = 0;
    for (const auto& [id, v] : res) {
      unit[id] = standardize(v);
      constant_days += unit[id].constant_days;
    }
    std::vector<CorrelationResult> results(pairs.size());
    parallel_for(pairs.size(), cfg_.threads, [&](std::size_t k) {
      results[k] = dynamical_correlation(unit.at(terminals[pairs[k].first].id), unit.at(terminals[pairs[k].second].id));
    });
    std::ofstream csvout(out / "correlations.csv", std::ios::binary);
    csvout << "a,b,distance_m,rho,days_used\n";
    std::vector<std::string> warnings;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const auto& a = terminals[pairs[k].first].id;
      const auto& b = terminals[pairs[k].second].id;
      if (!results[k].rho) warnings.push_back("no valid shared days for " + a + "-" + b);
      csvout << csv::quote(a) << ',' << csv::quote(b) << ',' << format_double(dist[k]) << ','
             << (results[k].rho ? format_double(*results[k].rho) : "") << ',' << results[k].days_used << '\n';
    }
    if (constant_days) warnings.push_back(std::to_string(constant_days) + " constant residual days skipped in correlations");
    return {{"pairs", pairs.size()}, {"reach_m", reach_m}, {"terminals", terminals.size()}, {"warnings", warnings}};
  }

  static CorrelationCache load_correlations(const fs::path& corr_dir) {
    CorrelationCache cache;
    for (const auto& r : artifacts::read_correlations(corr_dir / "correlations.csv")) cache.put(r.a, r.b, r.rho);
    return cache;
  }

  static json cluster_stage(const fs::path& corr_dir, const ClusterParams& p, const fs::path& out) {
    const auto terminals = read_terminals(corr_dir / "terminals.csv");
    auto cache = load_correlations(corr_dir);
    auto [graph, model] = cluster_terminals(terminals, cache, p.graph, p.rho);
    {
      std::ofstream a(out / "assignment.csv", std::ios::binary);
      write_assignment_table(a, model);
    }
    {
      std::ofstream g(out / "clusters.geojson", std::ios::binary);
      g << cluster_geojson(graph, model).dump() << '\n';
    }
    json centroids = json::object();
    for (const auto& [c, pt] : cluster_centroids(graph, model)) centroids[c] = {{"lat", pt.lat}, {"lon", pt.lon}};
    const auto s = sdcs(model);
    artifacts::write_json(out / "cluster.json",
                          {{"params", params_json(p)},
                           {"center", {{"lat", graph.center.lat}, {"lon", graph.center.lon}}},
                           {"clusters", model.sizes.size()},
                           {"components", count_components(graph)},
                           {"graph_edges", graph.edges.size()},
                           {"forest_edges", model.forest.size()},
                           {"retained_edges", model.retained.size()},
                           {"sdcs", s ? json(*s) : json(nullptr)},
                           {"centroids", centroids}});
    return {{"clusters", model.sizes.size()}, {"warnings", graph.warnings}};
  }

  json detect_stage(const fs::path& baseline_dir, const fs::path& depth_dir, const fs::path& cluster_dir,
                    const fs::path& out) const {
    const auto assignment = artifacts::read_assignment(cluster_dir / "assignment.csv");
    const auto depths = artifacts::read_depths(depth_dir / "depths.csv");
    const auto res = artifacts::read_residuals(baseline_dir / "residuals.csv");

    std::map<Date, std::map<TerminalId, std::optional<double>>> z_by_date;
    for (const auto& r : depths) z_by_date[r.date][r.terminal] = r.z;
    std::map<std::pair<TerminalId, Date>, const ResidualCurve*> residual_of;
    for (const auto& [id, v] : res)
      for (const auto& r : v) residual_of[{id, r.date}] = &r;

    std::vector<ScoredClusterDay> days;
    std::map<TerminalId, std::vector<double>> samples;
    for (const auto& [date, z] : z_by_date) {
      for (const auto& [cluster, members] : assignment.members) {
        auto e = cluster_exceedance(cluster, members, date, z);
        if (!e.is_outlier()) continue;
        std::vector<const ResidualCurve*> contributing;
        for (const auto& t : e.contributors) contributing.push_back(residual_of.at({t, date}));
        e.direction = classify_direction(contributing);
        samples[cluster].push_back(e.z_n);
        days.push_back({e, std::nullopt});
      }
    }

    std::vector<std::string> warnings;
    std::ofstream models(out / "severity_models.csv", std::ios::binary);
    models << "cluster,size,samples,alpha,beta,mle_refined,note\n";
    std::map<TerminalId, std::optional<SeverityModel>> fitted;
    for (const auto& [cluster, members] : assignment.members) {
      const auto& z = samples[cluster];
      const auto fit = fit_beta4(z, static_cast<double>(members.size()), cfg_.severity, cluster);
      fitted[cluster] = fit.model;
      if (!fit.note.empty() && fit.model) warnings.push_back(cluster + ": " + fit.note);
      csv::write_row(models, {cluster, std::to_string(members.size()), std::to_string(z.size()),
                              fit.model ? format_double(fit.model->alpha) : "", fit.model ? format_double(fit.model->beta) : "",
                              fit.model ? (fit.model->mle_refined ? "true" : "false") : "", fit.note});
    }
    std::size_t clamped_count = 0, unavailable = 0;
    for (auto& d : days) {
      const auto& m = fitted[d.exceedance.cluster];
      if (!m) {
        ++unavailable;
        continue;
      }
      bool clamped = false;
      d.severity = severity(*m, d.exceedance.z_n, &clamped);
      clamped_count += clamped;
    }
    if (clamped_count) warnings.push_back(std::to_string(clamped_count) + " exceedance sums clamped to [0, S]");
    std::sort(days.begin(), days.end(), [](const ScoredClusterDay& a, const ScoredClusterDay& b) {
      return a.exceedance.date != b.exceedance.date ? a.exceedance.date < b.exceedance.date
                                                    : a.exceedance.cluster < b.exceedance.cluster;
    });
    artifacts::write_cluster_days(out / "cluster_days.csv", days);
    std::size_t positive = 0;
    for (const auto& d : days) positive += d.exceedance.direction == Direction::positive;
    return {{"outlier_cluster_days", days.size()},
            {"positive", positive},
            {"negative", days.size() - positive},
            {"severity_unavailable_days", unavailable},
            {"warnings", warnings}};
  }

  json report_stage(const fs::path& ingest_dir, const fs::path& depth_dir, const fs::path& cluster_dir,
                    const fs::path& detect_dir, const fs::path& out) const {
    const json ingest_meta = artifacts::read_json(ingest_dir / "stage.json")["meta"];
    const DateRange range{artifacts::to_date(ingest_meta["range"]["first"].get<std::string>(), ingest_dir),
                          artifacts::to_date(ingest_meta["range"]["last"].get<std::string>(), ingest_dir)};
    const auto assignment = artifacts::read_assignment(cluster_dir / "assignment.csv");
    const auto days = artifacts::read_cluster_days(detect_dir / "cluster_days.csv");
    const json cluster_meta = artifacts::read_json(cluster_dir / "cluster.json");
    std::vector<std::string> warnings;

    // Alerts, one ranked list per date.
    std::map<Date, std::vector<ScoredClusterDay>> by_date;
    for (const auto& d : days) by_date[d.exceedance.date].push_back(d);
    json alerts = json::array();
    {
      std::ofstream a(out / "alerts.csv", std::ios::binary);
      std::vector<AlertEntry> all;
      for (const auto& [date, list] : by_date) {
        auto ranked = alert_list(date, list, assignment.members);
        alerts.push_back({{"date", to_string(date)}, {"alerts", alerts_json(ranked)}});
        all.insert(all.end(), ranked.begin(), ranked.end());
      }
      write_alerts_csv(a, all);
    }
    artifacts::write_json(out / "alerts.json", alerts);

    // Heatmap.
    std::map<TerminalId, GeoPoint> centroids;
    for (const auto& [c, p] : cluster_meta["centroids"].items()) centroids[c] = {p["lat"].get<double>(), p["lon"].get<double>()};
    const GeoPoint center{cluster_meta["center"]["lat"].get<double>(), cluster_meta["center"]["lon"].get<double>()};
    const auto heat = severity_heatmap(range, order_clusters(centroids, center, cfg_.order), days);
    {
      std::ofstream h(out / "heatmap.csv", std::ios::binary);
      write_heatmap_csv(h, heat);
    }

    std::size_t positive = 0, negative = 0;
    {
      std::ofstream p(out / "posneg.csv", std::ios::binary);
      p << "date,positive,negative\n";
      for (const auto& d : pos_neg_series(range, days)) {
        p << to_string(d.date) << ',' << d.positive << ',' << d.negative << '\n';
        positive += d.positive;
        negative += d.negative;
      }
    }
    {
      std::ofstream t(out / "terminal_counts.csv", std::ios::binary);
      t << "terminal,outlier_days\n";
      for (const auto& [id, n] : terminal_outlier_counts(range, artifacts::read_depths(depth_dir / "depths.csv")))
        t << csv::quote(id) << ',' << n << '\n';
    }

    json summary = {{"range", ingest_meta["range"]},
                    {"outlier_cluster_days", days.size()},
                    {"positive", positive},
                    {"negative", negative},
                    {"positive_fraction", days.empty() ? json(nullptr) : json(static_cast<double>(positive) / static_cast<double>(days.size()))},
                    {"alert_dates", by_date.size()},
                    {"clusters", assignment.members.size()}};

    if (cfg_.weather) {
      auto in = artifacts::open(*cfg_.weather);
      const auto weather = parse_weather(in, cfg_.weather_columns);
      for (const auto& e : weather.errors) warnings.push_back("weather line " + std::to_string(e.line) + ": " + e.message);
      std::vector<DaySeverity> per_day;
      std::size_t unrated = 0;
      for (const auto& d : range.dates()) {
        DaySeverity s{d, std::nullopt, std::nullopt};
        bool any = false, any_negative = false, unrated_negative = false;
        if (auto it = by_date.find(d); it != by_date.end()) {
          for (const auto& c : it->second) {
            const bool neg = c.exceedance.direction == Direction::negative;
            any = true;
            any_negative |= neg;
            if (!c.severity) {
              unrated_negative |= neg;
              continue;
            }
            s.max_severity = std::max(s.max_severity.value_or(0.0), *c.severity);
            if (neg) s.max_negative_severity = std::max(s.max_negative_severity.value_or(0.0), *c.severity);
          }
        }
        // Outlier days whose clusters all lack a severity model cannot be binned by severity.
        if ((any && !s.max_severity) || (any_negative && unrated_negative && !s.max_negative_severity)) {
          ++unrated;
          continue;
        }
        per_day.push_back(s);
      }
      const auto tabs = weather_crosstab(per_day, weather.days, cfg_.bins);
      artifacts::write_json(out / "weather_crosstab.json",
                            {{"temperature", crosstab_json(tabs.temperature)},
                             {"precipitation_negative", crosstab_json(tabs.precipitation)},
                             {"days_missing_weather", tabs.missing_weather},
                             {"days_without_severity", unrated},
                             {"units", {{"temperature", "degF"}, {"precipitation", "in"}}}});
      summary["weather_days_missing"] = tabs.missing_weather;
      if (tabs.missing_weather) warnings.push_back(std::to_string(tabs.missing_weather) + " days lack weather and were excluded");
    }
    artifacts::write_json(out / "report.json", summary);
    return {{"outlier_cluster_days", days.size()}, {"warnings", warnings}};
  }

  json sweep_stage(const fs::path& ingest_dir, const fs::path& baseline_dir, const fs::path& out) const {
    const auto res = artifacts::read_residuals(baseline_dir / "residuals.csv");
    const auto terminals = participating_terminals(ingest_dir, res);
    CorrelationCache cache(res);
    const auto rows = sweep_parameters(terminals, cache, cfg_.sweep);
    std::ofstream s(out / "sweep.csv", std::ios::binary);
    s << "rho,radius_m,d_inner_m,d_outer_m,clusters,components,sdcs\n";
    for (const auto& r : rows)
      s << format_double(r.rho) << ',' << format_double(r.params.radius_m) << ',' << format_double(r.params.d_inner_m) << ','
        << format_double(r.params.d_outer_m) << ',' << r.clusters << ',' << r.components << ','
        << (r.sdcs ? format_double(*r.sdcs) : "") << '\n';
    return {{"rows", rows.size()}, {"warnings", json::array()}};
  }

  json compare_stage(const fs::path& ingest_dir, const fs::path& pickup_base, const fs::path& dropoff_base,
                     const fs::path& pickup_cluster, const fs::path& dropoff_cluster, const fs::path& pickup_detect,
                     const fs::path& dropoff_detect, const fs::path& out) const {
    // NMI between pick-up and drop-off clusterings across the sweep's rho values.
    const auto pres = artifacts::read_residuals(pickup_base / "residuals.csv");
    const auto dres = artifacts::read_residuals(dropoff_base / "residuals.csv");
    std::vector<Terminal> common;
    for (const auto& t : read_terminals(ingest_dir / "terminals.csv"))
      if (pres.count(t.id) && dres.count(t.id)) common.push_back(t);
    CorrelationCache pc(pres), dc(dres);
    json curve = json::array();
    std::vector<double> rhos = cfg_.sweep.rho;
    rhos.push_back(cfg_.clustering.rho);
    std::sort(rhos.begin(), rhos.end());
    rhos.erase(std::unique(rhos.begin(), rhos.end()), rhos.end());
    for (double rho : rhos) {
      const auto a = cluster_terminals(common, pc, cfg_.clustering.graph, rho).second;
      const auto b = cluster_terminals(common, dc, cfg_.clustering.graph, rho).second;
      curve.push_back({{"rho", rho}, {"nmi", nmi(to_clustering(a), to_clustering(b))}});
    }

    // Cosine similarity of daily severity series for clusters identical under both kinds.
    const auto pa = artifacts::read_assignment(pickup_cluster / "assignment.csv");
    const auto da = artifacts::read_assignment(dropoff_cluster / "assignment.csv");
    const json ingest_meta = artifacts::read_json(ingest_dir / "stage.json")["meta"];
    const DateRange range{artifacts::to_date(ingest_meta["range"]["first"].get<std::string>(), ingest_dir),
                          artifacts::to_date(ingest_meta["range"]["last"].get<std::string>(), ingest_dir)};
    auto series = [&](const fs::path& detect_dir) {
      std::map<TerminalId, std::vector<double>> s;
      for (const auto& d : artifacts::read_cluster_days(detect_dir / "cluster_days.csv")) {
        if (!d.severity || !range.contains(d.exceedance.date)) continue;
        auto& v = s[d.exceedance.cluster];
        if (v.empty()) v.assign(range.days(), 0.0);
        v[static_cast<std::size_t>((to_days(d.exceedance.date) - to_days(range.first)).count())] = *d.severity;
      }
      return s;
    };
    const auto ps = series(pickup_detect), ds = series(dropoff_detect);
    json cosines = json::array();
    for (const auto& [cluster, members] : pa.members) {
      auto it = da.members.find(cluster);
      if (it == da.members.end() || it->second != members) continue;
      auto pi = ps.find(cluster), di = ds.find(cluster);
      std::optional<double> c;
      if (pi != ps.end() && di != ds.end()) c = cosine_similarity(pi->second, di->second);
      cosines.push_back({{"cluster", cluster}, {"size", members.size()}, {"cosine", c ? json(*c) : json(nullptr)}});
    }
    artifacts::write_json(out / "compare.json", {{"nmi_by_rho", curve}, {"cosine_by_cluster", cosines}});
    return {{"shared_clusters", cosines.size()}, {"warnings", json::array()}};
  }

  PipelineConfig cfg_;
  ArtifactCache cache_;
  std::vector<StageRecord> records_;
  std::vector<StageFn> recompute_;
};

// ---------------------------------------------------------------------------
// Full runs and manifest
// ---------------------------------------------------------------------------

enum class StopAfter { ingest, baseline, cluster, detect, report };

struct KindStages {
  StageRef baseline, depth, correlation, cluster, detect, report, sweep;
};

struct RunResult {
  json manifest;
  int exit_code = kExitOk;
  std::optional<StageRef> ingest;
  std::map<CurveKind, KindStages> stages;
  std::optional<StageRef> compare;
  AuditResult audit;
};

inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return kExitConfig;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const InsufficientData*>(&e) ||
      dynamic_cast<const ArgumentError*>(&e))
    return kExitData;
  if (dynamic_cast<const NumericError*>(&e)) return kExitNumeric;
  return kExitInternal;
}

inline std::string error_class(int code) {
  switch (code) {
    case kExitConfig: return "config";
    case kExitData: return "data";
    case kExitNumeric: return "numeric";
    case kExitAudit: return "audit";
    default: return "internal";
  }
}

inline json stage_record_json(const StageRecord& r) {
  json artifacts = json::array();
  if (r.status == "complete") {
    for (const auto& f : artifacts::list_files(r.dir)) {
      const fs::path p = r.dir / f;
      json a = {{"path", p.string()}, {"bytes", fs::file_size(p)}};
      if (p.extension() == ".csv") a["rows"] = artifacts::count_rows(p);
      artifacts.push_back(a);
    }
  }
  json j = {{"stage", r.name},   {"kind", r.kind},         {"key", r.key},           {"dir", r.dir.string()},
            {"status", r.status}, {"cache_hit", r.cache_hit}, {"started", r.started}, {"finished", r.finished},
            {"warnings", r.warnings}, {"artifacts", artifacts}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

/// Executes the stage graph (ingest, then per kind: baseline, depth, correlation, cluster, detect,
/// report, sweep; then the pick-up/drop-off comparison) and writes <output_dir>/manifest.json.
inline RunResult run_pipeline(const PipelineConfig& cfg, StopAfter stop = StopAfter::report,
                              std::optional<ClusterParams> cluster_override = std::nullopt) {
  RunResult result;
  Pipeline p(cfg);
  const std::string started = utc_now();
  const ClusterParams cp = cluster_override.value_or(cfg.clustering);
  std::string status = "complete";
  json error = nullptr;
  try {
    result.ingest = p.ingest();
    if (stop != StopAfter::ingest) {
      std::map<CurveKind, StageRef> bases, clusters, detects;
      for (auto kind : cfg.kinds) {
        KindStages& ks = result.stages[kind];
        ks.baseline = p.baseline(kind, *result.ingest);
        bases[kind] = ks.baseline;
        if (stop == StopAfter::baseline) continue;
        ks.correlation = p.correlation(kind, *result.ingest, ks.baseline, Pipeline::correlation_reach(cp.graph));
        ks.cluster = p.cluster(kind, ks.correlation, cp);
        clusters[kind] = ks.cluster;
        if (stop == StopAfter::cluster) continue;
        ks.depth = p.depth(kind, ks.baseline);
        ks.detect = p.detect(kind, ks.baseline, ks.depth, ks.cluster);
        detects[kind] = ks.detect;
        if (stop == StopAfter::detect) continue;
        ks.report = p.report(kind, *result.ingest, ks.depth, ks.cluster, ks.detect);
        ks.sweep = p.sweep(kind, *result.ingest, ks.baseline);
      }
      if (stop == StopAfter::report && detects.count(CurveKind::pickup) && detects.count(CurveKind::dropoff))
        result.compare = p.compare(bases, clusters, detects, *result.ingest);
    }
  } catch (const std::exception& e) {
    status = "failed";
    result.exit_code = exit_code_for(e);
    error = {{"class", error_class(result.exit_code)}, {"message", e.what()}, {"exit_code", result.exit_code}};
  }

  json audit = nullptr;
  if (cfg.audit && status == "complete") {
    result.audit = p.audit(cfg.audit_fraction);
    audit = {{"fraction", cfg.audit_fraction},
             {"cache_hits", result.audit.hits},
             {"sampled", result.audit.sampled},
             {"mismatches", result.audit.mismatches}};
    if (!result.audit.mismatches.empty()) {
      status = "audit_failed";
      result.exit_code = kExitAudit;
    }
  }

  json stages = json::array();
  std::vector<std::string> warnings;
  for (const auto& r : p.records()) {
    stages.push_back(stage_record_json(r));
    for (const auto& w : r.warnings) warnings.push_back(r.name + (r.kind.empty() ? "" : "[" + r.kind + "]") + ": " + w);
  }
  result.manifest = {{"config_hash", config_hash(cfg)},
                     {"config", config_to_json(cfg)},
                     {"status", status},
                     {"started", started},
                     {"finished", utc_now()},
                     {"cluster_params", Pipeline::params_json(cp)},
                     {"stages", stages},
                     {"warnings", warnings},
                     {"error", error},
                     {"audit", audit}};
  fs::create_directories(cfg.output_dir);
  artifacts::write_json(cfg.output_dir / "manifest.json", result.manifest);
  return result;
}

}  // namespace bikedepth
