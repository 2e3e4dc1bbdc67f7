#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "bikedepth/core.hpp"
#include "bikedepth/csv.hpp"
#include "bikedepth/detection.hpp"
#include "bikedepth/ingestion.hpp"
#include "bikedepth/reporting.hpp"

namespace bikedepth::synth {

/// Knobs for the synthetic network: terminals sit in compact geographic groups far enough apart
/// that no geographic edge joins two groups, and each group shares a daily demand factor.
struct Options {
  std::uint64_t seed = 7;
  std::vector<int> group_sizes = {3, 3, 3, 3, 3, 3, 2};
  Date start = make_date(2018, 1, 1);
  int days = 730;
  double pickups_per_day = 100.0;  // mean weekday pick-ups per terminal before seasonal factors
  int shocks = 20;                 // planted cluster-wide demand shocks
  double shock_up = 2.5;           // demand multiplier on positive shock days
  double shock_down = 0.05;        // demand multiplier on negative shock days
  double negative_share = 0.3;
  double seasonal_amplitude = 0.25;  // relative summer/winter swing of demand
  double group_day_sd = 0.15;      // shared log-demand factor per group-day
  double group_hour_sd = 0.2;      // shared hourly AR(1) log-demand wiggle per group-day
  double within_group_trips = 0.9;
  double short_trip_rate = 0.005;  // trips under a minute, removed by cleansing
  double center_lat = 38.9;
  double center_lon = -77.03;
  double group_ring_m = 2500.0;
  double terminal_spacing_m = 300.0;
};

struct PlantedShock {
  int group = 0;
  Date date;
  Direction direction = Direction::positive;
  std::vector<TerminalId> members;
};

struct Dataset {
  std::vector<Terminal> stations;
  std::map<TerminalId, int> group_of;
  std::vector<TripRecord> trips;  // ordered by pick-up time
  std::vector<PlantedShock> shocks;
  std::vector<WeatherDay> weather;
  DateRange range;
};

namespace detail {

inline double weekday_profile(double h) {
  auto bump = [](double x, double mu, double sd) { return std::exp(-0.5 * (x - mu) * (x - mu) / (sd * sd)); };
  return 0.15 + 2.2 * bump(h, 8.0, 1.2) + 2.0 * bump(h, 17.5, 1.5) + 0.6 * bump(h, 12.5, 2.0);
}

inline double weekend_profile(double h) {
  const double x = (h - 14.0) / 3.5;
  return 0.1 + 1.6 * std::exp(-0.5 * x * x);
}

/// Normalized so the 24 entries sum to one.
inline Curve hourly_shape(bool weekend) {
  Curve c{};
  double s = 0;
  for (std::size_t h = 0; h < kHours; ++h) {
    c[h] = weekend ? weekend_profile(static_cast<double>(h) + 0.5) : weekday_profile(static_cast<double>(h) + 0.5);
    s += c[h];
  }
  for (auto& v : c) v /= s;
  return c;
}

inline double month_factor(unsigned m, double amplitude) {
  return 1.0 + amplitude * std::sin(2.0 * std::numbers::pi * (static_cast<double>(m) - 4.0) / 12.0);
}

inline double weekday_factor(unsigned wd) {
  static constexpr double kFactors[] = {0.75, 1.0, 1.05, 1.05, 1.0, 0.95, 0.85};
  return kFactors[wd];
}

inline GeoPoint offset(const GeoPoint& p, double north_m, double east_m) {
  const double dlat = north_m / kEarthRadiusM * 180.0 / std::numbers::pi;
  const double dlon = east_m / (kEarthRadiusM * std::cos(p.lat * std::numbers::pi / 180.0)) * 180.0 / std::numbers::pi;
  return {p.lat + dlat, p.lon + dlon};
}

}  // namespace detail

inline Dataset generate(const Options& opt = {}) {
  const int groups = static_cast<int>(opt.group_sizes.size());
  if (groups < 1 || opt.days < 1 || std::any_of(opt.group_sizes.begin(), opt.group_sizes.end(), [](int n) { return n < 2; }))
    throw ArgumentError("synthetic network too small");
  std::mt19937_64 rng(opt.seed);
  Dataset ds;
  ds.range = {opt.start, Date{to_days(opt.start) + std::chrono::days{opt.days - 1}}};

  // Layout: group centres on a ring; members at the centre and the four compass points.
  const GeoPoint center{opt.center_lat, opt.center_lon};
  std::vector<std::vector<TerminalId>> members(static_cast<std::size_t>(groups));
  std::map<TerminalId, double> scale;
  std::lognormal_distribution<double> scale_dist(0.0, 0.25);
  int next_id = 31000;
  for (int g = 0; g < groups; ++g) {
    const int per_group = opt.group_sizes[static_cast<std::size_t>(g)];
    const double angle = 2.0 * std::numbers::pi * g / groups;
    const GeoPoint gc = detail::offset(center, opt.group_ring_m * std::cos(angle), opt.group_ring_m * std::sin(angle));
    for (int k = 0; k < per_group; ++k) {
      GeoPoint p = gc;
      if (k > 0) {
        const double a = 2.0 * std::numbers::pi * (k - 1) / std::max(1, per_group - 1);
        p = detail::offset(gc, opt.terminal_spacing_m * std::cos(a), opt.terminal_spacing_m * std::sin(a));
      }
      const TerminalId id = std::to_string(next_id++);
      ds.stations.push_back({id, p.lat, p.lon, std::nullopt});
      ds.group_of[id] = g;
      members[static_cast<std::size_t>(g)].push_back(id);
      scale[id] = scale_dist(rng);
    }
  }

  // Planted shocks on distinct (group, day) pairs.
  std::uniform_int_distribution<int> pick_day(0, opt.days - 1), pick_group(0, groups - 1);
  std::bernoulli_distribution negative(opt.negative_share);
  std::set<std::pair<int, int>> used;
  std::map<std::pair<int, int>, double> shock_factor;
  while (static_cast<int>(ds.shocks.size()) < opt.shocks && static_cast<int>(used.size()) < opt.days * groups) {
    const int day = pick_day(rng), g = pick_group(rng);
    if (!used.insert({g, day}).second) continue;
    const bool down = negative(rng);
    shock_factor[{g, day}] = down ? opt.shock_down : opt.shock_up;
    ds.shocks.push_back({g, Date{to_days(opt.start) + std::chrono::days{day}},
                         down ? Direction::negative : Direction::positive, members[static_cast<std::size_t>(g)]});
  }
  std::sort(ds.shocks.begin(), ds.shocks.end(), [](const PlantedShock& a, const PlantedShock& b) {
    return a.date != b.date ? a.date < b.date : a.group < b.group;
  });

  const Curve weekday_shape = detail::hourly_shape(false), weekend_shape = detail::hourly_shape(true);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> minute(0, 3599), duration(300, 1800), short_duration(5, 55);
  const int first_year = year_of(opt.start);
  const double hour_rho = 0.7, hour_innov = std::sqrt(1 - hour_rho * hour_rho);

  for (int day = 0; day < opt.days; ++day) {
    const Date date{to_days(opt.start) + std::chrono::days{day}};
    const unsigned wd = weekday_of(date);
    const bool weekend = wd == 0 || wd == 6;
    const Curve& shape = weekend ? weekend_shape : weekday_shape;
    const double calendar = detail::weekday_factor(wd) * detail::month_factor(month_of(date), opt.seasonal_amplitude) *
                            (1.0 + 0.1 * (year_of(date) - first_year));
    for (int g = 0; g < groups; ++g) {
      // Shared multiplicative factor: daily level plus a smooth hourly wiggle.
      const double level = opt.group_day_sd * normal(rng) - 0.5 * opt.group_day_sd * opt.group_day_sd;
      Curve wiggle{};
      double w = normal(rng);
      for (std::size_t h = 0; h < kHours; ++h) {
        wiggle[h] = opt.group_hour_sd * w - 0.5 * opt.group_hour_sd * opt.group_hour_sd;
        w = hour_rho * w + hour_innov * normal(rng);
      }
      double shock = 1.0;
      if (auto it = shock_factor.find({g, day}); it != shock_factor.end()) shock = it->second;
      const auto& grp = members[static_cast<std::size_t>(g)];
      for (const auto& id : grp) {
        for (std::size_t h = 0; h < kHours; ++h) {
          const double lambda =
              opt.pickups_per_day * scale[id] * calendar * shape[h] * std::exp(level + wiggle[h]) * shock;
          const int n = std::poisson_distribution<int>(lambda)(rng);
          for (int k = 0; k < n; ++k) {
            const Timestamp t0 = Timestamp{to_days(date)} + std::chrono::hours{static_cast<long>(h)} +
                                 std::chrono::seconds{minute(rng)};
            TerminalId dest;
            int secs = 0;
            if (unit(rng) < opt.short_trip_rate) {
              dest = id;
              secs = short_duration(rng);
            } else {
              const bool local = unit(rng) < opt.within_group_trips;
              if (local) {
                std::uniform_int_distribution<std::size_t> pick(0, grp.size() - 2);
                std::size_t j = pick(rng);
                if (grp[j] == id) j = grp.size() - 1;
                dest = grp[j];
              } else {
                std::uniform_int_distribution<std::size_t> pick(0, ds.stations.size() - 1);
                dest = ds.stations[pick(rng)].id;
              }
              secs = duration(rng);
            }
            ds.trips.push_back({t0, t0 + std::chrono::seconds{secs}, id, dest, secs});
          }
        }
      }
    }
    // Weather: seasonal temperature, intermittent rain.
    const double doy = static_cast<double>((to_days(date) - to_days(Date{date.year() / 1 / 1})).count());
    const double temp = 58.0 - 22.0 * std::cos(2.0 * std::numbers::pi * (doy - 15.0) / 365.25) + 6.0 * normal(rng);
    const double precip = unit(rng) < 0.3 ? -0.3 * std::log(1.0 - unit(rng)) : 0.0;
    ds.weather.push_back({date, std::round(temp * 10) / 10, std::round(precip * 100) / 100});
  }
  std::stable_sort(ds.trips.begin(), ds.trips.end(),
                   [](const TripRecord& a, const TripRecord& b) { return a.pickup_time < b.pickup_time; });
  return ds;
}

inline void write_trips_csv(const std::filesystem::path& path, const std::vector<TripRecord>& trips) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "Duration,Start date,End date,Start station number,End station number,Member type\n";
  for (const auto& t : trips)
    out << t.duration_seconds << ',' << to_string(t.pickup_time) << ',' << to_string(t.dropoff_time) << ','
        << t.origin_terminal << ',' << t.dest_terminal << ",Member\n";
}

inline void write_stations_csv(const std::filesystem::path& path, const std::vector<Terminal>& stations) {
  std::ofstream out(path, std::ios::binary);
  out << "id,latitude,longitude\n";
  for (const auto& s : stations) out << s.id << ',' << format_double(s.latitude) << ',' << format_double(s.longitude) << '\n';
}

inline void write_weather_csv(const std::filesystem::path& path, const std::vector<WeatherDay>& weather) {
  std::ofstream out(path, std::ios::binary);
  out << "name,datetime,temp,precip\n";
  for (const auto& w : weather)
    out << "synthetic," << to_string(w.date) << ',' << format_double(w.temperature_f) << ','
        << format_double(w.precipitation_in) << '\n';
}

inline void write_planted_csv(const std::filesystem::path& path, const std::vector<PlantedShock>& shocks) {
  std::ofstream out(path, std::ios::binary);
  out << "date,group,direction,members\n";
  for (const auto& s : shocks)
    csv::write_row(out, {to_string(s.date), std::to_string(s.group), to_string(s.direction), join(s.members, " ")});
}

/// Writes trips.csv, stations.csv, weather.csv and planted.csv into `dir`.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  write_trips_csv(dir / "trips.csv", ds.trips);
  write_stations_csv(dir / "stations.csv", ds.stations);
  write_weather_csv(dir / "weather.csv", ds.weather);
  write_planted_csv(dir / "planted.csv", ds.shocks);
}

}  // namespace bikedepth::synth
