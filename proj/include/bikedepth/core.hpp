#pragma once

#include <array>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace bikedepth {

inline constexpr std::size_t kHours = 24;

using TerminalId = std::string;
using Date = std::chrono::year_month_day;
using Timestamp = std::chrono::sys_seconds;

/// Hourly counts for one terminal-day, index = hour of day.
using HourlyCounts = std::array<int, kHours>;
/// Real-valued curve on the 24-point hourly grid.
using Curve = std::array<double, kHours>;

// Error taxonomy. The CLI maps each family to its own exit code.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
/// Thrown when a depth pool cannot support a threshold.
struct InsufficientData : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::chrono::sys_days to_days(const Date& d) { return std::chrono::sys_days{d}; }

inline Date next_day(const Date& d) { return Date{to_days(d) + std::chrono::days{1}}; }

inline int year_of(const Date& d) { return static_cast<int>(d.year()); }
inline unsigned month_of(const Date& d) { return static_cast<unsigned>(d.month()); }
/// 0 = Sunday .. 6 = Saturday.
inline unsigned weekday_of(const Date& d) {
  return std::chrono::weekday{to_days(d)}.c_encoding();
}

inline Date make_date(int y, unsigned m, unsigned d) {
  Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) throw ArgumentError("invalid calendar date");
  return date;
}

namespace detail {

inline bool parse_uint(std::string_view s, int& out) {
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

}  // namespace detail

/// Parses YYYY-MM-DD (also accepts a trailing time part, which is ignored).
inline std::optional<Date> parse_date(std::string_view s) {
  if (s.size() < 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0, m = 0, d = 0;
  if (!detail::parse_uint(s.substr(0, 4), y) || !detail::parse_uint(s.substr(5, 2), m) ||
      !detail::parse_uint(s.substr(8, 2), d))
    return std::nullopt;
  if (m < 1 || m > 12 || d < 1 || d > 31) return std::nullopt;
  Date date{std::chrono::year{y}, std::chrono::month{static_cast<unsigned>(m)},
            std::chrono::day{static_cast<unsigned>(d)}};
  if (!date.ok()) return std::nullopt;
  return date;
}

/// Parses "YYYY-MM-DD HH:MM[:SS[.fff]]" (or with a 'T' separator). Local time as given.
inline std::optional<Timestamp> parse_timestamp(std::string_view s) {
  auto date = parse_date(s);
  if (!date) return std::nullopt;
  if (s.size() < 16 || (s[10] != ' ' && s[10] != 'T') || s[13] != ':') return std::nullopt;
  int hh = 0, mm = 0, ss = 0;
  if (!detail::parse_uint(s.substr(11, 2), hh) || !detail::parse_uint(s.substr(14, 2), mm))
    return std::nullopt;
  if (s.size() > 16) {
    if (s[16] != ':' || s.size() < 19 || !detail::parse_uint(s.substr(17, 2), ss))
      return std::nullopt;
    if (s.size() > 19 && s[19] != '.') return std::nullopt;
  }
  if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;
  return Timestamp{to_days(*date)} + std::chrono::hours{hh} + std::chrono::minutes{mm} +
         std::chrono::seconds{ss};
}

inline Date date_of(Timestamp t) {
  return Date{std::chrono::floor<std::chrono::days>(t)};
}

inline int hour_of(Timestamp t) {
  auto day = std::chrono::floor<std::chrono::days>(t);
  return static_cast<int>(std::chrono::floor<std::chrono::hours>(t - day).count());
}

inline std::string to_string(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", year_of(d), month_of(d),
                static_cast<unsigned>(d.day()));
  return buf;
}

inline std::string to_string(Timestamp t) {
  auto day = std::chrono::floor<std::chrono::days>(t);
  auto secs = (t - day).count();
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s %02lld:%02lld:%02lld", to_string(Date{day}).c_str(),
                static_cast<long long>(secs / 3600), static_cast<long long>(secs / 60 % 60),
                static_cast<long long>(secs % 60));
  return buf;
}

/// Inclusive calendar interval.
struct DateRange {
  Date first;
  Date last;

  bool contains(const Date& d) const { return d >= first && d <= last; }
  std::size_t days() const {
    return last < first ? 0 : static_cast<std::size_t>((to_days(last) - to_days(first)).count() + 1);
  }
  std::vector<Date> dates() const {
    std::vector<Date> out;
    out.reserve(days());
    for (auto d = to_days(first); d <= to_days(last); d += std::chrono::days{1}) out.emplace_back(d);
    return out;
  }
};

/// Shortest round-trippable decimal representation; stable across runs.
inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return ec == std::errc{} ? std::string(buf, ptr) : std::string("nan");
}

}  // namespace bikedepth
