#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "bikedepth/core.hpp"
#include "bikedepth/csv.hpp"
#include "bikedepth/depth.hpp"
#include "bikedepth/reporting.hpp"

namespace bikedepth {

/// Parses the matrix written by write_heatmap_csv. Directions are not stored there and stay empty.
inline Heatmap read_heatmap_csv(std::istream& in) {
  csv::Reader reader(in);
  const auto& header = reader.header();
  if (header.empty() || header[0] != "date") throw DataError("heatmap file must start with a 'date' column");
  Heatmap h;
  h.clusters.assign(header.begin() + 1, header.end());
  std::vector<std::string> row;
  while (reader.next(row)) {
    auto d = parse_date(row.at(0));
    if (!d) throw DataError("heatmap row has bad date '" + row.at(0) + "'");
    if (!h.dates.empty() && !(h.dates.back() < *d)) throw DataError("heatmap dates must increase");
    h.dates.push_back(*d);
    std::vector<HeatmapCell> cells(h.clusters.size());
    for (std::size_t j = 0; j < h.clusters.size() && j + 1 < row.size(); ++j) {
      const std::string& v = row[j + 1];
      if (v.empty()) continue;
      cells[j].outlier = true;
      if (v == "NA") continue;
      try {
        cells[j].severity = std::stod(v);
      } catch (const std::exception&) {
        throw DataError("heatmap cell '" + v + "' is not a severity");
      }
    }
    h.cells.push_back(std::move(cells));
  }
  return h;
}

namespace detail {

inline std::string svg_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// Light-to-dark red ramp for severities in [0, 1].
inline std::string severity_color(double theta) {
  const double t = std::clamp(theta, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(254 + t * (165 - 254)));
  const int g = static_cast<int>(std::lround(229 + t * (15 - 229)));
  const int b = static_cast<int>(std::lround(217 + t * (21 - 217)));
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline constexpr const char* kUnratedColor = "#9e9e9e";

}  // namespace detail

/// Static SVG of a severity heatmap: dates along x, clusters along y in the matrix order.
inline std::string heatmap_svg(const Heatmap& h, const std::string& title = "Outlier severity by cluster") {
  const double left = 90, top = 40, right = 150, bottom = 50;
  const double cw = h.dates.empty() ? 1.0 : std::clamp(1400.0 / static_cast<double>(h.dates.size()), 1.0, 14.0);
  const double ch = 16;
  const double width = left + cw * static_cast<double>(h.dates.size()) + right;
  const double height = top + ch * static_cast<double>(h.clusters.size()) + bottom;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt(width) << "\" height=\"" << detail::fmt(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << detail::fmt(left) << "\" y=\"20\" font-size=\"14\">" << detail::svg_escape(title) << "</text>\n";
  for (std::size_t j = 0; j < h.clusters.size(); ++j) {
    const double y = top + ch * static_cast<double>(j);
    s << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(y + ch * 0.75) << "\" text-anchor=\"end\">"
      << detail::svg_escape(h.clusters[j]) << "</text>\n";
    s << "<line x1=\"" << detail::fmt(left) << "\" x2=\"" << detail::fmt(width - right) << "\" y1=\"" << detail::fmt(y + ch)
      << "\" y2=\"" << detail::fmt(y + ch) << "\" stroke=\"#eeeeee\"/>\n";
  }
  for (std::size_t i = 0; i < h.dates.size(); ++i) {
    const double x = left + cw * static_cast<double>(i);
    const Date& d = h.dates[i];
    if (static_cast<unsigned>(d.day()) == 1 && (month_of(d) - 1) % 3 == 0) {
      const std::string label = to_string(d).substr(0, 7);
      s << "<line x1=\"" << detail::fmt(x) << "\" x2=\"" << detail::fmt(x) << "\" y1=\"" << detail::fmt(top) << "\" y2=\""
        << detail::fmt(height - bottom + 4) << "\" stroke=\"#dddddd\"/>\n";
      s << "<text x=\"" << detail::fmt(x) << "\" y=\"" << detail::fmt(height - bottom + 16) << "\" text-anchor=\"middle\">"
        << label << "</text>\n";
    }
    for (std::size_t j = 0; j < h.clusters.size(); ++j) {
      const auto& c = h.cells[i][j];
      if (!c.outlier) continue;
      const std::string fill = c.severity ? detail::severity_color(*c.severity) : detail::kUnratedColor;
      s << "<rect class=\"cell\" x=\"" << detail::fmt(x) << "\" y=\"" << detail::fmt(top + ch * static_cast<double>(j))
        << "\" width=\"" << detail::fmt(cw) << "\" height=\"" << detail::fmt(ch) << "\" fill=\"" << fill << "\"><title>"
        << to_string(d) << " " << detail::svg_escape(h.clusters[j]) << ": "
        << (c.severity ? detail::fmt(*c.severity) : std::string("severity unavailable")) << "</title></rect>\n";
    }
  }
  const double lx = width - right + 20;
  s << "<text x=\"" << detail::fmt(lx) << "\" y=\"" << detail::fmt(top + 10) << "\">severity</text>\n";
  for (int k = 0; k <= 4; ++k) {
    const double theta = k / 4.0;
    const double y = top + 18 + 16 * k;
    s << "<rect x=\"" << detail::fmt(lx) << "\" y=\"" << detail::fmt(y) << "\" width=\"14\" height=\"12\" fill=\""
      << detail::severity_color(theta) << "\"/><text x=\"" << detail::fmt(lx + 20) << "\" y=\"" << detail::fmt(y + 10) << "\">"
      << detail::fmt(theta) << "</text>\n";
  }
  const double y = top + 18 + 16 * 5;
  s << "<rect x=\"" << detail::fmt(lx) << "\" y=\"" << detail::fmt(y) << "\" width=\"14\" height=\"12\" fill=\""
    << detail::kUnratedColor << "\"/><text x=\"" << detail::fmt(lx + 20) << "\" y=\"" << detail::fmt(y + 10)
    << "\">unavailable</text>\n";
  s << "</svg>\n";
  return s.str();
}

/// Two stacked time-series panels for one terminal: depth with its threshold, and the normalized
/// depth with a zero line and a marker on every flagged day.
inline std::string depth_panel_svg(const TerminalId& terminal, std::vector<DepthRecord> rows) {
  std::sort(rows.begin(), rows.end(), [](const DepthRecord& a, const DepthRecord& b) { return a.date < b.date; });
  const double left = 70, right = 20, panel = 180, gap = 40, top = 40;
  const double plot_w = 1000;
  const double width = left + plot_w + right, height = top + 2 * panel + gap + 40;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt(width) << "\" height=\"" << detail::fmt(height)
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << detail::fmt(left) << "\" y=\"20\" font-size=\"14\">Terminal " << detail::svg_escape(terminal)
    << "</text>\n";
  if (rows.empty()) {
    s << "<text x=\"" << detail::fmt(left) << "\" y=\"" << detail::fmt(top + 20) << "\">no depth records</text>\n</svg>\n";
    return s.str();
  }
  const double t0 = static_cast<double>(to_days(rows.front().date).time_since_epoch().count());
  const double t1 = static_cast<double>(to_days(rows.back().date).time_since_epoch().count());
  auto xof = [&](const Date& d) {
    const double t = static_cast<double>(to_days(d).time_since_epoch().count());
    return left + (t1 > t0 ? (t - t0) / (t1 - t0) : 0.5) * plot_w;
  };

  auto panel_frame = [&](double y0, double lo, double hi, const std::string& label) {
    s << "<rect x=\"" << detail::fmt(left) << "\" y=\"" << detail::fmt(y0) << "\" width=\"" << detail::fmt(plot_w)
      << "\" height=\"" << detail::fmt(panel) << "\" fill=\"none\" stroke=\"#888888\"/>\n";
    s << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(y0 + 10) << "\" text-anchor=\"end\">"
      << detail::fmt(hi) << "</text>\n";
    s << "<text x=\"" << detail::fmt(left - 6) << "\" y=\"" << detail::fmt(y0 + panel) << "\" text-anchor=\"end\">"
      << detail::fmt(lo) << "</text>\n";
    s << "<text x=\"" << detail::fmt(left + 4) << "\" y=\"" << detail::fmt(y0 - 4) << "\">" << label << "</text>\n";
  };
  auto polyline = [&](double y0, double lo, double hi, auto value, const std::string& color, const std::string& cls) {
    std::string pts;
    for (const auto& r : rows) {
      auto v = value(r);
      if (!v) continue;
      const double y = y0 + panel - (hi > lo ? (*v - lo) / (hi - lo) : 0.5) * panel;
      pts += detail::fmt(xof(r.date)) + "," + detail::fmt(y) + " ";
    }
    s << "<polyline class=\"" << cls << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1\" points=\"" << pts
      << "\"/>\n";
  };

  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& r : rows) {
    lo = std::min(lo, r.depth);
    hi = std::max(hi, r.depth);
    if (r.threshold) {
      lo = std::min(lo, *r.threshold);
      hi = std::max(hi, *r.threshold);
    }
  }
  const double y1 = top;
  panel_frame(y1, lo, hi, "depth d (black) and threshold C (red)");
  polyline(y1, lo, hi, [](const DepthRecord& r) { return std::optional<double>(r.depth); }, "#222222", "depth");
  polyline(y1, lo, hi, [](const DepthRecord& r) { return r.threshold; }, "#d62728", "threshold");

  double zlo = 0, zhi = 0;
  for (const auto& r : rows)
    if (r.z) {
      zlo = std::min(zlo, *r.z);
      zhi = std::max(zhi, *r.z);
    }
  if (zhi <= zlo) zhi = zlo + 1;
  const double y2 = top + panel + gap;
  panel_frame(y2, zlo, zhi, "normalized depth z; markers are flagged days");
  const double zero_y = y2 + panel - (0 - zlo) / (zhi - zlo) * panel;
  s << "<line x1=\"" << detail::fmt(left) << "\" x2=\"" << detail::fmt(left + plot_w) << "\" y1=\"" << detail::fmt(zero_y)
    << "\" y2=\"" << detail::fmt(zero_y) << "\" stroke=\"#d62728\"/>\n";
  polyline(y2, zlo, zhi, [](const DepthRecord& r) { return r.z; }, "#1f77b4", "z");
  for (const auto& r : rows) {
    if (!r.flagged()) continue;
    const double y = y2 + panel - (*r.z - zlo) / (zhi - zlo) * panel;
    s << "<circle class=\"flag\" cx=\"" << detail::fmt(xof(r.date)) << "\" cy=\"" << detail::fmt(y)
      << "\" r=\"3\" fill=\"#d62728\"><title>" << to_string(r.date) << "</title></circle>\n";
  }
  s << "<text x=\"" << detail::fmt(left) << "\" y=\"" << detail::fmt(height - 10) << "\">" << to_string(rows.front().date)
    << "</text><text x=\"" << detail::fmt(left + plot_w) << "\" y=\"" << detail::fmt(height - 10) << "\" text-anchor=\"end\">"
    << to_string(rows.back().date) << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

}  // namespace bikedepth
