#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <queue>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "bikedepth/baseline.hpp"
#include "bikedepth/core.hpp"
#include "bikedepth/ingestion.hpp"
#include "json.hpp"

namespace bikedepth {

// ---------------------------------------------------------------------------
// Geography
// ---------------------------------------------------------------------------

inline constexpr double kEarthRadiusM = 6'371'000.0;

/// Great-circle distance in metres.
inline double haversine_m(double lat1, double lon1, double lat2, double lon2) {
  constexpr double kRad = 3.14159265358979323846 / 180.0;
  const double dlat = (lat2 - lat1) * kRad;
  const double dlon = (lon2 - lon1) * kRad;
  const double a = std::sin(dlat / 2) * std::sin(dlat / 2) +
                   std::cos(lat1 * kRad) * std::cos(lat2 * kRad) * std::sin(dlon / 2) * std::sin(dlon / 2);
  return 2.0 * kEarthRadiusM * std::asin(std::min(1.0, std::sqrt(a)));
}

struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw ArgumentError("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

/// Componentwise median of terminal coordinates.
inline GeoPoint network_center(const std::vector<Terminal>& terminals) {
  std::vector<double> lat, lon;
  for (const auto& t : terminals) {
    lat.push_back(t.latitude);
    lon.push_back(t.longitude);
  }
  return {median_of(lat), median_of(lon)};
}

struct GraphParams {
  double radius_m = 5000.0;   // R
  double d_inner_m = 500.0;   // edge distance limit when both ends lie inside R
  double d_outer_m = 1000.0;  // edge distance limit otherwise

  bool operator==(const GraphParams&) const = default;
};

struct GeoEdge {
  std::size_t a = 0;  // node index, a < b
  std::size_t b = 0;
  double geo_distance_m = 0.0;
  double weight = std::numeric_limits<double>::quiet_NaN();  // 1 - rho once weighted
};

struct GeoGraph {
  std::vector<Terminal> nodes;  // sorted by id
  std::vector<GeoEdge> edges;   // sorted by (a, b)
  GraphParams params;
  GeoPoint center;
  std::vector<std::string> warnings;

  std::size_t index_of(const TerminalId& id) const {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), id,
                               [](const Terminal& t, const TerminalId& x) { return t.id < x; });
    if (it == nodes.end() || it->id != id) throw ArgumentError("unknown terminal '" + id + "'");
    return static_cast<std::size_t>(it - nodes.begin());
  }
};

/// Permission graph: an edge joins i and j when both lie within R of the median centre and are
/// closer than D_inner, or when at least one lies outside R and they are closer than D_outer.
inline GeoGraph build_geo_graph(std::vector<Terminal> terminals, const GraphParams& p) {
  if (terminals.empty()) throw ArgumentError("graph needs at least one terminal");
  if (!(p.radius_m > 0 && p.d_inner_m > 0 && p.d_outer_m > 0))
    throw ArgumentError("graph distances must be positive");
  std::sort(terminals.begin(), terminals.end(), [](const Terminal& x, const Terminal& y) { return x.id < y.id; });
  GeoGraph g;
  g.params = p;
  g.center = network_center(terminals);
  g.nodes = std::move(terminals);
  std::vector<bool> inner(g.nodes.size());
  for (std::size_t i = 0; i < g.nodes.size(); ++i)
    inner[i] = haversine_m(g.center.lat, g.center.lon, g.nodes[i].latitude, g.nodes[i].longitude) <= p.radius_m;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    for (std::size_t j = i + 1; j < g.nodes.size(); ++j) {
      const double d = haversine_m(g.nodes[i].latitude, g.nodes[i].longitude, g.nodes[j].latitude, g.nodes[j].longitude);
      const double limit = (inner[i] && inner[j]) ? p.d_inner_m : p.d_outer_m;
      if (d < limit) g.edges.push_back({i, j, d});
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dynamical correlation
// ---------------------------------------------------------------------------

/// Per-day curves centred by their own time-mean and scaled to unit L2 norm.
struct StandardizedCurves {
  std::vector<long> days;  // sorted day numbers
  std::vector<Curve> unit;
  std::size_t constant_days = 0;
};

inline StandardizedCurves standardize(const std::vector<ResidualCurve>& curves) {
  std::vector<std::pair<long, Curve>> rows;
  StandardizedCurves out;
  for (const auto& c : curves) {
    double mean = 0;
    for (double v : c.values) mean += v;
    mean /= static_cast<double>(kHours);
    Curve u{};
    double norm = 0;
    for (std::size_t h = 0; h < kHours; ++h) {
      u[h] = c.values[h] - mean;
      norm += u[h] * u[h];
    }
    norm = std::sqrt(norm);
    if (norm <= 1e-12) {
      ++out.constant_days;
      continue;
    }
    for (auto& v : u) v /= norm;
    rows.emplace_back(to_days(c.date).time_since_epoch().count(), u);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  for (auto& [d, u] : rows) {
    out.days.push_back(d);
    out.unit.push_back(u);
  }
  return out;
}

struct CorrelationResult {
  std::optional<double> rho;  // undefined when no shared valid day
  std::size_t days_used = 0;
};

/// Average over shared days of the per-day correlation of the two standardized curves.
inline CorrelationResult dynamical_correlation(const StandardizedCurves& a, const StandardizedCurves& b) {
  CorrelationResult r;
  double sum = 0;
  std::size_t i = 0, j = 0;
  while (i < a.days.size() && j < b.days.size()) {
    if (a.days[i] < b.days[j]) {
      ++i;
    } else if (b.days[j] < a.days[i]) {
      ++j;
    } else {
      double dot = 0;
      for (std::size_t h = 0; h < kHours; ++h) dot += a.unit[i][h] * b.unit[j][h];
      sum += std::clamp(dot, -1.0, 1.0);
      ++r.days_used;
      ++i;
      ++j;
    }
  }
  if (r.days_used > 0) r.rho = sum / static_cast<double>(r.days_used);
  return r;
}

inline CorrelationResult dynamical_correlation(const std::vector<ResidualCurve>& a, const std::vector<ResidualCurve>& b) {
  return dynamical_correlation(standardize(a), standardize(b));
}

/// Memoizes pairwise correlations so graph/cut stages can be re-run cheaply.
class CorrelationCache {
 public:
  CorrelationCache() = default;
  explicit CorrelationCache(const std::map<TerminalId, std::vector<ResidualCurve>>& residuals) {
    for (const auto& [id, res] : residuals) series_[id] = standardize(res);
  }

  std::optional<double> get(const TerminalId& x, const TerminalId& y) {
    const auto key = x < y ? std::make_pair(x, y) : std::make_pair(y, x);
    if (auto it = pairs_.find(key); it != pairs_.end()) return it->second;
    std::optional<double> rho;
    auto sx = series_.find(key.first), sy = series_.find(key.second);
    if (sx != series_.end() && sy != series_.end()) rho = dynamical_correlation(sx->second, sy->second).rho;
    pairs_[key] = rho;
    return rho;
  }

  void put(const TerminalId& x, const TerminalId& y, std::optional<double> rho) {
    pairs_[x < y ? std::make_pair(x, y) : std::make_pair(y, x)] = rho;
  }

  const std::map<std::pair<TerminalId, TerminalId>, std::optional<double>>& pairs() const { return pairs_; }

 private:
  std::map<TerminalId, StandardizedCurves> series_;
  std::map<std::pair<TerminalId, TerminalId>, std::optional<double>> pairs_;
};

/// Sets w = 1 - rho on each edge; edges whose correlation is undefined are removed.
inline void weight_edges(GeoGraph& g, const std::function<std::optional<double>(const TerminalId&, const TerminalId&)>& rho) {
  std::vector<GeoEdge> kept;
  for (auto e : g.edges) {
    const auto r = rho(g.nodes[e.a].id, g.nodes[e.b].id);
    if (!r) {
      g.warnings.push_back("no valid shared days for " + g.nodes[e.a].id + "-" + g.nodes[e.b].id + "; edge omitted");
      continue;
    }
    e.weight = 1.0 - std::clamp(*r, -1.0, 1.0);
    kept.push_back(e);
  }
  g.edges = std::move(kept);
}

// ---------------------------------------------------------------------------
// Minimum spanning forest and threshold cut
// ---------------------------------------------------------------------------

/// Prim's algorithm run from the smallest unvisited terminal of each component. Equal weights are
/// resolved by the smaller (id, id) pair, so the result is unique. Returns edge indices, sorted.
inline std::vector<std::size_t> prim_forest(const GeoGraph& g) {
  const std::size_t n = g.nodes.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t k = 0; k < g.edges.size(); ++k) {
    if (!std::isfinite(g.edges[k].weight)) throw ArgumentError("edge weights must be finite");
    adj[g.edges[k].a].push_back(k);
    adj[g.edges[k].b].push_back(k);
  }
  using Entry = std::tuple<double, std::size_t, std::size_t, std::size_t>;  // weight, a, b, edge
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> heap;
  std::vector<bool> in_tree(n, false);
  std::vector<std::size_t> forest;
  auto visit = [&](std::size_t v) {
    in_tree[v] = true;
    for (std::size_t k : adj[v]) {
      const auto& e = g.edges[k];
      if (!in_tree[e.a == v ? e.b : e.a]) heap.emplace(e.weight, e.a, e.b, k);
    }
  };
  for (std::size_t root = 0; root < n; ++root) {
    if (in_tree[root]) continue;
    visit(root);
    while (!heap.empty()) {
      auto [w, a, b, k] = heap.top();
      heap.pop();
      if (in_tree[a] && in_tree[b]) continue;
      forest.push_back(k);
      visit(in_tree[a] ? b : a);
    }
  }
  std::sort(forest.begin(), forest.end());
  return forest;
}

struct ClusterModel {
  std::vector<std::size_t> forest;  // edge indices into the graph
  std::vector<std::size_t> retained;  // forest edges kept after the cut
  double rho_threshold = 0.15;
  std::map<TerminalId, TerminalId> assignment;  // terminal -> cluster id (smallest member id)
  std::map<TerminalId, std::size_t> sizes;

  std::map<TerminalId, std::vector<TerminalId>> members() const {
    std::map<TerminalId, std::vector<TerminalId>> out;
    for (const auto& [t, c] : assignment) out[c].push_back(t);
    return out;
  }
};

namespace detail {

struct DisjointSets {
  std::vector<std::size_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  std::size_t find(std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(std::size_t x, std::size_t y) {
    x = find(x);
    y = find(y);
    if (x != y) parent[std::max(x, y)] = std::min(x, y);
  }
};

}  // namespace detail

/// Removes forest edges with weight above 1 - rho_threshold; clusters are the remaining components.
inline ClusterModel cut_clusters(const GeoGraph& g, const std::vector<std::size_t>& forest, double rho_threshold) {
  if (rho_threshold < -1.0 || rho_threshold > 1.0) throw ArgumentError("rho threshold must lie in [-1, 1]");
  ClusterModel m;
  m.forest = forest;
  m.rho_threshold = rho_threshold;
  detail::DisjointSets ds(g.nodes.size());
  for (std::size_t k : forest) {
    if (g.edges[k].weight <= 1.0 - rho_threshold) {
      ds.unite(g.edges[k].a, g.edges[k].b);
      m.retained.push_back(k);
    }
  }
  // Nodes are id-sorted and unite() keeps the smaller index as root, so roots are smallest members.
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    const auto& cid = g.nodes[ds.find(i)].id;
    m.assignment[g.nodes[i].id] = cid;
    ++m.sizes[cid];
  }
  return m;
}

inline std::size_t count_components(const GeoGraph& g) {
  detail::DisjointSets ds(g.nodes.size());
  for (const auto& e : g.edges) ds.unite(e.a, e.b);
  std::size_t c = 0;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) c += ds.find(i) == i;
  return c;
}

/// Mean coordinate of each cluster's members.
inline std::map<TerminalId, GeoPoint> cluster_centroids(const GeoGraph& g, const ClusterModel& m) {
  std::map<TerminalId, GeoPoint> sum;
  for (const auto& t : g.nodes) {
    auto& p = sum[m.assignment.at(t.id)];
    p.lat += t.latitude;
    p.lon += t.longitude;
  }
  for (auto& [c, p] : sum) {
    const double n = static_cast<double>(m.sizes.at(c));
    p.lat /= n;
    p.lon /= n;
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Clustering comparison metrics
// ---------------------------------------------------------------------------

using Clustering = std::map<TerminalId, std::string>;

/// Normalized mutual information 2I / (H(A) + H(B)); 1 when both entropies vanish.
inline double nmi(const Clustering& a, const Clustering& b) {
  if (a.size() != b.size() || !std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) { return x.first == y.first; }))
    throw ArgumentError("clusterings cover different node sets");
  if (a.empty()) throw ArgumentError("clusterings are empty");
  const double m = static_cast<double>(a.size());
  std::map<std::string, double> ca, cb;
  std::map<std::pair<std::string, std::string>, double> joint;
  for (const auto& [node, la] : a) {
    const auto& lb = b.at(node);
    ca[la] += 1;
    cb[lb] += 1;
    joint[{la, lb}] += 1;
  }
  auto entropy = [m](const std::map<std::string, double>& counts) {
    double h = 0;
    for (const auto& [k, c] : counts) h -= c / m * std::log(c / m);
    return h;
  };
  double info = 0;
  for (const auto& [k, n] : joint) info += n / m * std::log(n * m / (ca[k.first] * cb[k.second]));
  const double ha = entropy(ca), hb = entropy(cb);
  if (ha + hb <= 0) return 1.0;
  return std::clamp(2.0 * info / (ha + hb), 0.0, 1.0);
}

inline Clustering to_clustering(const ClusterModel& m) {
  return Clustering(m.assignment.begin(), m.assignment.end());
}

/// Standard deviation of cluster sizes; undefined for a single cluster.
inline std::optional<double> sdcs(const std::vector<std::size_t>& sizes) {
  const std::size_t k = sizes.size();
  if (k < 2) return std::nullopt;
  const double total = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
  const double mean = total / static_cast<double>(k);
  double ss = 0;
  for (auto s : sizes) ss += (static_cast<double>(s) - mean) * (static_cast<double>(s) - mean);
  return std::sqrt(ss / static_cast<double>(k - 1));
}

inline std::optional<double> sdcs(const ClusterModel& m) {
  std::vector<std::size_t> sizes;
  for (const auto& [c, s] : m.sizes) sizes.push_back(s);
  return sdcs(sizes);
}

// ---------------------------------------------------------------------------
// Parameter sweep
// ---------------------------------------------------------------------------

struct SweepGrid {
  std::vector<double> rho{0.15};
  std::vector<double> radius_m{5000.0};
  std::vector<double> d_inner_m{500.0};
  std::vector<double> d_outer_m{1000.0};
};

struct SweepRow {
  double rho = 0;
  GraphParams params;
  std::size_t clusters = 0;
  std::size_t components = 0;
  std::optional<double> sdcs;
};

/// Clusters a terminal set at one parameter combination using memoized correlations.
inline std::pair<GeoGraph, ClusterModel> cluster_terminals(const std::vector<Terminal>& terminals, CorrelationCache& cache,
                                                           const GraphParams& p, double rho) {
  GeoGraph g = build_geo_graph(terminals, p);
  weight_edges(g, [&](const TerminalId& x, const TerminalId& y) { return cache.get(x, y); });
  auto forest = prim_forest(g);
  auto model = cut_clusters(g, forest, rho);
  return {std::move(g), std::move(model)};
}

inline std::vector<SweepRow> sweep_parameters(const std::vector<Terminal>& terminals, CorrelationCache& cache,
                                              const SweepGrid& grid) {
  if (grid.rho.empty() || grid.radius_m.empty() || grid.d_inner_m.empty() || grid.d_outer_m.empty())
    throw ArgumentError("sweep grid must be nonempty in every dimension");
  std::vector<SweepRow> rows;
  for (double r : grid.radius_m)
    for (double din : grid.d_inner_m)
      for (double dout : grid.d_outer_m) {
        const GraphParams p{r, din, dout};
        GeoGraph g = build_geo_graph(terminals, p);
        weight_edges(g, [&](const TerminalId& x, const TerminalId& y) { return cache.get(x, y); });
        const auto forest = prim_forest(g);
        const std::size_t comps = count_components(g);
        for (double rho : grid.rho) {
          const auto m = cut_clusters(g, forest, rho);
          rows.push_back({rho, p, m.sizes.size(), comps, sdcs(m)});
        }
      }
  return rows;
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

inline void write_assignment_table(std::ostream& out, const ClusterModel& m) {
  out << "terminal,cluster,cluster_size\n";
  for (const auto& [t, c] : m.assignment) out << csv::quote(t) << ',' << csv::quote(c) << ',' << m.sizes.at(c) << '\n';
}

/// GeoJSON FeatureCollection: one Point per terminal and one LineString per retained forest edge.
inline nlohmann::json cluster_geojson(const GeoGraph& g, const ClusterModel& m) {
  nlohmann::json features = nlohmann::json::array();
  for (const auto& t : g.nodes) {
    const auto& c = m.assignment.at(t.id);
    features.push_back({{"type", "Feature"},
                        {"geometry", {{"type", "Point"}, {"coordinates", {t.longitude, t.latitude}}}},
                        {"properties", {{"terminal", t.id}, {"cluster", c}, {"cluster_size", m.sizes.at(c)}}}});
  }
  for (std::size_t k : m.retained) {
    const auto& e = g.edges[k];
    const auto& x = g.nodes[e.a];
    const auto& y = g.nodes[e.b];
    features.push_back({{"type", "Feature"},
                        {"geometry",
                         {{"type", "LineString"},
                          {"coordinates", {{x.longitude, x.latitude}, {y.longitude, y.latitude}}}}},
                        {"properties",
                         {{"from", x.id}, {"to", y.id}, {"weight", e.weight}, {"distance_m", e.geo_distance_m}}}});
  }
  return {{"type", "FeatureCollection"}, {"features", features}};
}

}  // namespace bikedepth
