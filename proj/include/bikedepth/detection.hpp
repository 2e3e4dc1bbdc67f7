#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bikedepth/baseline.hpp"
#include "bikedepth/core.hpp"
#include "bikedepth/depth.hpp"

namespace bikedepth {

enum class Direction { positive, negative };

inline std::string to_string(Direction d) { return d == Direction::positive ? "positive" : "negative"; }

inline Direction parse_direction(const std::string& s) {
  if (s == "positive") return Direction::positive;
  if (s == "negative") return Direction::negative;
  throw DataError("bad direction '" + s + "'");
}

struct ClusterDayExceedance {
  TerminalId cluster;
  Date date;
  double z_n = 0.0;
  std::size_t size = 0;                    // S
  std::vector<TerminalId> contributors;    // z_{n,s} > 0
  std::vector<TerminalId> missing;         // members with no score that day
  std::optional<Direction> direction;      // set only when z_n > 0

  bool is_outlier() const { return z_n > 0; }
};

/// Sum of positive normalized depths over a cluster's members for one day. Members absent from
/// `z` (or with an unscored day) contribute zero and are listed as missing.
inline ClusterDayExceedance cluster_exceedance(const TerminalId& cluster, const std::vector<TerminalId>& members,
                                               const Date& date, const std::map<TerminalId, std::optional<double>>& z) {
  ClusterDayExceedance out{cluster, date, 0.0, members.size(), {}, {}, std::nullopt};
  for (const auto& t : members) {
    auto it = z.find(t);
    if (it == z.end() || !it->second) {
      out.missing.push_back(t);
      continue;
    }
    if (*it->second > 0) {
      out.z_n += *it->second;
      out.contributors.push_back(t);
    }
  }
  return out;
}

/// Positive when the contributing residual mass is nonnegative (zero counts as positive).
inline Direction classify_direction(const std::vector<const ResidualCurve*>& contributing) {
  double total = 0;
  for (const auto* r : contributing) total += r->integral();
  return total >= 0 ? Direction::positive : Direction::negative;
}

}  // namespace bikedepth
