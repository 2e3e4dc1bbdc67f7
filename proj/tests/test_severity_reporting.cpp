#include "bikedepth/plot.hpp"
#include "support.hpp"

using namespace bikedepth;
using namespace testing_support;

namespace {

std::vector<double> beta_sample(std::mt19937_64& rng, double a, double b, double scale, std::size_t n) {
  std::gamma_distribution<double> ga(a, 1.0), gb(b, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) {
    const double x = ga(rng), y = gb(rng);
    v = scale * x / (x + y);
  }
  return out;
}

/// Regularized incomplete beta by composite Simpson integration of the density.
double simpson_ibeta(double a, double b, double u) {
  const int n = 20000;
  const double lb = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  auto f = [&](double t) {
    if (t <= 0 || t >= 1) return (t <= 0 ? (a == 1 ? 1.0 : 0.0) : (b == 1 ? 1.0 : 0.0)) / std::exp(lb);
    return std::exp((a - 1) * std::log(t) + (b - 1) * std::log1p(-t) - lb);
  };
  const double h = u / n;
  double s = f(0) + f(u);
  for (int i = 1; i < n; ++i) s += f(i * h) * (i % 2 ? 4 : 2);
  return s * h / 3;
}

ScoredClusterDay scored(const TerminalId& c, const Date& d, double z, std::optional<double> sev, Direction dir,
                        std::vector<TerminalId> contributors = {}) {
  ClusterDayExceedance e{c, d, z, contributors.size(), contributors, {}, std::nullopt};
  if (z > 0) e.direction = dir;
  return {e, sev};
}

}  // namespace

// ---- severity model --------------------------------------------------------

TEST(Severity, RecoversBetaShapesOnScaledSupport) {
  std::mt19937_64 rng(41);
  const auto z = beta_sample(rng, 2.0, 5.0, 9.0, 5000);
  const auto fit = fit_beta4(z, 9.0, {}, "C1");
  ASSERT_TRUE(fit.model.has_value());
  EXPECT_NEAR(fit.model->alpha, 2.0, 0.15);
  EXPECT_NEAR(fit.model->beta, 5.0, 0.4);
  EXPECT_EQ(fit.model->cluster, "C1");
  EXPECT_EQ(fit.model->samples, 5000u);
  EXPECT_DOUBLE_EQ(fit.model->upper, 9.0);
}

TEST(Severity, MaximumLikelihoodDoesNotLoseToMoments) {
  std::mt19937_64 rng(42);
  const auto z = beta_sample(rng, 0.7, 3.0, 4.0, 400);
  const auto fit = fit_beta4(z, 4.0);
  ASSERT_TRUE(fit.model);
  // Moments estimate computed independently.
  double m = 0, v = 0;
  for (double x : z) m += x / 4.0;
  m /= static_cast<double>(z.size());
  for (double x : z) v += std::pow(x / 4.0 - m, 2);
  v /= static_cast<double>(z.size() - 1);
  const double k = m * (1 - m) / v - 1;
  SeverityModel mom{"", m * k, (1 - m) * k, 0.0, 4.0, z.size(), false};
  EXPECT_GE(beta4_loglik(*fit.model, z), beta4_loglik(mom, z) - 1e-9);
}

TEST(Severity, BoundsClampingAndMonotonicity) {
  SeverityModel m{"C", 2.0, 5.0, 0.0, 4.0, 100, true};
  EXPECT_EQ(severity(m, 0.0), 0.0);
  EXPECT_EQ(severity(m, 4.0), 1.0);
  bool clamped = false;
  EXPECT_EQ(severity(m, 6.0, &clamped), 1.0);
  EXPECT_TRUE(clamped);
  severity(m, 2.0, &clamped);
  EXPECT_FALSE(clamped);
  double prev = 0;
  for (double z = 0.05; z < 4.0; z += 0.05) {
    const double s = severity(m, z);
    EXPECT_GT(s, prev);
    prev = s;
  }
}

TEST(Severity, IncompleteBetaMatchesQuadrature) {
  for (auto [a, b] : {std::pair{2.0, 5.0}, {1.0, 1.0}, {3.5, 1.2}, {1.0, 4.0}})
    for (double u : {0.1, 0.37, 0.5, 0.9}) {
      SeverityModel m{"", a, b, 0.0, 1.0, 0, false};
      EXPECT_NEAR(severity(m, u), simpson_ibeta(a, b, u), 1e-8) << a << "," << b << "," << u;
    }
}

TEST(Severity, TooFewSamplesLeavesSeverityUnavailable) {
  std::mt19937_64 rng(43);
  const auto fit = fit_beta4(beta_sample(rng, 2, 2, 3, 10), 3.0);
  EXPECT_FALSE(fit.model.has_value());
  EXPECT_FALSE(fit.note.empty());
  EXPECT_THROW(fit_beta4({1.0}, 0.0), ArgumentError);
}

TEST(Severity, GpdFitOnExponentialData) {
  std::mt19937_64 rng(44);
  std::exponential_distribution<double> e(1.0 / 2.0);
  std::vector<double> x(4000);
  for (auto& v : x) v = e(rng);
  const auto g = fit_gpd(x);
  EXPECT_NEAR(g.shape, 0.0, 0.08);
  EXPECT_NEAR(g.scale, 2.0, 0.15);
  EXPECT_GE(gpd_loglik(g, x), gpd_loglik({0.0, 2.0}, x) - 1e-6);
  EXPECT_THROW(fit_gpd({}), ArgumentError);
}

// ---- alerts -----------------------------------------------------------------

TEST(Reporting, AlertsRankBySeverityThenRawExceedance) {
  const Date d = make_date(2018, 7, 4), other = make_date(2018, 7, 5);
  std::vector<ScoredClusterDay> days{scored("A", d, 0.4, 0.2, Direction::positive, {"A"}),
                                     scored("B", d, 0.1, 0.9, Direction::negative, {"B"}),
                                     scored("C", d, 2.0, std::nullopt, Direction::positive, {"C"}),
                                     scored("D", d, 3.0, std::nullopt, Direction::positive, {"D"}),
                                     scored("E", d, 0.0, std::nullopt, Direction::positive),
                                     scored("F", other, 5.0, 1.0, Direction::positive, {"F"})};
  const std::map<TerminalId, std::vector<TerminalId>> members{{"A", {"A", "A2", "A3"}}, {"B", {"B"}}};
  const auto alerts = alert_list(d, days, members);
  ASSERT_EQ(alerts.size(), 4u);
  EXPECT_EQ(alerts[0].cluster, "B");
  EXPECT_EQ(alerts[1].cluster, "A");
  EXPECT_EQ(alerts[2].cluster, "D");
  EXPECT_EQ(alerts[3].cluster, "C");
  for (std::size_t i = 0; i < alerts.size(); ++i) EXPECT_EQ(alerts[i].rank, i + 1);
  EXPECT_EQ(alerts[0].direction, Direction::negative);
  EXPECT_EQ(alerts[1].co_cluster, (std::vector<TerminalId>{"A2", "A3"}));

  std::ostringstream csv;
  write_alerts_csv(csv, alerts);
  const std::string text = csv.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
  const auto j = alerts_json(alerts);
  EXPECT_EQ(j.size(), 4u);
  EXPECT_TRUE(j[2]["severity"].is_null());
}

TEST(Reporting, ClusterOrderings) {
  const std::map<TerminalId, GeoPoint> c{{"A", {38.95, -77.10}}, {"B", {38.80, -77.00}}, {"C", {38.90, -77.02}}};
  const GeoPoint center{38.90, -77.03};
  EXPECT_EQ(order_clusters(c, center, ClusterOrder::distance), (std::vector<TerminalId>{"C", "A", "B"}));
  EXPECT_EQ(order_clusters(c, center, ClusterOrder::north_south), (std::vector<TerminalId>{"A", "C", "B"}));
  EXPECT_EQ(order_clusters(c, center, ClusterOrder::west_east), (std::vector<TerminalId>{"A", "C", "B"}));
  EXPECT_THROW(parse_cluster_order("random"), ArgumentError);
}

TEST(Reporting, HeatmapCsvRoundTripsAndRendersSvg) {
  const DateRange range{make_date(2018, 1, 1), make_date(2018, 1, 10)};
  std::vector<ScoredClusterDay> days{scored("A", make_date(2018, 1, 2), 1.0, 0.75, Direction::positive),
                                     scored("B", make_date(2018, 1, 2), 0.5, std::nullopt, Direction::negative),
                                     scored("B", make_date(2018, 1, 9), 0.5, 0.125, Direction::negative),
                                     scored("A", make_date(2018, 2, 9), 0.5, 0.5, Direction::positive)};
  const auto h = severity_heatmap(range, {"B", "A"}, days);
  ASSERT_EQ(h.dates.size(), 10u);
  std::stringstream ss;
  write_heatmap_csv(ss, h);
  const auto back = read_heatmap_csv(ss);
  EXPECT_EQ(back.clusters, h.clusters);
  EXPECT_EQ(back.dates, h.dates);
  std::size_t outliers = 0;
  for (std::size_t i = 0; i < h.dates.size(); ++i)
    for (std::size_t j = 0; j < h.clusters.size(); ++j) {
      EXPECT_EQ(back.cells[i][j].outlier, h.cells[i][j].outlier);
      EXPECT_EQ(back.cells[i][j].severity, h.cells[i][j].severity);
      outliers += h.cells[i][j].outlier;
    }
  EXPECT_EQ(outliers, 3u);

  const auto svg = heatmap_svg(back);
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  std::size_t cells = 0;
  for (auto p = svg.find("class=\"cell\""); p != std::string::npos; p = svg.find("class=\"cell\"", p + 1)) ++cells;
  EXPECT_EQ(cells, 3u);
  std::istringstream bad("when,A\n");
  EXPECT_THROW(read_heatmap_csv(bad), DataError);
}

TEST(Reporting, DepthPanelMarksFlaggedDays) {
  std::vector<DepthRecord> rows;
  for (int i = 0; i < 20; ++i) {
    const Date d{to_days(make_date(2018, 3, 1)) + std::chrono::days{i}};
    const double depth = i == 7 || i == 12 ? 0.2 : 1.0;
    rows.push_back({"A", d, assign_partition(d), depth, 0.5, normalize_depth(depth, 0.5)});
  }
  const auto svg = depth_panel_svg("A", rows);
  std::size_t flags = 0;
  for (auto p = svg.find("class=\"flag\""); p != std::string::npos; p = svg.find("class=\"flag\"", p + 1)) ++flags;
  EXPECT_EQ(flags, 2u);
  EXPECT_NE(svg.find("class=\"threshold\""), std::string::npos);
}

TEST(Reporting, PosNegSeriesAndTerminalCounts) {
  const DateRange range{make_date(2018, 1, 1), make_date(2018, 1, 3)};
  std::vector<ScoredClusterDay> days{scored("A", make_date(2018, 1, 1), 1, 0.5, Direction::positive),
                                     scored("B", make_date(2018, 1, 1), 1, 0.5, Direction::negative),
                                     scored("C", make_date(2018, 1, 1), 1, 0.5, Direction::negative),
                                     scored("A", make_date(2018, 1, 3), 0, std::nullopt, Direction::positive)};
  const auto s = pos_neg_series(range, days);
  ASSERT_EQ(s.size(), 3u);
  EXPECT_EQ(s[0].positive, 1u);
  EXPECT_EQ(s[0].negative, 2u);
  EXPECT_EQ(s[2].positive + s[2].negative, 0u);

  std::vector<DepthRecord> rec{{"A", make_date(2018, 1, 1), {}, 0, 1.0, 0.5},
                               {"A", make_date(2018, 1, 2), {}, 0, 1.0, -0.5},
                               {"A", make_date(2018, 1, 3), {}, 0, 1.0, 0.1},
                               {"B", make_date(2018, 1, 9), {}, 0, 1.0, 0.9},
                               {"C", make_date(2018, 1, 2), {}, 0, std::nullopt, std::nullopt}};
  const auto counts = terminal_outlier_counts(range, rec);
  EXPECT_EQ(counts.size(), 1u);
  EXPECT_EQ(counts.at("A"), 2u);
}

TEST(Reporting, CosineSimilarityValues) {
  EXPECT_NEAR(*cosine_similarity({1, 2, 3}, {2, 4, 6}), 1.0, 1e-15);
  EXPECT_NEAR(*cosine_similarity({1, 0}, {0, 1}), 0.0, 1e-15);
  EXPECT_NEAR(*cosine_similarity({1, 0}, {1, 1}), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_FALSE(cosine_similarity({0, 0}, {1, 1}).has_value());
  EXPECT_THROW(cosine_similarity({1}, {1, 2}), ArgumentError);
}

// ---- weather ----------------------------------------------------------------

TEST(Weather, MetricUnitsConvertAndDuplicatesReported) {
  std::istringstream in("datetime,temp,precip\n2018-01-01,0,25.4\n2018-01-02,100,\n2018-01-02,5,1\nbad,1,1\n");
  const auto r = parse_weather(in, {"datetime", "temp", "precip", "metric"});
  ASSERT_EQ(r.days.size(), 2u);
  EXPECT_DOUBLE_EQ(r.days[0].temperature_f, 32.0);
  EXPECT_DOUBLE_EQ(r.days[0].precipitation_in, 1.0);
  EXPECT_DOUBLE_EQ(r.days[1].temperature_f, 212.0);
  EXPECT_DOUBLE_EQ(r.days[1].precipitation_in, 0.0);
  ASSERT_EQ(r.errors.size(), 2u);
  EXPECT_EQ(r.errors[0].message, "duplicate date");
  std::istringstream again("datetime,temp,precip\n");
  EXPECT_THROW(parse_weather(again, {"datetime", "temp", "precip", "kelvin"}), ConfigError);
}

TEST(Weather, CrosstabBinEdges) {
  const std::vector<WeatherDay> w{{make_date(2018, 1, 1), 14.9, 0.0},
                                  {make_date(2018, 1, 2), 15.0, 0.01},
                                  {make_date(2018, 1, 3), 95.0, 2.0},
                                  {make_date(2018, 1, 4), 50.0, 0.3}};
  const std::vector<DaySeverity> days{{make_date(2018, 1, 1), std::nullopt, std::nullopt},
                                      {make_date(2018, 1, 2), 0.25, 0.0},
                                      {make_date(2018, 1, 3), 0.26, 1.0},
                                      {make_date(2018, 1, 4), 0.75, std::nullopt},
                                      {make_date(2018, 1, 5), 0.5, 0.5}};
  const auto t = weather_crosstab(days, w);
  EXPECT_EQ(t.missing_weather, 1u);
  EXPECT_EQ(t.temperature.rows.front(), "<15");
  EXPECT_EQ(t.temperature.rows.back(), ">=95");
  EXPECT_EQ(t.temperature.columns.size(), 5u);
  EXPECT_EQ(t.temperature.counts[0][0], 1u);  // 14.9, no outlier
  EXPECT_EQ(t.temperature.counts[1][1], 1u);  // 15 -> [15,20), severity 0.25 -> first column
  EXPECT_EQ(t.temperature.counts.back()[2], 1u);  // 95 -> >=95, severity 0.26 -> (0.25,0.5]
  EXPECT_EQ(t.temperature.counts[8][3], 1u);  // 50 -> [50,55), 0.75 -> (0.5,0.75]
  EXPECT_EQ(t.precipitation.counts[1][0], 1u);  // 0.0 -> [0,0.01)
  EXPECT_EQ(t.precipitation.counts[2][1], 1u);  // 0.01 -> [0.01,0.1), severity 0 -> first column
  EXPECT_EQ(t.precipitation.counts.back()[4], 1u);
  for (const auto& row : t.temperature.proportions) {
    const double s = std::accumulate(row.begin(), row.end(), 0.0);
    EXPECT_TRUE(s == 0.0 || std::abs(s - 1.0) < 1e-12);
  }
  SeverityBins bad;
  bad.temperature_edges = {3, 1};
  EXPECT_THROW(weather_crosstab(days, w, bad), ArgumentError);
}
