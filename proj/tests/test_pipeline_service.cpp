#include <sys/wait.h>

#include <cstdlib>
#include <future>
#include <thread>

#include "bikedepth/service.hpp"
#include "support.hpp"

using namespace bikedepth;
using namespace testing_support;

namespace {

/// One generated dataset shared by every test in this file; each test gets its own cache.
class Fixture : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new TempDir("data");
    config_ = write_small_fixture(data_->path());
  }
  static void TearDownTestSuite() {
    delete data_;
    data_ = nullptr;
  }

  PipelineConfig config(const json& overrides = json::object()) {
    json o = {{"cache_dir", (work_.path() / "cache").string()}, {"output_dir", (work_.path() / "run").string()}};
    o.merge_patch(overrides);
    return load_config(config_, o);
  }

  static std::vector<json> stages_named(const json& manifest, const std::string& name) {
    std::vector<json> out;
    for (const auto& s : manifest["stages"])
      if (s["stage"] == name) out.push_back(s);
    return out;
  }

  static inline TempDir* data_ = nullptr;
  static inline fs::path config_;
  TempDir work_{"work"};
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(BIKEDEPTH_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

// ---- pipeline ---------------------------------------------------------------

TEST_F(Fixture, FullRunWritesManifestAndArtifacts) {
  const auto cfg = config();
  const auto r = run_pipeline(cfg);
  ASSERT_EQ(r.exit_code, kExitOk) << r.manifest["error"].dump();
  const auto m = artifacts::read_json(cfg.output_dir / "manifest.json");
  EXPECT_EQ(m["status"], "complete");
  EXPECT_EQ(m["config_hash"], config_hash(cfg));
  for (const char* s : {"ingest", "baseline", "depth", "correlation", "cluster", "detect", "report", "sweep"})
    EXPECT_EQ(stages_named(m, s).size(), 1u) << s;
  const auto& report = r.stages.at(CurveKind::usage).report.dir;
  for (const char* f : {"alerts.csv", "alerts.json", "heatmap.csv", "posneg.csv", "report.json", "weather_crosstab.json"})
    EXPECT_TRUE(fs::exists(report / f)) << f;
  const auto a = artifacts::read_assignment(r.stages.at(CurveKind::usage).cluster.dir / "assignment.csv");
  EXPECT_EQ(a.cluster_of.size(), 6u);
  for (const auto& s : m["stages"]) EXPECT_FALSE(s["cache_hit"].get<bool>());
}

TEST_F(Fixture, RerunHitsCacheAndFreshCacheIsByteIdentical) {
  const auto first = run_pipeline(config());
  ASSERT_EQ(first.exit_code, 0);
  const auto again = run_pipeline(config());
  ASSERT_EQ(again.exit_code, 0);
  for (const auto& s : again.manifest["stages"]) EXPECT_TRUE(s["cache_hit"].get<bool>()) << s["stage"];

  TempDir other("other");
  const auto fresh = run_pipeline(config({{"cache_dir", (other.path() / "cache").string()}}));
  ASSERT_EQ(fresh.exit_code, 0);
  const auto& a = first.stages.at(CurveKind::usage);
  const auto& b = fresh.stages.at(CurveKind::usage);
  for (auto [x, y] : {std::pair{a.baseline, b.baseline}, {a.depth, b.depth}, {a.cluster, b.cluster}, {a.detect, b.detect},
                      {a.report, b.report}, {a.sweep, b.sweep}}) {
    EXPECT_EQ(x.key, y.key);
    std::vector<std::string> diffs;
    EXPECT_TRUE(artifacts::same_tree(x.dir, y.dir, &diffs)) << join(diffs, ", ");
  }
}

TEST_F(Fixture, ChangingRhoOnlyRecomputesDownstreamStages) {
  ASSERT_EQ(run_pipeline(config()).exit_code, 0);
  ClusterParams p = config().clustering;
  p.rho = 0.6;
  const auto r = run_pipeline(config(), StopAfter::report, p);
  ASSERT_EQ(r.exit_code, 0);
  for (const char* s : {"ingest", "baseline", "depth", "correlation", "sweep"})
    EXPECT_TRUE(stages_named(r.manifest, s).at(0)["cache_hit"].get<bool>()) << s;
  for (const char* s : {"cluster", "detect", "report"})
    EXPECT_FALSE(stages_named(r.manifest, s).at(0)["cache_hit"].get<bool>()) << s;
}

TEST_F(Fixture, StopAfterLimitsStages) {
  const auto r = run_pipeline(config(), StopAfter::baseline);
  ASSERT_EQ(r.exit_code, 0);
  EXPECT_EQ(stages_named(r.manifest, "baseline").size(), 1u);
  EXPECT_TRUE(stages_named(r.manifest, "cluster").empty());
}

TEST_F(Fixture, AuditPassesThenCatchesCorruptedCache) {
  ASSERT_EQ(run_pipeline(config()).exit_code, 0);
  const auto ok = run_pipeline(config({{"audit", true}, {"audit_fraction", 1.0}}));
  ASSERT_EQ(ok.exit_code, kExitOk) << ok.manifest["audit"].dump();
  EXPECT_EQ(ok.audit.sampled.size(), ok.audit.hits);
  EXPECT_TRUE(ok.audit.mismatches.empty());

  const fs::path depths = ok.stages.at(CurveKind::usage).depth.dir / "depths.csv";
  std::string text = read_file(depths);
  text.back() = text.back() == '\n' ? ' ' : '\n';
  write_file(depths, text);
  const auto bad = run_pipeline(config({{"audit", true}, {"audit_fraction", 1.0}}));
  EXPECT_EQ(bad.exit_code, kExitAudit);
  EXPECT_EQ(bad.manifest["status"], "audit_failed");
  // The corrupted depth entry fails, and so may stages whose recomputation reads it.
  ASSERT_FALSE(bad.audit.mismatches.empty());
  EXPECT_TRUE(std::any_of(bad.audit.mismatches.begin(), bad.audit.mismatches.end(),
                          [](const std::string& mm) { return mm.rfind("depth/", 0) == 0; }))
      << join(bad.audit.mismatches, "\n");
  for (const auto& mm : bad.audit.mismatches)
    EXPECT_TRUE(mm.rfind("depth/", 0) == 0 || mm.rfind("detect/", 0) == 0 || mm.rfind("report/", 0) == 0) << mm;
}

TEST_F(Fixture, ConfigErrors) {
  EXPECT_THROW(config({{"clustering", {{"rho", 3.0}}}}), ConfigError);
  EXPECT_THROW(config({{"no_such_section", 1}}), ConfigError);
  EXPECT_THROW(config({{"data", {{"stations", "missing.csv"}}}}), ConfigError);
  EXPECT_THROW(load_config(work_.path() / "absent.json"), ConfigError);
  write_file(work_.path() / "broken.json", "{ not json");
  EXPECT_THROW(load_config(work_.path() / "broken.json"), ConfigError);
}

TEST_F(Fixture, DataRootFromEnvironment) {
  const fs::path elsewhere = work_.path() / "cfg" / "config.json";
  write_file(elsewhere, read_file(config_));
  EXPECT_THROW(load_config(elsewhere), ConfigError);
  ::setenv(kDataRootEnv, data_->path().c_str(), 1);
  PipelineConfig c;
  EXPECT_NO_THROW(c = load_config(elsewhere));
  ::unsetenv(kDataRootEnv);
  EXPECT_EQ(c.stations, (data_->path() / "stations.csv").lexically_normal());
}

TEST_F(Fixture, EmptyTripFileIsDataError) {
  const fs::path dir = work_.path() / "empty";
  write_file(dir / "trips.csv", "Start date,End date,Start station number,End station number\n");
  fs::copy_file(data_->path() / "stations.csv", dir / "stations.csv");
  write_file(dir / "config.json", json{{"data", {{"trips", "trips.csv"}, {"stations", "stations.csv"}}}}.dump());
  auto cfg = load_config(dir / "config.json", {{"cache_dir", (dir / "cache").string()}, {"output_dir", (dir / "run").string()}});
  const auto r = run_pipeline(cfg);
  EXPECT_EQ(r.exit_code, kExitData);
  EXPECT_EQ(r.manifest["status"], "failed");
  EXPECT_EQ(r.manifest["error"]["class"], "data");
}

// ---- HTTP service -------------------------------------------------------------

namespace {

class Served {
 public:
  explicit Served(PipelineConfig cfg, ServiceOptions opt = {}) : service_(std::move(cfg), opt) {
    port_ = service_.bind_any_port();
    thread_ = std::thread([this] { service_.listen_after_bind(); });
    while (!service_.server().is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  ~Served() {
    service_.stop();
    thread_.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(120, 0);
    return c;
  }
  Service& service() { return service_; }

 private:
  Service service_;
  int port_ = 0;
  std::thread thread_;
};

json body_of(const httplib::Result& r) {
  EXPECT_TRUE(r);
  return r ? json::parse(r->body) : json();
}

}  // namespace

TEST_F(Fixture, ServiceEndpoints) {
  ASSERT_EQ(run_pipeline(config()).exit_code, 0);
  const auto data_before = tree_digest(data_->path());
  Served s(config());
  auto c = s.client();

  auto status = body_of(c.Get("/v1/status"));
  EXPECT_EQ(status["kinds"], json::array({"usage"}));
  EXPECT_EQ(status["config_hash"], config_hash(config()));
  const std::string first = status["range"]["first"], last = status["range"]["last"];

  auto terminals = c.Get("/v1/terminals");
  ASSERT_EQ(terminals->status, 200);
  EXPECT_EQ(json::parse(terminals->body)["terminals"].size(), 6u);

  auto clusters = body_of(c.Get("/v1/clusters"));
  std::size_t total = 0;
  for (const auto& k : clusters["clusters"]) total += k["size"].get<std::size_t>();
  EXPECT_EQ(total, 6u);
  EXPECT_EQ(clusters["geojson"]["type"], "FeatureCollection");
  const std::string id = clusters["clusters"][0]["id"];

  auto one = c.Get(("/v1/clusters/" + id).c_str());
  ASSERT_EQ(one->status, 200);
  EXPECT_EQ(json::parse(one->body)["id"], id);
  auto missing = c.Get("/v1/clusters/nope");
  EXPECT_EQ(missing->status, 404);
  EXPECT_EQ(json::parse(missing->body)["error"]["code"], "not_found");

  EXPECT_EQ(body_of(c.Get("/v1/sweep"))["rows"].size(), 3u);

  EXPECT_EQ(c.Get("/v1/depths")->status, 400);
  EXPECT_EQ(c.Get("/v1/depths?terminal=ZZZ")->status, 404);
  const std::string term = clusters["clusters"][0]["members"][0];
  auto depths = body_of(c.Get(("/v1/depths?terminal=" + term).c_str()));
  EXPECT_FALSE(depths["days"].empty());
  EXPECT_FALSE(depths["insufficient_data"].get<bool>());

  EXPECT_EQ(c.Get("/v1/outliers?date=2018-13-01")->status, 400);
  EXPECT_EQ(c.Get("/v1/outliers")->status, 400);
  auto heat = body_of(c.Get("/v1/heatmap"));
  const auto dates = heat["dates"];
  EXPECT_EQ(dates.front(), first);
  EXPECT_EQ(dates.back(), last);
  std::string outlier_date;
  for (std::size_t i = 0; i < heat["cells"].size() && outlier_date.empty(); ++i)
    for (const auto& cell : heat["cells"][i])
      if (!cell.is_null()) outlier_date = dates[i];
  ASSERT_FALSE(outlier_date.empty());
  auto outliers = body_of(c.Get(("/v1/outliers?date=" + outlier_date).c_str()));
  EXPECT_FALSE(outliers["outliers"].empty());
  auto alerts = body_of(c.Get(("/v1/alerts?date=" + outlier_date).c_str()));
  EXPECT_EQ(alerts["alerts"].size(), outliers["outliers"].size());
  EXPECT_EQ(alerts["alerts"][0]["rank"], 1);

  EXPECT_EQ(c.Get(("/v1/heatmap?from=" + last + "&to=" + first).c_str())->status, 400);
  EXPECT_EQ(c.Get("/v1/heatmap?order=sideways")->status, 400);
  EXPECT_EQ(c.Get("/v1/heatmap?rho=7")->status, 400);
  EXPECT_EQ(c.Get("/v1/clusters?kind=pickup")->status, 400);
  EXPECT_EQ(body_of(c.Get("/v1/weather-crosstab"))["units"]["temperature"], "degF");
  auto nowhere = c.Get("/v1/nowhere");
  EXPECT_EQ(nowhere->status, 404);
  EXPECT_EQ(json::parse(nowhere->body)["error"]["code"], "not_found");

  EXPECT_EQ(tree_digest(data_->path()), data_before);
}

TEST_F(Fixture, ReclusterValidatesAndCoalescesConcurrentRequests) {
  ASSERT_EQ(run_pipeline(config()).exit_code, 0);
  ServiceOptions opt;
  opt.sync_wait = std::chrono::milliseconds(0);
  Served s(config(), opt);
  auto c = s.client();

  auto bad = c.Post("/v1/recluster", R"({"rho": 0.3, "colour": 1})", "application/json");
  EXPECT_EQ(bad->status, 400);
  EXPECT_EQ(json::parse(bad->body)["error"]["code"], "unknown_field");
  EXPECT_EQ(c.Post("/v1/recluster", R"({"rho": 2})", "application/json")->status, 400);
  EXPECT_EQ(c.Post("/v1/recluster", "[1]", "application/json")->status, 400);
  EXPECT_EQ(c.Post("/v1/recluster", "{oops", "application/json")->status, 400);

  const std::size_t before = s.service().computations();
  std::vector<std::future<json>> posts;
  for (int i = 0; i < 4; ++i)
    posts.push_back(std::async(std::launch::async, [&s] {
      auto cc = s.client();
      auto r = cc.Post("/v1/recluster", R"({"rho": 0.55, "R": 4000})", "application/json");
      EXPECT_TRUE(r->status == 200 || r->status == 202);
      return json::parse(r->body);
    }));
  std::set<std::string> tokens;
  for (auto& f : posts) tokens.insert(f.get()["token"].get<std::string>());
  ASSERT_EQ(tokens.size(), 1u);

  json job;
  for (int i = 0; i < 1200; ++i) {
    job = body_of(c.Get(("/v1/jobs/" + *tokens.begin()).c_str()));
    if (job["status"] == "done" || job["status"] == "failed") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  ASSERT_EQ(job["status"], "done") << job.dump();
  EXPECT_EQ(s.service().computations(), before + 1);

  auto view = body_of(c.Get("/v1/clusters?rho=0.55&R=4000"));
  EXPECT_EQ(view["key"], job["result"]["cluster_key"]);
  auto repeat = c.Post("/v1/recluster", R"({"R": 4000, "rho": 0.55})", "application/json");
  EXPECT_EQ(repeat->status, 200);
  EXPECT_EQ(s.service().computations(), before + 1);
  EXPECT_EQ(c.Get("/v1/jobs/0123abcd")->status, 404);
}

TEST_F(Fixture, WeatherEndpointWithoutWeatherIs404) {
  auto cfg = config();
  cfg.weather.reset();
  ASSERT_EQ(run_pipeline(cfg).exit_code, 0);
  Served s(cfg);
  auto r = s.client().Get("/v1/weather-crosstab");
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(json::parse(r->body)["error"]["code"], "not_configured");
}

// ---- command line -------------------------------------------------------------

TEST_F(Fixture, CliExitCodesAndOutputs) {
  const std::string dirs = " --cache-dir " + (work_.path() / "cache").string() + " --output-dir " + (work_.path() / "run").string();
  EXPECT_EQ(run_cli("run -c " + config_.string() + dirs), 0);
  EXPECT_TRUE(fs::exists(work_.path() / "run" / "manifest.json"));
  EXPECT_EQ(run_cli("run -c " + config_.string() + dirs + " --audit 0.5"), 0);
  const auto m = artifacts::read_json(work_.path() / "run" / "manifest.json");
  EXPECT_EQ(run_cli("run -c " + (work_.path() / "absent.json").string()), 2);
  EXPECT_EQ(run_cli("run -c " + config_.string() + dirs + " --rho 4"), 2);
  EXPECT_EQ(run_cli("run -c " + config_.string() + dirs + " --set no.such=1"), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("baseline -c " + config_.string() + dirs + " --policy fixed --factors day+month --summer-start 05-01"), 0);
  EXPECT_EQ(run_cli("baseline -c " + config_.string() + dirs + " --summer-start 13-40"), 2);
  EXPECT_EQ(run_cli("cluster -c " + config_.string() + dirs + " --rho 0.4"), 0);
  fs::path report, depth;
  for (const auto& s : m["stages"]) {
    if (s["stage"] == "report") report = s["dir"].get<std::string>();
    if (s["stage"] == "depth") depth = s["dir"].get<std::string>();
  }
  ASSERT_FALSE(depth.empty());
  const fs::path svg = work_.path() / "depth.svg";
  const auto rows = artifacts::read_depths(depth / "depths.csv");
  EXPECT_EQ(run_cli("plot depth -i " + (depth / "depths.csv").string() + " -t " + rows.at(0).terminal + " -o " + svg.string()), 0);
  EXPECT_NE(read_file(svg).find("<svg"), std::string::npos);

  const fs::path synth = work_.path() / "synth";
  EXPECT_EQ(run_cli("synth -o " + synth.string() + " --seed 3"), 0);
  for (const char* f : {"trips.csv", "stations.csv", "weather.csv", "config.json"}) EXPECT_TRUE(fs::exists(synth / f)) << f;

  // Exit code 3 for unusable data.
  write_file(work_.path() / "bad" / "trips.csv", "Start date,End date,Start station number,End station number\n");
  fs::copy_file(data_->path() / "stations.csv", work_.path() / "bad" / "stations.csv");
  write_file(work_.path() / "bad" / "config.json", json{{"data", {{"trips", "trips.csv"}, {"stations", "stations.csv"}}}}.dump());
  EXPECT_EQ(run_cli("ingest -c " + (work_.path() / "bad" / "config.json").string() + dirs), 3);
}
