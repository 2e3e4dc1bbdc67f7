#pragma once

// Eigen must precede httplib: <resolv.h> defines a _res macro that clashes with Eigen parameter names.
#include "bikedepth/pipeline.hpp"

#include <httplib.h>

#include <charconv>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace bikedepth {

struct ServiceOptions {
  // How long a GET waits for a freshly queued computation before answering 202.
  std::chrono::milliseconds sync_wait{1500};
  double max_distance_m = 50000.0;
  std::size_t max_heatmap_days = 3660;
};

/// HTTP error with a status code and a machine-readable code string.
struct HttpError : std::runtime_error {
  int status;
  std::string code;
  HttpError(int s, std::string c, const std::string& message) : std::runtime_error(message), status(s), code(std::move(c)) {}
};

/// Read-only view over a pipeline's cached artifacts. Parameter sets that have not been computed
/// yet are queued on a single worker; identical requests share one job.
class Service {
 public:
  explicit Service(PipelineConfig cfg, ServiceOptions opt = {}) : cfg_(std::move(cfg)), opt_(opt) {
    Pipeline p(cfg_);
    ingest_ = p.ingest();
    for (auto kind : cfg_.kinds) {
      KindBase& b = bases_[kind];
      b.baseline = p.baseline(kind, ingest_);
      b.depth = p.depth(kind, b.baseline);
      b.sweep = p.sweep(kind, ingest_, b.baseline);
    }
    const json meta = artifacts::read_json(ingest_.dir / "stage.json")["meta"];
    range_ = {artifacts::to_date(meta["range"]["first"].get<std::string>(), ingest_.dir),
              artifacts::to_date(meta["range"]["last"].get<std::string>(), ingest_.dir)};
    // The configured parameter set is served synchronously from the start.
    for (auto kind : cfg_.kinds) compute(kind, cfg_.clustering);
    worker_ = std::thread([this] { work(); });
    routes();
  }

  ~Service() {
    stop();
    {
      std::lock_guard lock(mu_);
      shutdown_ = true;
    }
    cv_.notify_all();
    if (worker_.joinable()) worker_.join();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  httplib::Server& server() { return server_; }

  int bind_any_port(const std::string& host = "127.0.0.1") { return server_.bind_to_any_port(host); }
  bool listen_after_bind() { return server_.listen_after_bind(); }
  bool listen(const std::string& host, int port) { return server_.listen(host, port); }
  void stop() { server_.stop(); }

  std::size_t computations() const {
    std::lock_guard lock(mu_);
    return computations_;
  }

 private:
  struct KindBase {
    StageRef baseline, depth, sweep;
  };

  struct View {
    StageRef cluster, detect, report;
  };

  struct Job {
    std::string token;
    CurveKind kind = CurveKind::usage;
    ClusterParams params;
    std::string status = "queued";  // queued | running | done | failed
    std::optional<View> view;
    json error;
  };

  // ---- computation ------------------------------------------------------

  std::optional<View> lookup(CurveKind kind, const ClusterParams& p) const {
    Pipeline probe(cfg_);
    const auto& b = bases_.at(kind);
    auto corr = probe.cached("correlation", kind,
                             Pipeline::correlation_inputs(ingest_, b.baseline, Pipeline::correlation_reach(p.graph)));
    if (!corr) return std::nullopt;
    auto clu = probe.cached("cluster", kind, Pipeline::cluster_inputs(*corr, p));
    if (!clu) return std::nullopt;
    auto det = probe.cached("detect", kind, probe.detect_inputs(b.baseline, b.depth, *clu));
    if (!det) return std::nullopt;
    auto rep = probe.cached("report", kind, probe.report_inputs(ingest_, b.depth, *clu, *det));
    if (!rep) return std::nullopt;
    return View{*clu, *det, *rep};
  }

  View compute(CurveKind kind, const ClusterParams& p) {
    Pipeline pipe(cfg_);
    const auto& b = bases_.at(kind);
    const auto corr = pipe.correlation(kind, ingest_, b.baseline, Pipeline::correlation_reach(p.graph));
    const auto clu = pipe.cluster(kind, corr, p);
    const auto det = pipe.detect(kind, b.baseline, b.depth, clu);
    const auto rep = pipe.report(kind, ingest_, b.depth, clu, det);
    return {clu, det, rep};
  }

  std::string job_token(CurveKind kind, const ClusterParams& p) const {
    return sha256_hex(config_hash(cfg_) + "/" + to_string(kind) + "/" + Pipeline::params_json(p).dump()).substr(0, 24);
  }

  std::shared_ptr<Job> submit(CurveKind kind, const ClusterParams& p) {
    const std::string token = job_token(kind, p);
    std::lock_guard lock(mu_);
    auto& slot = jobs_[token];
    if (slot && slot->status != "failed") return slot;
    slot = std::make_shared<Job>();
    slot->token = token;
    slot->kind = kind;
    slot->params = p;
    queue_.push_back(slot);
    cv_.notify_all();
    return slot;
  }

  void work() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [this] { return shutdown_ || !queue_.empty(); });
        if (shutdown_) return;
        job = queue_.front();
        queue_.pop_front();
        job->status = "running";
        ++computations_;
      }
      std::optional<View> view;
      json error;
      try {
        view = compute(job->kind, job->params);
      } catch (const std::exception& e) {
        const int code = exit_code_for(e);
        error = {{"class", error_class(code)}, {"message", e.what()}};
      }
      {
        std::lock_guard lock(mu_);
        job->view = view;
        job->error = error;
        job->status = view ? "done" : "failed";
      }
      cv_.notify_all();
    }
  }

  /// The artifacts for a parameter set, or a job handle when they still have to be computed.
  std::variant<View, Job> resolve(CurveKind kind, const ClusterParams& p, bool wait) {
    if (auto v = lookup(kind, p)) return *v;
    auto job = submit(kind, p);
    std::unique_lock lock(mu_);
    if (wait)
      cv_.wait_for(lock, opt_.sync_wait, [&] { return job->status == "done" || job->status == "failed" || shutdown_; });
    if (job->status == "done") return *job->view;
    return *job;
  }

  json job_json(const Job& j) const {
    json out = {{"token", j.token},
                {"status", j.status},
                {"kind", to_string(j.kind)},
                {"params", Pipeline::params_json(j.params)},
                {"poll", "/v1/jobs/" + j.token}};
    if (j.view) out["result"] = view_summary(j.kind, j.params, *j.view);
    if (!j.error.is_null()) out["error"] = j.error;
    return out;
  }

  json view_summary(CurveKind kind, const ClusterParams& p, const View& v) const {
    return {{"kind", to_string(kind)},
            {"params", Pipeline::params_json(p)},
            {"cluster_key", v.cluster.key},
            {"detect_key", v.detect.key},
            {"report_key", v.report.key},
            {"report", artifacts::read_json(v.report.dir / "report.json")}};
  }

  // ---- request parsing --------------------------------------------------

  static double parse_number(const std::string& name, const std::string& s) {
    double v = 0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end || !std::isfinite(v))
      throw HttpError(400, "bad_parameter", "parameter '" + name + "' is not a number: '" + s + "'");
    return v;
  }

  static Date parse_date_param(const std::string& name, const std::string& s) {
    auto d = parse_date(s);
    if (!d) throw HttpError(400, "bad_parameter", "parameter '" + name + "' is not a YYYY-MM-DD date: '" + s + "'");
    return *d;
  }

  static std::string required(const httplib::Request& req, const std::string& name) {
    if (!req.has_param(name)) throw HttpError(400, "missing_parameter", "query parameter '" + name + "' is required");
    return req.get_param_value(name);
  }

  CurveKind kind_param(const httplib::Request& req) const {
    if (!req.has_param("kind")) return cfg_.kinds.front();
    const std::string s = req.get_param_value("kind");
    for (auto k : cfg_.kinds)
      if (to_string(k) == s) return k;
    throw HttpError(400, "bad_parameter", "kind '" + s + "' is not served");
  }

  ClusterParams validated(ClusterParams p) const {
    if (!(p.rho >= -1 && p.rho <= 1)) throw HttpError(400, "out_of_range", "rho must lie in [-1, 1]");
    using Named = std::pair<const char*, double>;
    for (auto [name, v] : {Named{"R", p.graph.radius_m}, Named{"din", p.graph.d_inner_m}, Named{"dout", p.graph.d_outer_m}})
      if (!(v > 0 && v <= opt_.max_distance_m))
        throw HttpError(400, "out_of_range",
                        std::string(name) + " must lie in (0, " + format_double(opt_.max_distance_m) + "] metres");
    return p;
  }

  ClusterParams params_from_query(const httplib::Request& req) const {
    ClusterParams p = cfg_.clustering;
    if (req.has_param("rho")) p.rho = parse_number("rho", req.get_param_value("rho"));
    if (req.has_param("R")) p.graph.radius_m = parse_number("R", req.get_param_value("R"));
    if (req.has_param("din")) p.graph.d_inner_m = parse_number("din", req.get_param_value("din"));
    if (req.has_param("dout")) p.graph.d_outer_m = parse_number("dout", req.get_param_value("dout"));
    return validated(p);
  }

  // ---- responses --------------------------------------------------------

  static void send(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
    send(res, status, {{"error", {{"status", status}, {"code", code}, {"message", message}}}});
  }

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  static Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const HttpError& e) {
        send_error(res, e.status, e.code, e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "internal", e.what());
      }
    };
  }

  /// Sends the 202 body when `r` holds a pending job; returns the view otherwise.
  const View* ready_or_accepted(const std::variant<View, Job>& r, httplib::Response& res) const {
    if (const auto* v = std::get_if<View>(&r)) return v;
    const auto& job = std::get<Job>(r);
    if (job.status == "failed") {
      send(res, 500, {{"error", {{"status", 500}, {"code", "computation_failed"}, {"message", job.error.value("message", "")}}},
                      {"job", job_json(job)}});
    } else {
      send(res, 202, job_json(job));
    }
    return nullptr;
  }

  json cluster_listing(const View& v) const {
    const auto a = artifacts::read_assignment(v.cluster.dir / "assignment.csv");
    const json meta = artifacts::read_json(v.cluster.dir / "cluster.json");
    json clusters = json::array();
    std::map<std::size_t, std::size_t> histogram;
    for (const auto& [id, members] : a.members) {
      clusters.push_back({{"id", id}, {"size", members.size()}, {"members", members}, {"centroid", meta["centroids"][id]}});
      ++histogram[members.size()];
    }
    json hist = json::array();
    for (const auto& [size, n] : histogram) hist.push_back({{"size", size}, {"clusters", n}});
    return {{"key", v.cluster.key},
            {"clusters", clusters},
            {"size_histogram", hist},
            {"sdcs", meta["sdcs"]},
            {"center", meta["center"]},
            {"geojson", artifacts::read_json(v.cluster.dir / "clusters.geojson")}};
  }

  std::vector<std::map<std::string, std::string>> read_table(const fs::path& p) const {
    auto in = artifacts::open(p);
    csv::Reader reader(in);
    std::vector<std::map<std::string, std::string>> rows;
    std::vector<std::string> row;
    while (reader.next(row)) {
      std::map<std::string, std::string> r;
      for (std::size_t i = 0; i < reader.header().size() && i < row.size(); ++i) r[reader.header()[i]] = row[i];
      rows.push_back(std::move(r));
    }
    return rows;
  }

  static json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

  static json cluster_day_json(const ScoredClusterDay& d) {
    const auto& e = d.exceedance;
    return {{"cluster", e.cluster},
            {"date", to_string(e.date)},
            {"size", e.size},
            {"z_n", e.z_n},
            {"severity", optional_number(d.severity)},
            {"direction", e.direction ? json(to_string(*e.direction)) : json(nullptr)},
            {"contributors", e.contributors},
            {"missing", e.missing}};
  }

  // ---- routes -----------------------------------------------------------

  void routes() {
    server_.Get("/v1/status", guarded([this](const httplib::Request&, httplib::Response& res) {
      json jobs = json::object({{"queued", 0}, {"running", 0}, {"done", 0}, {"failed", 0}});
      std::size_t computations = 0;
      {
        std::lock_guard lock(mu_);
        for (const auto& [t, j] : jobs_) jobs[j->status] = jobs[j->status].get<int>() + 1;
        computations = computations_;
      }
      json kinds = json::array();
      for (auto k : cfg_.kinds) kinds.push_back(to_string(k));
      send(res, 200,
           {{"config_hash", config_hash(cfg_)},
            {"kinds", kinds},
            {"range", {{"first", to_string(range_.first)}, {"last", to_string(range_.last)}}},
            {"default_params", Pipeline::params_json(cfg_.clustering)},
            {"param_ranges",
             {{"rho", {-1.0, 1.0}}, {"R", {0.0, opt_.max_distance_m}}, {"din", {0.0, opt_.max_distance_m}},
              {"dout", {0.0, opt_.max_distance_m}}}},
            {"computations", computations},
            {"jobs", jobs}});
    }));

    server_.Get("/v1/terminals", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const auto r = resolve(kind, params_from_query(req), true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      const auto a = artifacts::read_assignment(v->cluster.dir / "assignment.csv");
      std::map<TerminalId, json> summary;
      for (const auto& row : read_table(ingest_.dir / "summary.csv"))
        if (row.at("kind") == to_string(kind))
          summary[row.at("terminal")] = {{"total", std::stod(row.at("total"))}, {"active_days", std::stoul(row.at("active_days"))}};
      json out = json::array();
      for (const auto& t : read_terminals(ingest_.dir / "terminals.csv")) {
        auto c = a.cluster_of.find(t.id);
        json j = {{"id", t.id},
                  {"lat", t.latitude},
                  {"lon", t.longitude},
                  {"first_active_date", t.first_active_date ? json(to_string(*t.first_active_date)) : json(nullptr)},
                  {"cluster", c == a.cluster_of.end() ? json(nullptr) : json(c->second)}};
        if (auto s = summary.find(t.id); s != summary.end()) j.update(s->second);
        out.push_back(j);
      }
      send(res, 200, {{"kind", to_string(kind)}, {"terminals", out}});
    }));

    server_.Get("/v1/clusters", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const auto p = params_from_query(req);
      const auto r = resolve(kind, p, true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      json out = cluster_listing(*v);
      out["kind"] = to_string(kind);
      out["params"] = Pipeline::params_json(p);
      send(res, 200, out);
    }));

    server_.Get(R"(/v1/clusters/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const auto p = params_from_query(req);
      const std::string id = req.matches[1];
      const auto r = resolve(kind, p, true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      const auto a = artifacts::read_assignment(v->cluster.dir / "assignment.csv");
      auto it = a.members.find(id);
      if (it == a.members.end()) throw HttpError(404, "not_found", "no cluster '" + id + "' under these parameters");
      const json meta = artifacts::read_json(v->cluster.dir / "cluster.json");
      json model = nullptr;
      for (const auto& row : read_table(v->detect.dir / "severity_models.csv")) {
        if (row.at("cluster") != id) continue;
        model = {{"samples", std::stoul(row.at("samples"))}, {"note", row.at("note")}};
        model["alpha"] = row.at("alpha").empty() ? json(nullptr) : json(std::stod(row.at("alpha")));
        model["beta"] = row.at("beta").empty() ? json(nullptr) : json(std::stod(row.at("beta")));
      }
      json days = json::array();
      for (const auto& d : artifacts::read_cluster_days(v->detect.dir / "cluster_days.csv"))
        if (d.exceedance.cluster == id) days.push_back(cluster_day_json(d));
      send(res, 200,
           {{"id", id},
            {"kind", to_string(kind)},
            {"params", Pipeline::params_json(p)},
            {"size", it->second.size()},
            {"members", it->second},
            {"centroid", meta["centroids"][id]},
            {"severity_model", model},
            {"outlier_days", days}});
    }));

    server_.Get("/v1/sweep", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      json rows = json::array();
      for (const auto& row : read_table(bases_.at(kind).sweep.dir / "sweep.csv")) {
        rows.push_back({{"rho", std::stod(row.at("rho"))},
                        {"R", std::stod(row.at("radius_m"))},
                        {"din", std::stod(row.at("d_inner_m"))},
                        {"dout", std::stod(row.at("d_outer_m"))},
                        {"clusters", std::stoul(row.at("clusters"))},
                        {"components", std::stoul(row.at("components"))},
                        {"sdcs", row.at("sdcs").empty() ? json(nullptr) : json(std::stod(row.at("sdcs")))}});
      }
      send(res, 200, {{"kind", to_string(kind)}, {"rows", rows}});
    }));

    server_.Get("/v1/depths", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const std::string terminal = required(req, "terminal");
      json rows = json::array();
      bool any_threshold = false;
      for (const auto& d : artifacts::read_depths(bases_.at(kind).depth.dir / "depths.csv")) {
        if (d.terminal != terminal) continue;
        any_threshold |= d.threshold.has_value();
        rows.push_back({{"date", to_string(d.date)},
                        {"partition", to_string(d.partition)},
                        {"depth", d.depth},
                        {"threshold", optional_number(d.threshold)},
                        {"z", optional_number(d.z)},
                        {"flagged", d.flagged()}});
      }
      if (rows.empty()) throw HttpError(404, "not_found", "no depth records for terminal '" + terminal + "'");
      send(res, 200, {{"terminal", terminal}, {"kind", to_string(kind)}, {"insufficient_data", !any_threshold}, {"days", rows}});
    }));

    server_.Get("/v1/outliers", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const Date date = parse_date_param("date", required(req, "date"));
      const auto p = params_from_query(req);
      const auto r = resolve(kind, p, true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      json rows = json::array();
      for (const auto& d : artifacts::read_cluster_days(v->detect.dir / "cluster_days.csv"))
        if (d.exceedance.date == date) rows.push_back(cluster_day_json(d));
      send(res, 200, {{"date", to_string(date)}, {"kind", to_string(kind)}, {"params", Pipeline::params_json(p)}, {"outliers", rows}});
    }));

    server_.Get("/v1/alerts", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const Date date = parse_date_param("date", required(req, "date"));
      const auto p = params_from_query(req);
      const auto r = resolve(kind, p, true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      json alerts = json::array();
      for (const auto& day : artifacts::read_json(v->report.dir / "alerts.json"))
        if (day["date"] == to_string(date)) alerts = day["alerts"];
      send(res, 200, {{"date", to_string(date)}, {"kind", to_string(kind)}, {"params", Pipeline::params_json(p)}, {"alerts", alerts}});
    }));

    server_.Get("/v1/heatmap", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      const Date from = req.has_param("from") ? parse_date_param("from", req.get_param_value("from")) : range_.first;
      const Date to = req.has_param("to") ? parse_date_param("to", req.get_param_value("to")) : range_.last;
      if (to < from) throw HttpError(400, "bad_range", "'from' must not be after 'to'");
      const DateRange range{from, to};
      if (range.days() > opt_.max_heatmap_days)
        throw HttpError(400, "bad_range", "heatmap spans more than " + std::to_string(opt_.max_heatmap_days) + " days");
      ClusterOrder order = cfg_.order;
      std::string order_name = req.has_param("order") ? req.get_param_value("order") : "";
      if (!order_name.empty()) {
        try {
          order = parse_cluster_order(order_name);
        } catch (const ArgumentError& e) {
          throw HttpError(400, "bad_parameter", e.what());
        }
      }
      const auto p = params_from_query(req);
      const auto r = resolve(kind, p, true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      const json meta = artifacts::read_json(v->cluster.dir / "cluster.json");
      std::map<TerminalId, GeoPoint> centroids;
      for (const auto& [c, pt] : meta["centroids"].items()) centroids[c] = {pt["lat"].get<double>(), pt["lon"].get<double>()};
      const GeoPoint center{meta["center"]["lat"].get<double>(), meta["center"]["lon"].get<double>()};
      const auto h = severity_heatmap(range, order_clusters(centroids, center, order),
                                      artifacts::read_cluster_days(v->detect.dir / "cluster_days.csv"));
      json dates = json::array(), cells = json::array();
      for (std::size_t i = 0; i < h.dates.size(); ++i) {
        dates.push_back(to_string(h.dates[i]));
        json row = json::array();
        for (const auto& c : h.cells[i]) {
          if (!c.outlier) {
            row.push_back(nullptr);
            continue;
          }
          row.push_back({{"severity", optional_number(c.severity)},
                         {"direction", c.direction ? json(to_string(*c.direction)) : json(nullptr)}});
        }
        cells.push_back(row);
      }
      send(res, 200,
           {{"kind", to_string(kind)},
            {"params", Pipeline::params_json(p)},
            {"order", order_name.empty() ? config_to_json(cfg_)["report"]["order"] : json(order_name)},
            {"dates", dates},
            {"clusters", h.clusters},
            {"cells", cells}});
    }));

    server_.Get("/v1/weather-crosstab", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto kind = kind_param(req);
      if (!cfg_.weather) throw HttpError(404, "not_configured", "no weather data configured");
      const auto p = params_from_query(req);
      const auto r = resolve(kind, p, true);
      const View* v = ready_or_accepted(r, res);
      if (!v) return;
      json out = artifacts::read_json(v->report.dir / "weather_crosstab.json");
      out["kind"] = to_string(kind);
      out["params"] = Pipeline::params_json(p);
      send(res, 200, out);
    }));

    server_.Post("/v1/recluster", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = req.body.empty() ? json::object() : json::parse(req.body);
      } catch (const json::parse_error& e) {
        throw HttpError(400, "bad_body", std::string("request body is not JSON: ") + e.what());
      }
      if (!body.is_object()) throw HttpError(400, "bad_body", "request body must be a JSON object");
      ClusterParams p = cfg_.clustering;
      CurveKind kind = cfg_.kinds.front();
      for (const auto& [k, v] : body.items()) {
        if (k == "kind") {
          if (!v.is_string()) throw HttpError(400, "bad_parameter", "kind must be a string");
          httplib::Request probe;
          probe.params.emplace("kind", v.get<std::string>());
          kind = kind_param(probe);
          continue;
        }
        double* target = k == "rho"    ? &p.rho
                         : k == "R"    ? &p.graph.radius_m
                         : k == "din"  ? &p.graph.d_inner_m
                         : k == "dout" ? &p.graph.d_outer_m
                                       : nullptr;
        if (!target) throw HttpError(400, "unknown_field", "unknown field '" + k + "'");
        if (!v.is_number()) throw HttpError(400, "bad_parameter", "'" + k + "' must be a number");
        *target = v.get<double>();
      }
      p = validated(p);
      const auto r = resolve(kind, p, false);
      if (const auto* v = std::get_if<View>(&r)) {
        send(res, 200,
             {{"token", job_token(kind, p)}, {"status", "done"}, {"poll", "/v1/jobs/" + job_token(kind, p)},
              {"result", view_summary(kind, p, *v)}});
        return;
      }
      send(res, 202, job_json(std::get<Job>(r)));
    }));

    server_.Get(R"(/v1/jobs/([0-9a-f]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const std::string token = req.matches[1];
      std::optional<Job> job;
      {
        std::lock_guard lock(mu_);
        if (auto it = jobs_.find(token); it != jobs_.end()) job = *it->second;
      }
      if (!job) throw HttpError(404, "not_found", "unknown job '" + token + "'");
      send(res, 200, job_json(*job));
    }));

    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        const std::string code = res.status == 404 ? "not_found" : "http_" + std::to_string(res.status);
        send_error(res, res.status, code, res.status == 404 ? "no such endpoint" : "request failed");
      }
    });
  }

  PipelineConfig cfg_;
  ServiceOptions opt_;
  StageRef ingest_;
  std::map<CurveKind, KindBase> bases_;
  DateRange range_{};

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::shared_ptr<Job>> queue_;
  std::size_t computations_ = 0;
  bool shutdown_ = false;
  std::thread worker_;
  httplib::Server server_;
};

}  // namespace bikedepth
