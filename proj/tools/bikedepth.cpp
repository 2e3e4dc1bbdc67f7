#include "bikedepth/plot.hpp"
#include "bikedepth/service.hpp"
#include "bikedepth/synthetic.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

using namespace bikedepth;

namespace {

struct ConfigFlags {
  std::string config;
  std::string data_root;
  std::vector<std::string> sets;
  std::optional<std::string> cache_dir, output_dir, kinds, depth, policy, factors, summer_start, summer_end, order;
  std::optional<double> rho, radius, d_inner, d_outer, smoothing, percentile;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> resamples;
  std::optional<unsigned> threads;
  std::optional<bool> log_transform;
};

void add_config_flags(CLI::App* app, ConfigFlags& f) {
  app->add_option("-c,--config", f.config, "pipeline config (JSON)")->required()->check(CLI::ExistingFile);
  app->add_option("--data-root", f.data_root, "directory that relative data paths resolve against");
  app->add_option("--set", f.sets, "override any config field, e.g. --set clustering.rho=0.2 (value parsed as JSON)");
  app->add_option("--cache-dir", f.cache_dir, "artifact cache directory");
  app->add_option("--output-dir", f.output_dir, "directory for manifest.json");
  app->add_option("--kinds", f.kinds, "comma-separated curve kinds: usage,pickup,dropoff");
  app->add_option("--policy", f.policy, "regression factor policy: cv-select or fixed");
  app->add_option("--factors", f.factors, "factor set for the fixed policy, e.g. day+month or none");
  app->add_option("--summer-start", f.summer_start, "first summer day, MM-DD");
  app->add_option("--summer-end", f.summer_end, "last summer day, MM-DD");
  app->add_option("--log-transform", f.log_transform, "fit baselines on log counts (true/false)");
  app->add_option("--rho", f.rho, "correlation threshold for cutting forest edges");
  app->add_option("--radius", f.radius, "R, metres");
  app->add_option("--d-inner", f.d_inner, "edge distance limit inside R, metres");
  app->add_option("--d-outer", f.d_outer, "edge distance limit outside R, metres");
  app->add_option("--depth", f.depth, "depth method: h_modal or fraiman_muniz");
  app->add_option("--resamples", f.resamples, "bootstrap resamples for the threshold");
  app->add_option("--smoothing", f.smoothing, "bootstrap smoothing factor");
  app->add_option("--percentile", f.percentile, "threshold percentile (fraction)");
  app->add_option("--seed", f.seed, "root random seed");
  app->add_option("--order", f.order, "heatmap cluster order: distance, north_south or west_east");
  app->add_option("--threads", f.threads, "worker threads");
}

json parse_set_value(const std::string& v) {
  try {
    return json::parse(v);
  } catch (const json::parse_error&) {
    return v;
  }
}

json overrides_from(const ConfigFlags& f) {
  json o = json::object();
  auto put = [&](std::initializer_list<const char*> path, const json& v) {
    json* cur = &o;
    for (auto it = path.begin(); it != path.end(); ++it) {
      if (std::next(it) == path.end()) (*cur)[*it] = v;
      else cur = &(*cur)[*it];
    }
  };
  if (f.cache_dir) put({"cache_dir"}, *f.cache_dir);
  if (f.output_dir) put({"output_dir"}, *f.output_dir);
  if (f.kinds) {
    json kinds = json::array();
    std::stringstream ss(*f.kinds);
    for (std::string k; std::getline(ss, k, ',');) kinds.push_back(k);
    put({"kinds"}, kinds);
  }
  if (f.policy) put({"baseline", "policy"}, *f.policy);
  if (f.factors) put({"baseline", "factors"}, *f.factors);
  if (f.summer_start) put({"baseline", "season", "summer_start"}, *f.summer_start);
  if (f.summer_end) put({"baseline", "season", "summer_end"}, *f.summer_end);
  if (f.log_transform) put({"baseline", "log_transform"}, *f.log_transform);
  if (f.rho) put({"clustering", "rho"}, *f.rho);
  if (f.radius) put({"clustering", "radius_m"}, *f.radius);
  if (f.d_inner) put({"clustering", "d_inner_m"}, *f.d_inner);
  if (f.d_outer) put({"clustering", "d_outer_m"}, *f.d_outer);
  if (f.depth) put({"detection", "depth"}, *f.depth);
  if (f.resamples) put({"detection", "resamples"}, *f.resamples);
  if (f.smoothing) put({"detection", "smoothing"}, *f.smoothing);
  if (f.percentile) put({"detection", "percentile"}, *f.percentile);
  if (f.seed) put({"detection", "seed"}, *f.seed);
  if (f.order) put({"report", "order"}, *f.order);
  if (f.threads) put({"threads"}, *f.threads);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key.path=value, got '" + s + "'");
    json* cur = &o;
    std::stringstream path(s.substr(0, eq));
    std::vector<std::string> keys;
    for (std::string k; std::getline(path, k, '.');) keys.push_back(k);
    for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
      if (!cur->contains(keys[i]) || !(*cur)[keys[i]].is_object()) (*cur)[keys[i]] = json::object();
      cur = &(*cur)[keys[i]];
    }
    (*cur)[keys.back()] = parse_set_value(s.substr(eq + 1));
  }
  return o;
}

PipelineConfig load(const ConfigFlags& f) {
  if (!f.data_root.empty()) ::setenv(kDataRootEnv, f.data_root.c_str(), 1);
  return load_config(f.config, overrides_from(f));
}

json stage_summary(const RunResult& r) {
  json out = {{"status", r.manifest["status"]}, {"manifest", nullptr}, {"stages", json::array()}};
  for (const auto& s : r.manifest["stages"])
    out["stages"].push_back({{"stage", s["stage"]}, {"kind", s["kind"]}, {"cache_hit", s["cache_hit"]}, {"dir", s["dir"]}});
  if (!r.manifest["error"].is_null()) out["error"] = r.manifest["error"];
  if (!r.manifest["audit"].is_null()) out["audit"] = r.manifest["audit"];
  return out;
}

int run_stages(const ConfigFlags& f, StopAfter stop, std::optional<double> audit) {
  PipelineConfig cfg = load(f);
  if (audit) {
    cfg.audit = true;
    cfg.audit_fraction = *audit;
  }
  const auto r = run_pipeline(cfg, stop);
  json out = stage_summary(r);
  out["manifest"] = (cfg.output_dir / "manifest.json").string();
  std::cout << out.dump(2) << '\n';
  for (const auto& w : r.manifest["warnings"]) std::cerr << "warning: " << w.get<std::string>() << '\n';
  if (r.exit_code != kExitOk && !r.manifest["error"].is_null())
    std::cerr << "error: " << r.manifest["error"]["message"].get<std::string>() << '\n';
  if (r.exit_code == kExitAudit)
    for (const auto& m : r.audit.mismatches) std::cerr << "audit mismatch: " << m << '\n';
  return r.exit_code;
}

int run_sweep(const ConfigFlags& f) {
  const PipelineConfig cfg = load(f);
  Pipeline p(cfg);
  const auto ing = p.ingest();
  json out = json::array();
  for (auto kind : cfg.kinds) {
    const auto base = p.baseline(kind, ing);
    const auto sw = p.sweep(kind, ing, base);
    out.push_back({{"kind", to_string(kind)}, {"sweep", (sw.dir / "sweep.csv").string()}});
  }
  std::cout << out.dump(2) << '\n';
  return kExitOk;
}

Service* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
}

int run_serve(const ConfigFlags& f, const std::string& host, int port) {
  const PipelineConfig cfg = load(f);
  Service service(cfg);
  g_service = &service;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  if (port == 0) {
    port = service.bind_any_port(host);
    if (port < 0) throw DataError("cannot bind " + host);
    std::cerr << "listening on http://" << host << ':' << port << '\n';
    service.listen_after_bind();
  } else {
    std::cerr << "listening on http://" << host << ':' << port << '\n';
    if (!service.listen(host, port)) throw DataError("cannot listen on " + host + ":" + std::to_string(port));
  }
  g_service = nullptr;
  return kExitOk;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

int run_synth(const std::string& dir, std::uint64_t seed, bool weather) {
  synth::Options opt;
  opt.seed = seed;
  const auto ds = synth::generate(opt);
  synth::write_dataset(dir, ds);
  json cfg = {{"data", {{"trips", "trips.csv"}, {"stations", "stations.csv"}}},
              {"cache_dir", "cache"},
              {"output_dir", "run"}};
  if (weather) cfg["data"]["weather"] = "weather.csv";
  write_text((fs::path(dir) / "config.json").string(), cfg.dump(2) + "\n");
  std::cout << json{{"dir", dir}, {"terminals", ds.stations.size()}, {"trips", ds.trips.size()}, {"shocks", ds.shocks.size()}}.dump(2)
            << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional-depth outlier detection for bike-sharing demand"};
  app.require_subcommand(1);

  ConfigFlags f;
  struct Stage {
    const char* name;
    const char* help;
    StopAfter stop;
  };
  const Stage stages[] = {
      {"ingest", "clean trips and build daily hourly curves", StopAfter::ingest},
      {"baseline", "fit per-terminal baseline regressions and residuals", StopAfter::baseline},
      {"cluster", "cluster terminals on residual correlations", StopAfter::cluster},
      {"detect", "score depths and flag outlying cluster-days", StopAfter::detect},
      {"report", "alerts, heatmap, time series and weather cross-tabs", StopAfter::report},
  };
  std::map<CLI::App*, StopAfter> stage_cmds;
  for (const auto& s : stages) {
    auto* cmd = app.add_subcommand(s.name, s.help);
    add_config_flags(cmd, f);
    stage_cmds[cmd] = s.stop;
  }

  auto* run = app.add_subcommand("run", "run every stage and write the manifest");
  add_config_flags(run, f);
  std::optional<double> audit;
  run->add_option("--audit", audit, "recompute this fraction of cache hits and compare bytes")->check(CLI::Range(0.0, 1.0));

  auto* sweep = app.add_subcommand("sweep", "tabulate cluster counts over the parameter grid");
  add_config_flags(sweep, f);

  auto* serve = app.add_subcommand("serve", "serve the /v1 HTTP API");
  add_config_flags(serve, f);
  std::string host = "127.0.0.1";
  int port = 8080;
  serve->add_option("--host", host, "listen address");
  serve->add_option("--port", port, "listen port (0 picks a free one)");

  auto* plot = app.add_subcommand("plot", "render SVG figures from artifacts");
  plot->require_subcommand(1);
  std::string input, output, terminal;
  auto* plot_heat = plot->add_subcommand("heatmap", "severity heatmap from heatmap.csv");
  plot_heat->add_option("-i,--input", input, "heatmap.csv")->required()->check(CLI::ExistingFile);
  plot_heat->add_option("-o,--output", output, "SVG file")->required();
  auto* plot_depth = plot->add_subcommand("depth", "depth and normalized depth panels for one terminal");
  plot_depth->add_option("-i,--input", input, "depths.csv")->required()->check(CLI::ExistingFile);
  plot_depth->add_option("-t,--terminal", terminal, "terminal id")->required();
  plot_depth->add_option("-o,--output", output, "SVG file")->required();

  auto* synth_cmd = app.add_subcommand("synth", "write the synthetic fixture dataset and a config");
  std::string synth_dir;
  std::uint64_t synth_seed = synth::Options{}.seed;
  bool synth_weather = true;
  synth_cmd->add_option("-o,--output", synth_dir, "output directory")->required();
  synth_cmd->add_option("--seed", synth_seed, "generator seed");
  synth_cmd->add_option("--weather", synth_weather, "include weather.csv in the config (true/false)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    for (const auto& [cmd, stop] : stage_cmds)
      if (cmd->parsed()) return run_stages(f, stop, std::nullopt);
    if (run->parsed()) return run_stages(f, StopAfter::report, audit);
    if (sweep->parsed()) return run_sweep(f);
    if (serve->parsed()) return run_serve(f, host, port);
    if (plot_heat->parsed()) {
      auto in = artifacts::open(input);
      write_text(output, heatmap_svg(read_heatmap_csv(in)));
      return kExitOk;
    }
    if (plot_depth->parsed()) {
      std::vector<DepthRecord> rows;
      for (const auto& r : artifacts::read_depths(input))
        if (r.terminal == terminal) rows.push_back(r);
      if (rows.empty()) throw ArgumentError("no depth records for terminal '" + terminal + "'");
      write_text(output, depth_panel_svg(terminal, rows));
      return kExitOk;
    }
    if (synth_cmd->parsed()) return run_synth(synth_dir, synth_seed, synth_weather);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kExitInternal;
}
