// edr: server, agent and evaluation tooling.

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "edr/agent.hpp"
#include "edr/harness.hpp"
#include "edr/server.hpp"
#include "edr/taxonomy.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

nlohmann::json load_config(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw edr::Error("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw edr::Error("config " + path + " is not valid JSON: " + e.what());
  }
}

std::filesystem::path config_base(const std::string& path) {
  if (path.empty()) return {};
  return std::filesystem::absolute(path).parent_path();
}

// "replay:PATH[:RATE]" or "synth:SCENARIO[:N[:FRAC[:SEED]]]"
edr::agent::SourceConfig parse_source(const std::string& text, edr::agent::SourceConfig base) {
  const auto colon = text.find(':');
  const auto kind = text.substr(0, colon);
  std::vector<std::string> parts;
  if (colon != std::string::npos) {
    std::string rest = text.substr(colon + 1);
    std::size_t pos = 0;
    while (true) {
      const auto next = rest.find(':', pos);
      parts.push_back(rest.substr(pos, next - pos));
      if (next == std::string::npos) break;
      pos = next + 1;
    }
  }
  base.kind = kind;
  if (kind == "replay") {
    if (parts.empty() || parts[0].empty()) throw edr::Error("--source replay:PATH needs a path");
    base.path = parts[0];
    if (parts.size() > 1) base.rate = std::stod(parts[1]);
  } else if (kind == "synth") {
    if (!parts.empty() && !parts[0].empty()) base.scenario = parts[0];
    if (parts.size() > 1) base.n = std::stoul(parts[1]);
    if (parts.size() > 2) base.anomaly_frac = std::stod(parts[2]);
    if (parts.size() > 3) base.seed = std::stoull(parts[3]);
  } else {
    throw edr::Error("--source must start with replay: or synth:");
  }
  return base;
}

void print(const nlohmann::json& j, const std::string& table, bool as_json) {
  if (as_json) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << table;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Endpoint detection and response toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  std::string log_level = "info";
  bool as_json = false;
  app.add_option("--config", config_path, "JSON configuration file");
  app.add_option("--log-level", log_level, "trace|debug|info|warn|error|off");
  app.add_flag("--json", as_json, "emit reports as JSON");

  // serve
  auto* serve = app.add_subcommand("serve", "run the management server");
  std::string host;
  int port = -1;
  std::string data_dir;
  serve->add_option("--host", host);
  serve->add_option("--port", port, "0 picks a free port");
  serve->add_option("--data-dir", data_dir);

  // agent
  auto* agent = app.add_subcommand("agent", "run an endpoint agent");
  std::string source, mode, server_url, state_dir, token, agent_id;
  agent->add_option("--source", source, "replay:PATH[:RATE] or synth:SCENARIO[:N[:FRAC[:SEED]]]");
  agent->add_option("--mode", mode, "local|forward");
  agent->add_option("--server", server_url, "management server base URL");
  agent->add_option("--state-dir", state_dir);
  agent->add_option("--token", token, "enrollment token");
  agent->add_option("--agent-id", agent_id);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a labeled dataset with train/val/test splits");
  std::string scenario = "baseline";
  std::size_t n = 1000;
  double frac = 0.05;
  std::uint64_t seed = 42;
  std::vector<double> split{0.70, 0.15, 0.15};
  std::string out_dir = "dataset";
  synth->add_option("--scenario", scenario);
  synth->add_option("--n", n);
  synth->add_option("--frac", frac, "fraction of attack events");
  synth->add_option("--seed", seed);
  synth->add_option("--split", split, "train val test fractions")->expected(3)->delimiter(',');
  synth->add_option("--out", out_dir);

  // eval
  auto* eval = app.add_subcommand("eval", "score alerts against labeled events");
  std::string alerts_path, truth_path;
  eval->add_option("--alerts", alerts_path, "alert JSONL")->required();
  eval->add_option("--truth", truth_path, "labeled event JSONL")->required();

  // bench
  auto* bench = app.add_subcommand("bench", "throughput and response latency benchmark");
  std::size_t bench_n = 100'000;
  std::string model_path;
  bench->add_option("--n", bench_n);
  bench->add_option("--seed", seed);
  bench->add_option("--model", model_path, "trained model (default: train a baseline model)");

  // train
  auto* train = app.add_subcommand("train", "train the anomaly model on baseline synthetic data");
  std::size_t train_n = 20'000;
  std::uint64_t train_seed = 7;
  std::string model_out = "model.json";
  train->add_option("--n", train_n);
  train->add_option("--seed", train_seed);
  train->add_option("--out", model_out);

  // taxonomy check
  auto* tax = app.add_subcommand("taxonomy", "taxonomy utilities");
  auto* tax_check = tax->add_subcommand("check", "validate a taxonomy file");
  tax->require_subcommand(1);
  std::string tax_path;
  tax_check->add_option("--path", tax_path);

  CLI11_PARSE(app, argc, argv);

  spdlog::set_level(spdlog::level::from_str(log_level));
  spdlog::set_pattern("%Y-%m-%dT%H:%M:%S.%e %^%l%$ %v");

  try {
    const auto cfg = load_config(config_path);
    const auto base = config_base(config_path);

    if (*serve) {
      auto sc = edr::server::ServerConfig::from_json(cfg, base);
      if (!host.empty()) sc.host = host;
      if (port >= 0) sc.port = port;
      if (!data_dir.empty()) sc.data_dir = data_dir;
      sc.validate();
      edr::server::ManagementService service(sc);
      edr::server::HttpServer http(service);
      const int bound = http.start(sc.host, sc.port);
      spdlog::info("listening on {}:{}", sc.host, bound);
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      spdlog::info("shutting down");
      http.stop();
      return 0;
    }

    if (*agent) {
      auto ac = edr::agent::AgentConfig::from_json(cfg, base);
      if (!source.empty()) ac.source = parse_source(source, ac.source);
      if (!mode.empty()) ac.mode = mode;
      if (!server_url.empty()) ac.server_url = server_url;
      if (!state_dir.empty()) ac.state_dir = state_dir;
      if (!token.empty()) ac.enrollment_token = token;
      if (!agent_id.empty()) ac.agent_id = agent_id;
      ac.validate();
      auto transport = std::make_shared<edr::agent::HttpTransport>(ac.server_url);
      edr::agent::Agent runner(ac, transport);
      runner.ensure_enrolled();
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::atomic<bool> done{false};
      std::thread watcher([&] {
        while (!done) {
          if (g_stop) {
            runner.stop();
            break;
          }
          std::this_thread::sleep_for(std::chrono::milliseconds(100));
        }
      });
      auto summary = runner.run();
      done = true;
      watcher.join();
      const auto j = summary.to_json();
      std::string table;
      for (const auto& [k, v] : j.items()) table += k + ": " + v.dump() + "\n";
      print(j, table, as_json);
      return summary.balanced() ? 0 : 3;
    }

    if (*synth) {
      edr::events::DatasetSplit ds{split.at(0), split.at(1), split.at(2)};
      ds.validate();
      edr::ingest::SynthOptions so;
      so.scenario = scenario;
      so.n = n;
      so.anomaly_frac = scenario == "baseline" ? 0.0 : frac;
      so.seed = seed;
      auto all = edr::ingest::synth_source(so);
      const std::filesystem::path dir(out_dir);
      edr::harness::write_jsonl(dir / "all.jsonl", all);
      auto parts = edr::harness::split_dataset(all, ds, seed);
      edr::harness::write_jsonl(dir / "train.jsonl", parts.train);
      edr::harness::write_jsonl(dir / "val.jsonl", parts.val);
      edr::harness::write_jsonl(dir / "test.jsonl", parts.test);
      const nlohmann::json j{{"dir", dir.string()},
                             {"all", all.size()},
                             {"train", parts.train.size()},
                             {"val", parts.val.size()},
                             {"test", parts.test.size()}};
      print(j,
            "wrote " + dir.string() + ": train " + std::to_string(parts.train.size()) + ", val " +
                std::to_string(parts.val.size()) + ", test " + std::to_string(parts.test.size()) + "\n",
            as_json);
      return 0;
    }

    if (*eval) {
      const auto alerts = edr::harness::read_alerts_jsonl(alerts_path);
      std::size_t skipped = 0;
      const auto truth = edr::harness::read_events_jsonl(truth_path, &skipped);
      if (skipped) spdlog::warn("{} malformed truth lines skipped", skipped);
      const auto report = edr::harness::evaluate(alerts, truth);
      print(report.to_json(), report.table(), as_json);
      return report.unknown_evidence == 0 ? 0 : 4;
    }

    if (*bench) {
      edr::harness::BenchOptions bo;
      bo.n = bench_n;
      bo.seed = seed;
      if (!model_path.empty()) bo.model_path = model_path;
      bo.pipeline = edr::pipeline::PipelineOptions::from_json(cfg);
      const auto report = edr::harness::run_bench(bo);
      print(report.to_json(), report.table(), as_json);
      return 0;
    }

    if (*train) {
      edr::harness::TrainOptions to;
      to.n = train_n;
      to.seed = train_seed;
      to.noise_rules = edr::ingest::load_noise_rules(std::filesystem::path(EDR_DATA_DIR) / "noise_rules.json");
      const auto forest = edr::harness::train_baseline_model(to);
      forest.save(model_out);
      const nlohmann::json j{{"out", model_out},
                             {"trees", forest.trees().size()},
                             {"psi", forest.psi()},
                             {"features", forest.feature_count()}};
      print(j, "wrote " + model_out + " (" + std::to_string(forest.trees().size()) + " trees, psi " +
                   std::to_string(forest.psi()) + ")\n",
            as_json);
      return 0;
    }

    if (*tax_check) {
      const std::filesystem::path p =
          tax_path.empty() ? std::filesystem::path(EDR_DATA_DIR) / "attck_min.json" : std::filesystem::path(tax_path);
      const auto t = edr::taxonomy::load_taxonomy(p);
      const nlohmann::json j{{"path", p.string()},
                             {"version", t.version()},
                             {"tactics", t.tactics().size()},
                             {"techniques", t.techniques().size()},
                             {"ok", true}};
      print(j,
            p.string() + ": ok (" + std::to_string(t.tactics().size()) + " tactics, " +
                std::to_string(t.techniques().size()) + " techniques)\n",
            as_json);
      return 0;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
