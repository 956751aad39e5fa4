#include "edr/harness.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "edr/detect.hpp"
#include "edr/rng.hpp"

namespace edr::harness {

using nlohmann::json;

SplitSizes split_sizes(std::size_t n, const events::DatasetSplit& split) {
  split.validate();
  SplitSizes s;
  s.val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * split.val_frac + 1e-9));
  s.test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * split.test_frac + 1e-9));
  s.train = n - s.val - s.test;
  return s;
}

Splits split_dataset(std::vector<events::SystemEvent> events, const events::DatasetSplit& split,
                     std::uint64_t seed) {
  const auto sizes = split_sizes(events.size(), split);
  Rng rng(seed);
  for (std::size_t i = events.size(); i > 1; --i) {
    std::swap(events[i - 1], events[rng.below(i)]);
  }
  Splits out;
  auto take = [&](std::size_t from, std::size_t count, std::vector<events::SystemEvent>& dst) {
    dst.assign(std::make_move_iterator(events.begin() + static_cast<std::ptrdiff_t>(from)),
               std::make_move_iterator(events.begin() + static_cast<std::ptrdiff_t>(from + count)));
    events::sort_events(dst);
  };
  take(0, sizes.train, out.train);
  take(sizes.train, sizes.val, out.val);
  take(sizes.train + sizes.val, sizes.test, out.test);
  return out;
}

void write_jsonl(const std::filesystem::path& path, std::span<const events::SystemEvent> events) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : events) out << events::to_jsonl(e) << '\n';
  if (!out) throw Error("short write to " + path.string());
}

std::vector<events::SystemEvent> read_events_jsonl(const std::filesystem::path& path,
                                                   std::size_t* skipped) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<events::SystemEvent> out;
  std::string line;
  std::size_t bad = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(events::parse_event(line));
    } catch (const Error&) {
      ++bad;
    }
  }
  if (skipped) *skipped = bad;
  return out;
}

void write_alerts_jsonl(const std::filesystem::path& path, std::span<const Alert> alerts) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& a : alerts) out << to_json(a).dump() << '\n';
}

std::vector<Alert> read_alerts_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<Alert> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(alert_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Metrics Metrics::from(const Confusion& c) {
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  Metrics m;
  m.accuracy = ratio(c.tp + c.tn, c.total());
  m.precision = ratio(c.tp, c.tp + c.fp);
  m.recall = ratio(c.tp, c.tp + c.fn);
  m.f1 = (m.precision + m.recall) == 0 ? 0.0 : 2 * m.precision * m.recall / (m.precision + m.recall);
  m.fpr = ratio(c.fp, c.fp + c.tn);
  m.fnr = ratio(c.fn, c.fn + c.tp);
  return m;
}

namespace {

bool technique_related(std::string_view a, std::string_view b) {
  if (a == b) return true;
  return taxonomy::Taxonomy::parent_id(a) == b || taxonomy::Taxonomy::parent_id(b) == a;
}

void count(Confusion& c, bool truth, bool predicted) {
  if (truth) {
    (predicted ? c.tp : c.fn)++;
  } else {
    (predicted ? c.fp : c.tn)++;
  }
}

json metrics_json(const ClassReport& r) {
  return {{"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"tn", r.counts.tn},
          {"fn", r.counts.fn},
          {"accuracy", r.metrics.accuracy},
          {"precision", r.metrics.precision},
          {"recall", r.metrics.recall},
          {"f1", r.metrics.f1},
          {"fpr", r.metrics.fpr},
          {"fnr", r.metrics.fnr}};
}

}  // namespace

EvalReport evaluate(std::span<const Alert> alerts, std::span<const events::SystemEvent> truth) {
  EvalReport report;
  report.events = truth.size();
  std::unordered_set<std::string> truth_ids;
  truth_ids.reserve(truth.size());
  for (const auto& e : truth) truth_ids.insert(e.id);

  // event id -> technique tags of the alerts naming it as evidence
  std::unordered_map<std::string, std::set<std::string>> predicted;
  std::set<std::string> unknown;
  for (const auto& a : alerts) {
    for (const auto& d : a.detections) {
      for (const auto& id : d.evidence) {
        if (!truth_ids.contains(id)) {
          unknown.insert(id);
          continue;
        }
        auto& tags = predicted[id];
        tags.insert(a.technique_ids.begin(), a.technique_ids.end());
      }
    }
  }
  report.unknown_evidence = unknown.size();
  for (const auto& id : unknown) {
    if (report.unknown_examples.size() >= 10) break;
    report.unknown_examples.push_back(id);
  }

  std::set<std::string> classes;
  for (const auto& e : truth) {
    if (e.is_malicious_label()) classes.insert(*e.label);
  }
  for (const auto& e : truth) {
    auto it = predicted.find(e.id);
    const bool hit = it != predicted.end();
    count(report.overall.counts, e.is_malicious_label(), hit);
    for (const auto& cls : classes) {
      const bool t = e.is_malicious_label() && *e.label == cls;
      bool p = false;
      if (hit) {
        for (const auto& tag : it->second) {
          if (technique_related(tag, cls)) {
            p = true;
            break;
          }
        }
      }
      count(report.per_class[cls].counts, t, p);
    }
  }
  report.overall.metrics = Metrics::from(report.overall.counts);
  for (auto& [cls, r] : report.per_class) r.metrics = Metrics::from(r.counts);
  return report;
}

nlohmann::json EvalReport::to_json() const {
  json per = json::object();
  for (const auto& [cls, r] : per_class) per[cls] = metrics_json(r);
  return {{"events", events},
          {"overall", metrics_json(overall)},
          {"per_class", per},
          {"unknown_evidence", unknown_evidence},
          {"unknown_examples", unknown_examples}};
}

namespace {

std::string fmt_row(const std::string& name, const ClassReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-12s %6zu %6zu %7zu %6zu  %6.4f %6.4f %6.4f %6.4f %6.4f %6.4f\n",
                name.c_str(), r.counts.tp, r.counts.fp, r.counts.tn, r.counts.fn, r.metrics.accuracy,
                r.metrics.precision, r.metrics.recall, r.metrics.f1, r.metrics.fpr, r.metrics.fnr);
  return buf;
}

}  // namespace

std::string EvalReport::table() const {
  std::string out =
      "class            tp     fp      tn     fn     acc   prec    rec     f1    fpr    fnr\n";
  out += fmt_row("overall", overall);
  for (const auto& [cls, r] : per_class) out += fmt_row(cls, r);
  out += "events " + std::to_string(events) + ", unknown evidence ids " +
         std::to_string(unknown_evidence) + "\n";
  return out;
}

// ---------------------------------------------------------------------------

detect::IsolationForest train_baseline_model(const TrainOptions& options) {
  if (options.n < 2) throw Error("training needs at least 2 events");
  ingest::SynthOptions so;
  so.scenario = "baseline";
  so.n = options.n;
  so.seed = options.seed;
  auto stream = ingest::synth_source(so);
  std::vector<events::SystemEvent> kept;
  kept.reserve(stream.size());
  ingest::WindowStats window(options.window_ms);
  for (auto& e : stream) {
    if (!ingest::noise_filter(e, options.noise_rules).keep) continue;
    if (!window.dedup(e).keep) continue;
    kept.push_back(std::move(e));
  }
  const auto rows = detect::window_feature_rows(kept, options.window_ms, options.features);
  return detect::IsolationForest::train(rows, options.forest);
}

// ---------------------------------------------------------------------------

double percentile(std::vector<double> samples, double p) {
  if (samples.empty()) return 0.0;
  std::sort(samples.begin(), samples.end());
  const auto n = samples.size();
  auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return samples[rank - 1];
}

Percentiles percentiles(std::span<const double> samples) {
  std::vector<double> v(samples.begin(), samples.end());
  return {percentile(v, 50), percentile(v, 95), percentile(v, 99)};
}

void BenchOptions::validate() const {
  if (n < 1) throw Error("bench needs n >= 1 events");
  if (anomaly_frac < 0.0 || anomaly_frac > 1.0) throw Error("anomaly_frac must be in [0, 1]");
  pipeline.validate();
}

BenchReport run_bench(const BenchOptions& options) {
  options.validate();
  const std::filesystem::path data(EDR_DATA_DIR);
  const auto tax_path = options.taxonomy_path.empty() ? data / "attck_min.json" : options.taxonomy_path;
  const auto rules_path = options.rules_path.empty() ? data / "rules.json" : options.rules_path;
  const auto noise_path =
      options.noise_rules_path.empty() ? data / "noise_rules.json" : options.noise_rules_path;

  auto tax = std::make_shared<taxonomy::Taxonomy>(taxonomy::load_taxonomy(tax_path));
  auto rules = std::make_shared<detect::RuleSet>(detect::load_rules(rules_path, *tax));
  auto opts = options.pipeline;
  if (std::filesystem::exists(noise_path)) opts.ingest.noise_rules = ingest::load_noise_rules(noise_path);

  std::shared_ptr<const detect::IsolationForest> forest;
  if (options.model_path) {
    forest = std::make_shared<detect::IsolationForest>(detect::IsolationForest::load(*options.model_path));
  } else {
    TrainOptions to;
    to.noise_rules = opts.ingest.noise_rules;
    to.window_ms = opts.ingest.window_ms;
    forest = std::make_shared<detect::IsolationForest>(train_baseline_model(to));
  }

  // Source: four agents, one per scenario, merged by time.
  std::vector<events::SystemEvent> stream;
  stream.reserve(options.n);
  const auto scenarios = ingest::synth_scenarios();
  for (std::size_t i = 0; i < scenarios.size(); ++i) {
    ingest::SynthOptions so;
    so.scenario = std::string(scenarios[i]);
    so.n = options.n / scenarios.size() + (i < options.n % scenarios.size() ? 1 : 0);
    if (so.n == 0) continue;
    so.anomaly_frac = so.scenario == "baseline" ? 0.0 : options.anomaly_frac;
    so.seed = options.seed + i;
    char id[32];
    std::snprintf(id, sizeof id, "bench-%02zu", i + 1);
    so.agent_id = id;
    auto part = ingest::synth_source(so);
    stream.insert(stream.end(), std::make_move_iterator(part.begin()),
                  std::make_move_iterator(part.end()));
  }
  events::sort_events(stream);
  std::vector<std::string> lines;
  lines.reserve(stream.size());
  for (const auto& e : stream) lines.push_back(events::to_jsonl(e));
  stream.clear();
  stream.shrink_to_fit();

  auto actuator = std::make_shared<respond::SimulatedActuator>();
  auto orchestrator = std::make_shared<respond::ResponseOrchestrator>(
      respond::ResponsePolicy::defaults(), tax, actuator);
  pipeline::Pipeline pipe({tax, rules, forest, std::make_shared<detect::RuleBasedClassifier>(), nullptr},
                          opts, orchestrator);
  pipe.set_clock([] { return wall_clock_ms(); });

  rusage before{};
  getrusage(RUSAGE_SELF, &before);
  const auto started = std::chrono::steady_clock::now();
  for (const auto& line : lines) {
    events::SystemEvent e;
    try {
      e = events::parse_event(line);
    } catch (const Error&) {
      pipe.note_skipped();
      continue;
    }
    pipe.process(e);
  }
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  rusage after{};
  getrusage(RUSAGE_SELF, &after);

  BenchReport r;
  r.events = lines.size();
  r.duration_s = elapsed;
  r.events_per_second = elapsed > 0 ? static_cast<double>(lines.size()) / elapsed : 0.0;
  const auto samples = pipe.latency_samples_ms();
  r.latency_ms = percentiles(samples);
  r.latency_samples = samples.size();
  r.alerts = pipe.alerts().size();
  r.detections = pipe.detections_total();
  r.actions = orchestrator->all_results().size();
  r.counters = pipe.counters();
  r.peak_rss_kb = static_cast<std::size_t>(after.ru_maxrss);
  const auto cpu = [](const rusage& u) {
    return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
           static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec) / 1e6;
  };
  r.cpu_s = cpu(after) - cpu(before);
  return r;
}

nlohmann::json BenchReport::to_json() const {
  return {{"events", events},
          {"duration_s", duration_s},
          {"events_per_second", events_per_second},
          {"latency_ms", {{"p50", latency_ms.p50}, {"p95", latency_ms.p95}, {"p99", latency_ms.p99}}},
          {"latency_samples", latency_samples},
          {"alerts", alerts},
          {"detections", detections},
          {"actions", actions},
          {"counters",
           {{"read", counters.read},
            {"kept", counters.kept},
            {"dropped_noise", counters.dropped_noise},
            {"dropped_dup", counters.dropped_dup},
            {"skipped", counters.skipped}}},
          {"peak_rss_kb", peak_rss_kb},
          {"cpu_s", cpu_s}};
}

std::string BenchReport::table() const {
  std::ostringstream out;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "events           %zu\n"
                "duration         %.3f s\n"
                "throughput       %.1f events/s\n"
                "latency p50/p95/p99  %.3f / %.3f / %.3f ms (%zu alerts responded)\n"
                "alerts           %zu\n"
                "detections       %zu\n"
                "actions          %zu\n"
                "read/kept/noise/dup/skipped  %zu / %zu / %zu / %zu / %zu\n"
                "cpu              %.2f s\n"
                "peak rss         %.1f MiB\n",
                events, duration_s, events_per_second, latency_ms.p50, latency_ms.p95, latency_ms.p99,
                latency_samples, alerts, detections, actions, counters.read, counters.kept,
                counters.dropped_noise, counters.dropped_dup, counters.skipped, cpu_s,
                static_cast<double>(peak_rss_kb) / 1024.0);
  out << buf;
  return out.str();
}

}  // namespace edr::harness
