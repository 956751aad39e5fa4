#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/alert.hpp"
#include "edr/iforest.hpp"
#include "edr/pipeline.hpp"

namespace edr::harness {

// ---- datasets --------------------------------------------------------------

struct SplitSizes {
  std::size_t train = 0;
  std::size_t val = 0;
  std::size_t test = 0;
};

/// val and test get floor(n * frac); train takes the remainder.
SplitSizes split_sizes(std::size_t n, const events::DatasetSplit& split);

struct Splits {
  std::vector<events::SystemEvent> train, val, test;
};

/// Seeded shuffle, then cut by split_sizes. Each part is re-sorted by (ts, id).
Splits split_dataset(std::vector<events::SystemEvent> events, const events::DatasetSplit& split,
                     std::uint64_t seed);

void write_jsonl(const std::filesystem::path& path, std::span<const events::SystemEvent> events);
/// Malformed lines are skipped and counted in `skipped` when given.
std::vector<events::SystemEvent> read_events_jsonl(const std::filesystem::path& path,
                                                   std::size_t* skipped = nullptr);
void write_alerts_jsonl(const std::filesystem::path& path, std::span<const Alert> alerts);
std::vector<Alert> read_alerts_jsonl(const std::filesystem::path& path);

// ---- evaluation ------------------------------------------------------------

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const noexcept { return tp + fp + tn + fn; }
  bool operator==(const Confusion&) const = default;
};

/// Ratios with an empty denominator are 0.
struct Metrics {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0, fpr = 0, fnr = 0;
  static Metrics from(const Confusion& c);
};

struct ClassReport {
  Confusion counts;
  Metrics metrics;
};

struct EvalReport {
  ClassReport overall;                        // malicious vs benign
  std::map<std::string, ClassReport> per_class;  // one-vs-rest per technique label
  std::size_t events = 0;
  std::size_t unknown_evidence = 0;  // evidence ids absent from the truth set
  std::vector<std::string> unknown_examples;

  nlohmann::json to_json() const;
  std::string table() const;
};

/// An event is predicted positive iff some alert lists it as evidence. For the
/// per-technique view an alert counts for technique t when one of its tags is
/// t, t's parent, or a sub-technique of t.
EvalReport evaluate(std::span<const Alert> alerts, std::span<const events::SystemEvent> truth);

// ---- model training --------------------------------------------------------

struct TrainOptions {
  std::size_t n = 20'000;
  std::uint64_t seed = 7;
  detect::ForestParams forest{};
  TimestampMs window_ms = 60'000;
  std::vector<ingest::NoiseRule> noise_rules;
  events::FeatureConfig features{};
};

/// Baseline synth stream -> noise filter + dedup -> window rows -> forest.
detect::IsolationForest train_baseline_model(const TrainOptions& options);

// ---- benchmark -------------------------------------------------------------

struct Percentiles {
  double p50 = 0, p95 = 0, p99 = 0;
};

/// Nearest-rank percentile over an unsorted sample; 0 for an empty sample.
double percentile(std::vector<double> samples, double p);
Percentiles percentiles(std::span<const double> samples);

struct BenchOptions {
  std::size_t n = 100'000;
  std::uint64_t seed = 42;
  double anomaly_frac = 0.02;
  std::optional<std::filesystem::path> model_path;  // trains a baseline model when absent
  std::filesystem::path taxonomy_path;
  std::filesystem::path rules_path;
  std::filesystem::path noise_rules_path;
  pipeline::PipelineOptions pipeline;

  void validate() const;
};

struct BenchReport {
  std::size_t events = 0;
  double duration_s = 0;
  double events_per_second = 0;
  Percentiles latency_ms;
  std::size_t latency_samples = 0;
  std::size_t alerts = 0;
  std::size_t detections = 0;
  std::size_t actions = 0;
  ingest::IngestCounters counters;
  std::size_t peak_rss_kb = 0;
  double cpu_s = 0;

  nlohmann::json to_json() const;
  std::string table() const;
};

/// Four agent streams (baseline, credential_theft, ransomware, beacon) merged
/// by time, serialized to JSONL and run unthrottled through the full pipeline
/// with the default response policy. Throughput covers parsing plus
/// processing; latency is detection-to-response per alert.
BenchReport run_bench(const BenchOptions& options);

}  // namespace edr::harness
