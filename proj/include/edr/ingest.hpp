#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "edr/events.hpp"
#include "edr/match.hpp"

namespace edr::ingest {

struct NoiseRule {
  std::string name;
  FieldPredicate predicate;
};

std::vector<NoiseRule> noise_rules_from_json(const nlohmann::json& arr);
std::vector<NoiseRule> load_noise_rules(const std::filesystem::path& path);

struct PipelineConfig {
  TimestampMs window_ms = 60'000;
  std::size_t max_window_events = 10'000;
  TimestampMs dedup_horizon_ms = 5'000;
  std::optional<double> replay_rate;  // events/second; nullopt = unthrottled
  std::vector<NoiseRule> noise_rules;

  void validate() const;
};

struct Verdict {
  bool keep = true;
  std::string reason;  // rule name, or "duplicate"

  static Verdict kept() { return {}; }
  static Verdict dropped(std::string why) { return {false, std::move(why)}; }
};

/// First matching rule in list order wins.
Verdict noise_filter(const events::SystemEvent& e, std::span<const NoiseRule> rules);

/// Sliding window for one agent stream: retained ring, per-(category, action)
/// counts, and the dedup last-kept map. Single writer.
class WindowStats {
 public:
  WindowStats(TimestampMs window_ms = 60'000, std::size_t max_events = 10'000,
              TimestampMs dedup_horizon_ms = 5'000);

  /// Appends e and evicts everything older than newest - window. Events older
  /// than that bound on arrival are counted in late_dropped() and ignored.
  bool update(const events::SystemEvent& e);

  /// Drop iff the same (agent, category, action, object, pid) was kept within
  /// the dedup horizon. Records e as kept otherwise.
  Verdict dedup(const events::SystemEvent& e);

  const std::deque<events::SystemEvent>& ring() const noexcept { return ring_; }
  std::size_t count(events::Category c, std::string_view action) const;
  const std::map<std::string, std::size_t>& counts() const noexcept { return counts_; }
  std::optional<TimestampMs> newest_ts() const noexcept { return newest_; }
  std::size_t late_dropped() const noexcept { return late_dropped_; }
  std::size_t evicted() const noexcept { return evicted_; }
  TimestampMs window_ms() const noexcept { return window_ms_; }

  static std::string count_key(events::Category c, std::string_view action);

  /// Full state for snapshots; counts are rebuilt from the ring on load.
  nlohmann::json to_json() const;
  static WindowStats from_json(const nlohmann::json& obj);

 private:
  void evict_front();

  TimestampMs window_ms_;
  std::size_t max_events_;
  TimestampMs dedup_horizon_ms_;
  std::deque<events::SystemEvent> ring_;
  std::map<std::string, std::size_t> counts_;
  std::unordered_map<std::string, TimestampMs> last_kept_;
  std::optional<TimestampMs> newest_;
  std::size_t late_dropped_ = 0;
  std::size_t evicted_ = 0;
  std::size_t dedup_checks_ = 0;
};

/// Free-function forms of the two ingest stages.
inline Verdict dedup(const events::SystemEvent& e, WindowStats& stats) { return stats.dedup(e); }
inline bool update_window(WindowStats& stats, const events::SystemEvent& e) {
  return stats.update(e);
}

/// Reads a JSONL file line by line, optionally paced to a fixed rate.
/// Malformed lines are skipped and counted.
class ReplaySource {
 public:
  static constexpr std::size_t kMaxErrors = 16;

  explicit ReplaySource(const std::filesystem::path& path,
                        std::optional<double> rate = std::nullopt);

  std::optional<events::SystemEvent> next();

  std::size_t lines_read() const noexcept { return lines_read_; }
  std::size_t emitted() const noexcept { return emitted_; }
  std::size_t skipped() const noexcept { return skipped_; }
  /// First kMaxErrors parse errors; skipped() has the full count.
  const std::vector<std::string>& errors() const noexcept { return errors_; }

 private:
  std::ifstream in_;
  std::optional<double> rate_;
  std::chrono::steady_clock::time_point start_;
  std::size_t lines_read_ = 0;
  std::size_t emitted_ = 0;
  std::size_t skipped_ = 0;
  std::vector<std::string> errors_;
};

struct SynthOptions {
  std::string scenario = "baseline";
  std::size_t n = 1000;
  double anomaly_frac = 0.0;
  std::uint64_t seed = 42;
  std::string agent_id = "agent-001";
  TimestampMs start_ts = 1'740'992'400'000;  // 2025-03-03T09:00:00Z
};

std::span<const std::string_view> synth_scenarios() noexcept;

/// Primary technique tag an alert for this scenario should carry
/// ("T1003" for credential_theft); empty for baseline.
std::string scenario_technique(std::string_view scenario);

/// Deterministic labeled stream: exactly round(n * anomaly_frac) events carry
/// technique labels, arranged as coherent attack sequences; the rest are
/// "benign". Output is sorted by ts. Throws Error on unknown scenario.
std::vector<events::SystemEvent> synth_source(const SynthOptions& options);

/// Conservation counters for one pass over a source.
struct IngestCounters {
  std::size_t read = 0;
  std::size_t kept = 0;
  std::size_t dropped_noise = 0;
  std::size_t dropped_dup = 0;
  std::size_t skipped = 0;

  bool balanced() const noexcept { return read == kept + dropped_noise + dropped_dup + skipped; }
};

}  // namespace edr::ingest
