#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/alert.hpp"
#include "edr/detect.hpp"
#include "edr/ingest.hpp"
#include "edr/respond.hpp"
#include "edr/risk.hpp"
#include "edr/taxonomy.hpp"

namespace edr::pipeline {

struct PipelineOptions {
  ingest::PipelineConfig ingest;
  risk::RiskWeights weights;
  risk::TierThresholds tiers;
  std::size_t frequency_threshold = 100;  // events per window for a full frequency factor
  TimestampMs alert_group_ms = 60'000;
  double anomaly_threshold = 0.6;
  events::FeatureConfig features;
  bool classifier_enabled = true;
  std::string alert_prefix = "ALR";

  void validate() const;
  static PipelineOptions from_json(const nlohmann::json& obj);
};

/// Shared, immutable detection assets.
struct Components {
  std::shared_ptr<const taxonomy::Taxonomy> taxonomy;
  std::shared_ptr<const detect::RuleSet> rules;
  std::shared_ptr<const detect::IsolationForest> forest;  // may be null
  std::shared_ptr<const detect::BehaviorClassifier> classifier;  // may be null
  std::shared_ptr<const risk::ProfileDirectory> profiles;  // may be null
};

struct EventOutcome {
  ingest::Verdict verdict;
  bool late = false;
  std::optional<double> anomaly_score;  // when a model is loaded
  std::vector<detect::Detection> detections;
  std::vector<std::string> alert_ids;  // alerts created or extended
};

/// Ingest -> detect -> risk -> respond for any number of agent streams.
/// Each agent has its own window and correlation state and is processed
/// under its own lock; distinct agents may run concurrently.
class Pipeline {
 public:
  Pipeline(Components components, PipelineOptions options,
           std::shared_ptr<respond::ResponseOrchestrator> orchestrator = nullptr);

  EventOutcome process(const events::SystemEvent& e);
  /// Records source lines that never became events.
  void note_skipped(std::size_t n = 1);

  ingest::IngestCounters counters() const;
  std::size_t late_dropped() const;
  std::vector<Alert> alerts() const;  // creation order
  std::optional<Alert> find_alert(const std::string& id) const;
  /// Alerts created or changed since the previous call.
  std::vector<Alert> take_updates();

  /// Wall-clock milliseconds from an alert's first detection to its first
  /// executed response action, one sample per responded alert.
  std::vector<double> latency_samples_ms() const;
  std::size_t detections_total() const;
  bool classifier_degraded() const;

  /// Hot swaps; events already in flight finish with the previous value.
  void set_forest(std::shared_ptr<const detect::IsolationForest> forest);
  void set_profiles(std::shared_ptr<const risk::ProfileDirectory> profiles);
  std::shared_ptr<const detect::IsolationForest> forest() const;

  /// Clock handed to the orchestrator for action timestamps.
  void set_clock(std::function<TimestampMs()> clock) { clock_ = std::move(clock); }

  const PipelineOptions& options() const noexcept { return options_; }
  const std::shared_ptr<respond::ResponseOrchestrator>& orchestrator() const noexcept {
    return orchestrator_;
  }

  nlohmann::json state_to_json() const;
  void restore(const nlohmann::json& state);

 private:
  struct AgentState {
    explicit AgentState(const ingest::PipelineConfig& cfg)
        : window(cfg.window_ms, cfg.max_window_events, cfg.dedup_horizon_ms) {}
    std::mutex mu;
    ingest::WindowStats window;
    detect::CorrelationMatcher matcher;
    std::optional<std::string> current_alert;
    std::size_t alert_seq = 0;
    std::optional<TimestampMs> first_ts;  // anomaly scoring waits one full window
    bool anomalous = false;               // last scored window was above threshold
    ingest::IngestCounters counters;
  };
  struct AlertTiming {
    std::chrono::steady_clock::time_point first_detection;
    bool responded = false;
  };

  AgentState& agent_state(const std::string& agent_id);
  std::vector<detect::Detection> detect(AgentState& st, const events::SystemEvent& e,
                                        std::optional<double>& anomaly);
  std::vector<std::string> attach(AgentState& st, const events::SystemEvent& e,
                                  std::vector<detect::Detection>& detections, double anomaly,
                                  std::chrono::steady_clock::time_point started);
  void update_factors(Alert& alert, const AgentState& st, const detect::Detection& d,
                      double anomaly, const risk::ProfileDirectory& profiles) const;
  std::shared_ptr<const risk::ProfileDirectory> profiles() const;

  mutable std::mutex components_mu_;  // guards forest and profiles
  Components components_;
  PipelineOptions options_;
  std::shared_ptr<respond::ResponseOrchestrator> orchestrator_;
  detect::ClassifierStage classifier_;
  std::function<TimestampMs()> clock_ = wall_clock_ms;

  mutable std::mutex agents_mu_;
  std::map<std::string, std::unique_ptr<AgentState>> agents_;

  mutable std::mutex alerts_mu_;
  std::map<std::string, Alert> alerts_;
  std::vector<std::string> alert_order_;
  std::set<std::string> dirty_;
  std::map<std::string, AlertTiming> timing_;
  std::vector<double> latency_ms_;
  std::size_t detections_total_ = 0;
  std::size_t skipped_ = 0;
  bool degraded_ = false;
};

}  // namespace edr::pipeline
