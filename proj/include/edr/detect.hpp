#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/features.hpp"
#include "edr/iforest.hpp"
#include "edr/ingest.hpp"
#include "edr/match.hpp"
#include "edr/taxonomy.hpp"

namespace edr::detect {

enum class Engine { anomaly, signature, correlation, classifier };

std::string_view to_string(Engine e) noexcept;
std::optional<Engine> parse_engine(std::string_view text) noexcept;

struct Detection {
  Engine engine = Engine::signature;
  double score = 0.0;  // [0, 1]
  std::vector<std::string> technique_ids;
  std::vector<std::string> evidence;  // SystemEvent ids, never empty
  TimestampMs ts = 0;
  std::string agent_id;
  std::string rule_id;
  Level severity = Level::medium;

  bool operator==(const Detection&) const = default;
};

nlohmann::json to_json(const Detection& d);
Detection detection_from_json(const nlohmann::json& obj);

struct SignatureRule {
  std::string id;
  std::string name;
  Conjunction match;
  std::string technique_id;
  Level severity = Level::medium;
};

struct CorrelationRule {
  std::string id;
  std::string name;
  std::vector<Conjunction> steps;  // >= 2, matched in order
  TimestampMs within_ms = 60'000;
  std::string technique_id;
  Level severity = Level::high;
  /// Fields whose values must equal the first step's event across all steps.
  std::vector<std::string> same;
};

struct RuleSet {
  std::vector<SignatureRule> signatures;
  std::vector<CorrelationRule> correlations;
};

/// Parses the rules document and checks every technique against `tax`.
RuleSet rules_from_json(const nlohmann::json& doc, const taxonomy::Taxonomy& tax);
RuleSet load_rules(const std::filesystem::path& path, const taxonomy::Taxonomy& tax);

/// One Detection (score 1.0) per matching rule, in rule order.
std::vector<Detection> match_signatures(const events::SystemEvent& e,
                                        std::span<const SignatureRule> rules);

/// Ordered multi-step matcher over one agent's window. Events that complete an
/// instance are consumed and never reused for the same rule. For each rule the
/// leftmost instance (earliest start, then earliest later steps) is taken
/// repeatedly until none remains.
class CorrelationMatcher {
 public:
  std::vector<Detection> match(const ingest::WindowStats& stats,
                               std::span<const CorrelationRule> rules);

  /// Consumed-event bookkeeping; the step cache is rebuilt lazily.
  nlohmann::json to_json() const;
  void restore(const nlohmann::json& obj);

 private:
  struct RuleState {
    std::unordered_map<std::string, TimestampMs> consumed;
  };
  struct StepMask {
    TimestampMs ts;
    std::vector<std::uint64_t> masks;  // per rule
  };
  std::unordered_map<std::string, RuleState> rules_;
  std::unordered_map<std::string, StepMask> cache_;
};

inline std::vector<Detection> match_correlations(const ingest::WindowStats& stats,
                                                 std::span<const CorrelationRule> rules,
                                                 CorrelationMatcher& matcher) {
  return matcher.match(stats, rules);
}

/// Replacement seam for a learned behavior model: a pure function of the
/// window. Implementations may throw; the stage turns that into degraded mode.
class BehaviorClassifier {
 public:
  virtual ~BehaviorClassifier() = default;
  virtual std::string_view name() const = 0;
  virtual std::vector<Detection> classify(const ingest::WindowStats& window) const = 0;
  /// Technique tags for a standalone feature vector.
  virtual std::vector<std::string> tag_features(const events::FeatureVector& fv) const = 0;
};

/// Deterministic window-pattern table standing in for the learned model.
///  - brute force: >= 20 failed logons for an account, then a success -> T1110, 0.9
///  - mass encryption: the 20th rename to an encrypted extension -> T1486, 0.8
///  - autorun by unsigned image: Run-key write from an unsigned process -> T1547.001, 0.7
class RuleBasedClassifier final : public BehaviorClassifier {
 public:
  struct Thresholds {
    std::size_t failed_logons = 20;
    std::size_t encrypted_renames = 20;
  };

  RuleBasedClassifier() = default;
  explicit RuleBasedClassifier(Thresholds t) : thresholds_(t) {}

  std::string_view name() const override { return "rule-stub"; }
  std::vector<Detection> classify(const ingest::WindowStats& window) const override;
  std::vector<std::string> tag_features(const events::FeatureVector& fv) const override;

 private:
  Thresholds thresholds_;
};

struct ClassifierOutcome {
  std::vector<Detection> detections;
  bool degraded = false;
  std::string error;
};

/// Runs a classifier under the latency budget. Failures and overruns return
/// no detections with `degraded` set; a disabled stage returns nothing.
class ClassifierStage {
 public:
  ClassifierStage() = default;
  ClassifierStage(std::shared_ptr<const BehaviorClassifier> impl, bool enabled = true,
                  std::chrono::milliseconds budget = std::chrono::milliseconds(50))
      : impl_(std::move(impl)), enabled_(enabled), budget_(budget) {}

  ClassifierOutcome run(const ingest::WindowStats& window) const;
  std::vector<std::string> tags(const events::FeatureVector& fv) const;
  bool enabled() const noexcept { return enabled_ && impl_ != nullptr; }

 private:
  std::shared_ptr<const BehaviorClassifier> impl_;
  bool enabled_ = false;
  std::chrono::milliseconds budget_{50};
};

/// Forest + threshold wrapper producing anomaly detections for a window.
class AnomalyDetector {
 public:
  AnomalyDetector() = default;
  AnomalyDetector(std::shared_ptr<const IsolationForest> forest, double threshold = 0.6,
                  events::FeatureConfig features = {})
      : forest_(std::move(forest)), threshold_(threshold), features_(features) {}

  bool ready() const noexcept { return forest_ && !forest_->empty(); }
  double threshold() const noexcept { return threshold_; }
  const events::FeatureConfig& feature_config() const noexcept { return features_; }
  const std::shared_ptr<const IsolationForest>& forest() const noexcept { return forest_; }

  double score(const events::FeatureVector& fv) const;

 private:
  std::shared_ptr<const IsolationForest> forest_;
  double threshold_ = 0.6;
  events::FeatureConfig features_;
};

/// Training rows for the forest: one feature vector per event, taken over the
/// sliding window that ends at that event, grouped by agent. Rows from the
/// first window of each stream are skipped, matching the pipeline warm-up.
std::vector<std::vector<double>> window_feature_rows(std::span<const events::SystemEvent> stream,
                                                     TimestampMs window_ms,
                                                     const events::FeatureConfig& cfg = {},
                                                     std::size_t stride = 1);

}  // namespace edr::detect
