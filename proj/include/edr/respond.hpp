#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/alert.hpp"
#include "edr/rng.hpp"
#include "edr/taxonomy.hpp"

namespace edr::respond {

enum class ActionKind { block_ip, isolate_asset, disable_user, firewall_rule_update, quarantine_file };
enum class ActionStatus { pending, running, succeeded, failed, expired };
enum class PolicyMode { automatic, approval_required };

std::string_view to_string(ActionKind k) noexcept;
std::optional<ActionKind> parse_action_kind(std::string_view text) noexcept;
std::string_view to_string(ActionStatus s) noexcept;
std::string_view to_string(PolicyMode m) noexcept;

/// block_ip needs an IPv4 literal, firewall_rule_update an "ip" or "ip:port",
/// quarantine_file a path, the rest a non-empty id.
bool target_matches_kind(ActionKind kind, std::string_view target);

struct ResponseAction {
  std::string id;
  ActionKind kind = ActionKind::block_ip;
  std::string target;
  std::string alert_id;
  TimestampMs requested_ts = 0;
  ActionStatus status = ActionStatus::pending;
  PolicyMode mode = PolicyMode::automatic;

  bool operator==(const ResponseAction&) const = default;
};

nlohmann::json to_json(const ResponseAction& a);
ResponseAction action_from_json(const nlohmann::json& obj);

struct ActionResult {
  std::string action_id;
  ActionKind kind = ActionKind::block_ip;
  bool success = false;
  double duration_ms = 0.0;
  std::string detail;
};

nlohmann::json to_json(const ActionResult& r);
ActionResult result_from_json(const nlohmann::json& obj);

struct PolicyRule {
  Level tier = Level::low;
  std::string match = "*";  // technique id, tactic id, or "*"
  std::vector<ActionKind> actions;
  PolicyMode mode = PolicyMode::automatic;

  /// 2 technique, 1 tactic, 0 wildcard.
  int specificity() const noexcept;
};

struct ResponsePolicy {
  std::vector<PolicyRule> rules;

  static ResponsePolicy from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;
  /// Every referenced id resolves and each tier has at least one rule.
  void validate(const taxonomy::Taxonomy& tax) const;

  /// critical: {isolate_asset, disable_user} plus a credential-dumping rule
  /// that disables the account first; high: {block_ip, quarantine_file};
  /// medium: {firewall_rule_update}; low: log only.
  static ResponsePolicy defaults();
};

ResponsePolicy load_policy(const std::filesystem::path& path);

struct Selection {
  std::vector<ResponseAction> actions;
  PolicyMode mode = PolicyMode::automatic;
  bool matched = false;  // false: no rule covered this alert (policy gap)
};

/// Union of the actions of every rule matching the alert's tier and tags,
/// deduplicated by (kind, target). The most specific matching rule decides
/// the mode; approval_required actions start pending.
Selection select_actions(const Alert& alert, const ResponsePolicy& policy,
                         const taxonomy::Taxonomy& tax, TimestampMs now);

/// Simulated world state that actuators mutate.
struct WorldLedger {
  std::set<std::string> blocked_ips;
  std::set<std::string> isolated_assets;
  std::set<std::string> disabled_users;
  std::set<std::string> firewall_rules;
  std::set<std::string> quarantined_files;

  /// Applies the effect; returns false when it was already in place.
  bool apply(ActionKind kind, const std::string& target);
  bool contains(ActionKind kind, const std::string& target) const;
  nlohmann::json to_json() const;
  static WorldLedger from_json(const nlohmann::json& obj);
  bool operator==(const WorldLedger&) const = default;
};

class Actuator {
 public:
  virtual ~Actuator() = default;
  virtual ActionResult execute(const ResponseAction& action) = 0;
  virtual WorldLedger snapshot() const = 0;
};

/// Ledger-backed actuator. Mutations are serialized; snapshot() copies under
/// the same lock. Optional fault injection and JSONL audit trail.
class SimulatedActuator final : public Actuator {
 public:
  struct Options {
    double fault_rate = 0.0;
    std::uint64_t seed = 1;
    std::map<ActionKind, double> simulated_latency_ms;  // added to measured time
    std::optional<std::filesystem::path> audit_log;
  };

  SimulatedActuator() : SimulatedActuator(Options{}) {}
  explicit SimulatedActuator(Options options);

  ActionResult execute(const ResponseAction& action) override;
  WorldLedger snapshot() const override;
  void restore(WorldLedger ledger);

 private:
  Options options_;
  mutable std::mutex mu_;
  WorldLedger ledger_;
  Rng rng_;
  std::ofstream audit_;
};

/// Rebuilds the ledger from an audit log by replaying succeeded actions.
WorldLedger replay_audit_log(const std::filesystem::path& path);

struct KindMetrics {
  std::size_t total = 0;
  std::size_t succeeded = 0;
  double success_rate = 0.0;
  double mean_duration_ms = 0.0;  // over succeeded results
};

std::map<ActionKind, KindMetrics> response_metrics(std::span<const ActionResult> results);

/// Policy + actuator + pending-approval queue. Thread-safe.
class ResponseOrchestrator {
 public:
  static constexpr TimestampMs kApprovalTtlMs = 24LL * 3600 * 1000;

  ResponseOrchestrator(ResponsePolicy policy, std::shared_ptr<const taxonomy::Taxonomy> tax,
                       std::shared_ptr<Actuator> actuator);

  struct Outcome {
    std::vector<ResponseAction> actions;
    std::vector<ActionResult> results;
    bool policy_gap = false;
  };

  /// Runs automatic actions not yet executed for this alert and queues
  /// approval_required ones.
  Outcome handle_alert(const Alert& alert, TimestampMs now);
  /// Executes the listed actions directly, bypassing the policy.
  Outcome execute_explicit(const Alert& alert, std::span<const ActionKind> kinds,
                           TimestampMs now);
  /// Executes a pending action. Expired or unknown ids return a failed result.
  ActionResult approve(const std::string& action_id, TimestampMs now);
  std::size_t expire(TimestampMs now);

  std::vector<ResponseAction> actions_for(const std::string& alert_id) const;
  std::vector<ActionResult> results_for(const std::string& alert_id) const;
  std::vector<ActionResult> all_results() const;
  WorldLedger ledger() const { return actuator_->snapshot(); }
  const ResponsePolicy& policy() const noexcept { return policy_; }
  void set_policy(ResponsePolicy policy);

  nlohmann::json to_json() const;
  void restore(const nlohmann::json& state);

 private:
  ActionResult run(ResponseAction& action);

  ResponsePolicy policy_;
  std::shared_ptr<const taxonomy::Taxonomy> tax_;
  std::shared_ptr<Actuator> actuator_;
  mutable std::mutex mu_;
  std::map<std::string, ResponseAction> actions_;  // by id
  std::map<std::string, std::vector<ActionResult>> results_;  // by alert id
};

}  // namespace edr::respond
