#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/detect.hpp"
#include "edr/risk.hpp"

namespace edr {

enum class AlertStatus { open, acknowledged, resolved, false_positive };

std::string_view to_string(AlertStatus s) noexcept;
std::optional<AlertStatus> parse_alert_status(std::string_view text) noexcept;

/// open -> acknowledged -> {resolved, false_positive}; open may also close directly.
bool legal_transition(AlertStatus from, AlertStatus to) noexcept;

/// Response targets gathered from the evidence events.
struct AlertEntities {
  std::set<std::string> users;
  std::set<std::string> remote_ips;        // non-private IPv4 literals
  std::set<std::string> remote_endpoints;  // ip:port for the same hosts
  std::set<std::string> files;

  void absorb(const events::SystemEvent& e);
  void merge(const AlertEntities& other);
  bool operator==(const AlertEntities&) const = default;
};

struct Alert {
  std::string id;
  std::string agent_id;
  TimestampMs created_ts = 0;
  TimestampMs updated_ts = 0;
  std::vector<detect::Detection> detections;
  risk::RiskFactors factors;
  risk::RiskWeights weights;
  double risk_score = 0.0;
  Level tier = Level::low;
  std::vector<std::string> technique_ids;
  AlertStatus status = AlertStatus::open;
  std::optional<std::string> assignee;
  std::vector<std::string> notes;
  AlertEntities entities;
  std::string source = "pipeline";  // pipeline | agent | manual
  std::string source_id;

  /// Recomputes risk_score and tier from the stored factors and weights.
  void rescore(const risk::TierThresholds& tiers = {});
  bool has_technique(std::string_view id) const;
};

nlohmann::json to_json(const Alert& a);
Alert alert_from_json(const nlohmann::json& obj);

}  // namespace edr
