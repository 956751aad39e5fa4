#include "edr/alert.hpp"

#include <algorithm>
#include <array>

namespace edr {

namespace {

constexpr std::array<std::string_view, 4> kStatusNames{"open", "acknowledged", "resolved",
                                                       "false_positive"};

bool service_account(std::string_view user) {
  return iequals(user, "SYSTEM") || iequals(user, "LOCAL SERVICE") ||
         iequals(user, "NETWORK SERVICE");
}

}  // namespace

std::string_view to_string(AlertStatus s) noexcept {
  return kStatusNames[static_cast<std::size_t>(s)];
}

std::optional<AlertStatus> parse_alert_status(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kStatusNames.size(); ++i) {
    if (kStatusNames[i] == text) return static_cast<AlertStatus>(i);
  }
  return std::nullopt;
}

bool legal_transition(AlertStatus from, AlertStatus to) noexcept {
  switch (from) {
    case AlertStatus::open:
      return to == AlertStatus::acknowledged || to == AlertStatus::resolved ||
             to == AlertStatus::false_positive;
    case AlertStatus::acknowledged:
      return to == AlertStatus::resolved || to == AlertStatus::false_positive;
    case AlertStatus::resolved:
    case AlertStatus::false_positive:
      return false;
  }
  return false;
}

void AlertEntities::absorb(const events::SystemEvent& e) {
  if (!e.subject.user.empty() && !service_account(e.subject.user)) users.insert(e.subject.user);
  switch (e.category) {
    case events::Category::network: {
      const auto ep = events::split_endpoint(e.object);
      if (e.action == "connect" && events::is_ipv4_literal(ep.host) &&
          !events::is_private_ipv4(ep.host)) {
        remote_ips.insert(ep.host);
        if (ep.port > 0) remote_endpoints.insert(e.object);
      }
      break;
    }
    case events::Category::file:
      if (e.action != "delete" && !e.object.empty()) files.insert(e.object);
      break;
    case events::Category::process:
      if (!e.subject.is_signed && !e.subject.image.empty()) files.insert(e.subject.image);
      break;
    default:
      break;
  }
}

void AlertEntities::merge(const AlertEntities& other) {
  users.insert(other.users.begin(), other.users.end());
  remote_ips.insert(other.remote_ips.begin(), other.remote_ips.end());
  remote_endpoints.insert(other.remote_endpoints.begin(), other.remote_endpoints.end());
  files.insert(other.files.begin(), other.files.end());
}

void Alert::rescore(const risk::TierThresholds& tiers) {
  risk_score = risk::compute_risk(factors, weights);
  tier = risk::classify_risk(risk_score, tiers);
}

bool Alert::has_technique(std::string_view id) const {
  return std::any_of(technique_ids.begin(), technique_ids.end(), [&](const std::string& t) {
    return t == id || taxonomy::Taxonomy::parent_id(t) == id;
  });
}

nlohmann::json to_json(const Alert& a) {
  auto detections = nlohmann::json::array();
  for (const auto& d : a.detections) detections.push_back(detect::to_json(d));
  nlohmann::json obj{{"id", a.id},
                     {"agent_id", a.agent_id},
                     {"created_ts", format_rfc3339(a.created_ts)},
                     {"updated_ts", format_rfc3339(a.updated_ts)},
                     {"detections", std::move(detections)},
                     {"factors", a.factors.to_json()},
                     {"weights", a.weights.to_json()},
                     {"risk_score", a.risk_score},
                     {"tier", std::string(to_string(a.tier))},
                     {"technique_ids", a.technique_ids},
                     {"status", std::string(to_string(a.status))},
                     {"notes", a.notes},
                     {"entities",
                      {{"users", a.entities.users},
                       {"remote_ips", a.entities.remote_ips},
                       {"remote_endpoints", a.entities.remote_endpoints},
                       {"files", a.entities.files}}},
                     {"source", a.source},
                     {"source_id", a.source_id}};
  obj["assignee"] = a.assignee ? nlohmann::json(*a.assignee) : nlohmann::json(nullptr);
  return obj;
}

Alert alert_from_json(const nlohmann::json& obj) {
  try {
    Alert a;
    a.id = obj.value("id", std::string{});
    a.agent_id = obj.at("agent_id").get<std::string>();
    auto ts = [&](const char* key) {
      auto it = obj.find(key);
      if (it == obj.end()) return TimestampMs{0};
      auto parsed = parse_rfc3339(it->get<std::string>());
      if (!parsed) throw Error(std::string("invalid alert timestamp ") + key);
      return *parsed;
    };
    a.created_ts = ts("created_ts");
    a.updated_ts = ts("updated_ts");
    for (const auto& d : obj.value("detections", nlohmann::json::array())) {
      a.detections.push_back(detect::detection_from_json(d));
    }
    if (obj.contains("factors")) a.factors = risk::RiskFactors::from_json(obj.at("factors"));
    if (obj.contains("weights")) a.weights = risk::RiskWeights::from_json(obj.at("weights"));
    a.risk_score = obj.value("risk_score", 0.0);
    a.tier = parse_level(obj.value("tier", std::string{"low"})).value_or(Level::low);
    a.technique_ids = obj.value("technique_ids", std::vector<std::string>{});
    auto status = parse_alert_status(obj.value("status", std::string{"open"}));
    if (!status) throw Error("invalid alert status");
    a.status = *status;
    if (auto it = obj.find("assignee"); it != obj.end() && it->is_string()) {
      a.assignee = it->get<std::string>();
    }
    a.notes = obj.value("notes", std::vector<std::string>{});
    if (auto it = obj.find("entities"); it != obj.end()) {
      a.entities.users = it->value("users", std::set<std::string>{});
      a.entities.remote_ips = it->value("remote_ips", std::set<std::string>{});
      a.entities.remote_endpoints = it->value("remote_endpoints", std::set<std::string>{});
      a.entities.files = it->value("files", std::set<std::string>{});
    }
    a.source = obj.value("source", std::string{"pipeline"});
    a.source_id = obj.value("source_id", std::string{});
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed alert: ") + e.what());
  }
}

}  // namespace edr
