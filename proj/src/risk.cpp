#include "edr/risk.hpp"

#include <algorithm>
#include <cmath>

namespace edr::risk {

namespace {

void check_unit(double v, const char* name) {
  if (!(v >= 0.0 && v <= 1.0)) {
    throw Error(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
  }
}

}  // namespace

void RiskWeights::validate() const {
  check_unit(anomaly, "weight anomaly");
  check_unit(frequency, "weight frequency");
  check_unit(severity, "weight severity");
  check_unit(asset_criticality, "weight asset_criticality");
  check_unit(user_risk, "weight user_risk");
  const double sum = anomaly + frequency + severity + asset_criticality + user_risk;
  if (std::abs(sum - 1.0) > 1e-9) {
    throw Error("risk weights must sum to 1.0 (got " + std::to_string(sum) + ")");
  }
}

RiskWeights RiskWeights::from_json(const nlohmann::json& obj) {
  RiskWeights w;
  w.anomaly = obj.value("anomaly", w.anomaly);
  w.frequency = obj.value("frequency", w.frequency);
  w.severity = obj.value("severity", w.severity);
  w.asset_criticality = obj.value("asset_criticality", w.asset_criticality);
  w.user_risk = obj.value("user_risk", w.user_risk);
  return w;
}

nlohmann::json RiskWeights::to_json() const {
  return {{"anomaly", anomaly},
          {"frequency", frequency},
          {"severity", severity},
          {"asset_criticality", asset_criticality},
          {"user_risk", user_risk}};
}

void RiskFactors::validate() const {
  check_unit(anomaly_score, "anomaly_score");
  check_unit(frequency_score, "frequency_score");
  check_unit(severity_score, "severity_score");
  check_unit(asset_criticality, "asset_criticality");
  check_unit(user_risk, "user_risk");
}

RiskFactors RiskFactors::from_json(const nlohmann::json& obj) {
  RiskFactors f;
  f.anomaly_score = obj.value("anomaly_score", 0.0);
  f.frequency_score = obj.value("frequency_score", 0.0);
  f.severity_score = obj.value("severity_score", 0.0);
  f.asset_criticality = obj.value("asset_criticality", 0.0);
  f.user_risk = obj.value("user_risk", 0.0);
  return f;
}

nlohmann::json RiskFactors::to_json() const {
  return {{"anomaly_score", anomaly_score},
          {"frequency_score", frequency_score},
          {"severity_score", severity_score},
          {"asset_criticality", asset_criticality},
          {"user_risk", user_risk}};
}

double frequency_score(std::size_t count, std::size_t threshold) {
  if (threshold == 0) throw Error("frequency threshold must be > 0");
  return std::min(1.0, static_cast<double>(count) / static_cast<double>(threshold));
}

double frequency_score(std::size_t count, long long threshold) {
  if (threshold <= 0) throw Error("frequency threshold must be > 0");
  return frequency_score(count, static_cast<std::size_t>(threshold));
}

double severity_base(Level level) noexcept {
  switch (level) {
    case Level::low: return 0.25;
    case Level::medium: return 0.5;
    case Level::high: return 0.75;
    case Level::critical: return 1.0;
  }
  return 0.5;
}

double severity_score(Level level, std::optional<Level> impact) noexcept {
  const double base = severity_base(level);
  return impact ? std::max(base, severity_base(*impact)) : base;
}

double compute_risk(const RiskFactors& f, const RiskWeights& w) {
  w.validate();
  f.validate();
  const double score = w.anomaly * f.anomaly_score + w.frequency * f.frequency_score +
                       w.severity * f.severity_score + w.asset_criticality * f.asset_criticality +
                       w.user_risk * f.user_risk;
  return std::clamp(score, 0.0, 1.0);
}

Level classify_risk(double score, const TierThresholds& t) {
  if (!(score >= 0.0 && score <= 1.0)) {
    throw Error("risk score must lie in [0, 1], got " + std::to_string(score));
  }
  if (score >= t.critical) return Level::critical;
  if (score >= t.high) return Level::high;
  if (score >= t.medium) return Level::medium;
  return Level::low;
}

double default_user_risk(UserRole role) noexcept {
  switch (role) {
    case UserRole::admin: return 0.6;
    case UserRole::service: return 0.4;
    case UserRole::standard: return 0.2;
  }
  return 0.2;
}

UserRole infer_user_role(std::string_view name) {
  if (iequals(name, "SYSTEM") || icontains(name, "admin")) return UserRole::admin;
  if (istarts_with(name, "svc_") || istarts_with(name, "svc-") || iends_with(name, " SERVICE")) {
    return UserRole::service;
  }
  return UserRole::standard;
}

void ProfileDirectory::set_asset(AssetProfile asset) {
  check_unit(asset.criticality, "asset criticality");
  auto id = asset.asset_id;
  assets_[id] = std::move(asset);
}

void ProfileDirectory::set_user(UserProfile user) {
  check_unit(user.base_risk, "user base_risk");
  auto name = to_lower(user.user_name);
  users_[name] = std::move(user);
}

double ProfileDirectory::asset_criticality(const std::string& asset_id) const {
  auto it = assets_.find(asset_id);
  return it == assets_.end() ? default_asset_criticality : it->second.criticality;
}

double ProfileDirectory::user_risk(const std::string& user_name) const {
  if (user_name.empty()) return 0.0;
  auto it = users_.find(to_lower(user_name));
  if (it != users_.end()) return it->second.base_risk;
  return default_user_risk(infer_user_role(user_name));
}

}  // namespace edr::risk
