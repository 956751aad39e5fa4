#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/common.hpp"

namespace edr::risk {

struct RiskWeights {
  double anomaly = 0.3;
  double frequency = 0.2;
  double severity = 0.25;
  double asset_criticality = 0.15;
  double user_risk = 0.1;

  /// Throws Error naming the violated invariant: each weight in [0, 1] and
  /// the sum equal to 1 within 1e-9.
  void validate() const;

  static RiskWeights from_json(const nlohmann::json& obj);
  nlohmann::json to_json() const;
};

struct RiskFactors {
  double anomaly_score = 0.0;
  double frequency_score = 0.0;
  double severity_score = 0.0;
  double asset_criticality = 0.0;
  double user_risk = 0.0;

  void validate() const;
  static RiskFactors from_json(const nlohmann::json& obj);
  nlohmann::json to_json() const;
  bool operator==(const RiskFactors&) const = default;
};

/// min(1, count / threshold). Throws Error if threshold <= 0.
double frequency_score(std::size_t count, std::size_t threshold = 100);
double frequency_score(std::size_t count, long long threshold);

/// low 0.25, medium 0.5, high 0.75, critical 1.0; impact only raises the value.
double severity_base(Level level) noexcept;
double severity_score(Level level, std::optional<Level> technique_impact = std::nullopt) noexcept;

/// Weighted sum of the five factors; validates both arguments.
double compute_risk(const RiskFactors& f, const RiskWeights& w = {});

/// Tier thresholds: low [0, 0.4), medium [0.4, 0.6), high [0.6, 0.8), critical [0.8, 1].
struct TierThresholds {
  double medium = 0.4;
  double high = 0.6;
  double critical = 0.8;
};

Level classify_risk(double score, const TierThresholds& t = {});

struct AssetProfile {
  std::string asset_id;
  double criticality = 0.5;
  std::vector<std::string> tags;
};

enum class UserRole { admin, service, standard };

struct UserProfile {
  std::string user_name;
  double base_risk = 0.2;
};

double default_user_risk(UserRole role) noexcept;
/// Name heuristic used when no explicit profile exists: "SYSTEM"/"*admin*" are
/// admin accounts, "svc_*"/"* SERVICE" service accounts, everyone else standard.
UserRole infer_user_role(std::string_view user_name);

/// Asset and user lookups with defaults for unknown ids.
class ProfileDirectory {
 public:
  void set_asset(AssetProfile asset);
  void set_user(UserProfile user);

  double asset_criticality(const std::string& asset_id) const;
  double user_risk(const std::string& user_name) const;
  const std::map<std::string, AssetProfile>& assets() const noexcept { return assets_; }

  double default_asset_criticality = 0.5;

 private:
  std::map<std::string, AssetProfile> assets_;
  std::map<std::string, UserProfile> users_;
};

}  // namespace edr::risk
