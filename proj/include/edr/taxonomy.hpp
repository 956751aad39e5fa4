#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/common.hpp"

namespace edr::taxonomy {

struct Tactic {
  std::string id;  // TA####
  std::string name;
  int ordinal = 0;  // kill-chain position

  bool operator==(const Tactic&) const = default;
};

struct Technique {
  std::string id;  // T#### or T####.###
  std::string name;
  std::vector<std::string> tactic_ids;
  Level impact = Level::medium;

  bool is_subtechnique() const noexcept { return id.find('.') != std::string::npos; }
  bool operator==(const Technique&) const = default;
};

class TaxonomyError : public Error {
 public:
  TaxonomyError(std::string message, std::string offending_id)
      : Error(std::move(message)), offending_id_(std::move(offending_id)) {}
  const std::string& offending_id() const noexcept { return offending_id_; }

 private:
  std::string offending_id_;
};

bool valid_tactic_id(std::string_view id) noexcept;
bool valid_technique_id(std::string_view id) noexcept;

/// Immutable after construction; referential integrity is checked by from_json.
class Taxonomy {
 public:
  Taxonomy() = default;

  static Taxonomy from_json(const nlohmann::json& doc);
  nlohmann::json to_json() const;

  const std::string& version() const noexcept { return version_; }
  const std::map<std::string, Tactic>& tactics() const noexcept { return tactics_; }
  const std::map<std::string, Technique>& techniques() const noexcept { return techniques_; }

  /// Exact-id lookup; "T1003.001" never falls back to "T1003".
  const Technique* lookup_technique(std::string_view id) const;
  const Tactic* lookup_tactic(std::string_view id) const;

  /// Parent technique id for sub-techniques, the id itself otherwise.
  static std::string parent_id(std::string_view technique_id);

  bool operator==(const Taxonomy&) const = default;

 private:
  std::string version_;
  std::map<std::string, Tactic> tactics_;
  std::map<std::string, Technique> techniques_;
};

Taxonomy load_taxonomy(const std::filesystem::path& path);

}  // namespace edr::taxonomy
