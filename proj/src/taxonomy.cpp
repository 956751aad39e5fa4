#include "edr/taxonomy.hpp"

#include <cctype>
#include <fstream>

namespace edr::taxonomy {

namespace {

bool digits(std::string_view s, std::size_t pos, std::size_t n) {
  if (pos + n > s.size()) return false;
  for (std::size_t i = pos; i < pos + n; ++i) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

template <typename T>
T required(const nlohmann::json& obj, const char* key, const std::string& owner) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw TaxonomyError("missing field '" + std::string(key) + "' in " + owner, owner);
  }
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw TaxonomyError("field '" + std::string(key) + "' has wrong type in " + owner, owner);
  }
}

}  // namespace

bool valid_tactic_id(std::string_view id) noexcept {
  return id.size() == 6 && id.substr(0, 2) == "TA" && digits(id, 2, 4);
}

bool valid_technique_id(std::string_view id) noexcept {
  if (id.size() == 5) return id[0] == 'T' && digits(id, 1, 4);
  return id.size() == 9 && id[0] == 'T' && digits(id, 1, 4) && id[5] == '.' &&
         digits(id, 6, 3);
}

Taxonomy Taxonomy::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw TaxonomyError("taxonomy document must be an object", "");
  Taxonomy tax;
  tax.version_ = doc.value("version", std::string{});

  const auto& tactics = doc.contains("tactics") ? doc.at("tactics") : nlohmann::json::array();
  if (!tactics.is_array()) throw TaxonomyError("'tactics' must be an array", "");
  for (const auto& t : tactics) {
    Tactic tactic;
    tactic.id = required<std::string>(t, "id", "tactic");
    if (!valid_tactic_id(tactic.id)) {
      throw TaxonomyError("malformed tactic id " + tactic.id, tactic.id);
    }
    tactic.name = required<std::string>(t, "name", tactic.id);
    tactic.ordinal = t.value("ordinal", 0);
    auto id = tactic.id;
    if (!tax.tactics_.emplace(id, std::move(tactic)).second) {
      throw TaxonomyError("duplicate tactic id " + id, id);
    }
  }

  const auto& techniques =
      doc.contains("techniques") ? doc.at("techniques") : nlohmann::json::array();
  if (!techniques.is_array()) throw TaxonomyError("'techniques' must be an array", "");
  for (const auto& t : techniques) {
    Technique tech;
    tech.id = required<std::string>(t, "id", "technique");
    if (!valid_technique_id(tech.id)) {
      throw TaxonomyError("malformed technique id " + tech.id, tech.id);
    }
    tech.name = required<std::string>(t, "name", tech.id);
    tech.tactic_ids = required<std::vector<std::string>>(t, "tactics", tech.id);
    const auto impact = t.value("impact", std::string{"medium"});
    auto level = parse_level(impact);
    if (!level) throw TaxonomyError("invalid impact '" + impact + "' on " + tech.id, tech.id);
    tech.impact = *level;
    for (const auto& tactic_id : tech.tactic_ids) {
      if (!tax.tactics_.contains(tactic_id)) {
        throw TaxonomyError("technique " + tech.id + " references unknown tactic " + tactic_id,
                            tactic_id);
      }
    }
    auto id = tech.id;
    if (!tax.techniques_.emplace(id, std::move(tech)).second) {
      throw TaxonomyError("duplicate technique id " + id, id);
    }
  }
  return tax;
}

nlohmann::json Taxonomy::to_json() const {
  nlohmann::json doc;
  doc["version"] = version_;
  doc["tactics"] = nlohmann::json::array();
  for (const auto& [id, t] : tactics_) {
    doc["tactics"].push_back({{"id", t.id}, {"name", t.name}, {"ordinal", t.ordinal}});
  }
  doc["techniques"] = nlohmann::json::array();
  for (const auto& [id, t] : techniques_) {
    doc["techniques"].push_back({{"id", t.id},
                                 {"name", t.name},
                                 {"tactics", t.tactic_ids},
                                 {"impact", std::string(to_string(t.impact))}});
  }
  return doc;
}

const Technique* Taxonomy::lookup_technique(std::string_view id) const {
  auto it = techniques_.find(std::string(id));
  return it == techniques_.end() ? nullptr : &it->second;
}

const Tactic* Taxonomy::lookup_tactic(std::string_view id) const {
  auto it = tactics_.find(std::string(id));
  return it == tactics_.end() ? nullptr : &it->second;
}

std::string Taxonomy::parent_id(std::string_view technique_id) {
  return std::string(technique_id.substr(0, technique_id.find('.')));
}

Taxonomy load_taxonomy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TaxonomyError("cannot open taxonomy file " + path.string(), "");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw TaxonomyError("taxonomy parse failure in " + path.string() + ": " + e.what(), "");
  }
  return Taxonomy::from_json(doc);
}

}  // namespace edr::taxonomy
