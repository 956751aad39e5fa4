#include "edr/detect.hpp"

#include <algorithm>
#include <array>
#include <deque>
#include <fstream>
#include <map>

namespace edr::detect {

using events::Category;
using events::SystemEvent;

namespace {

constexpr std::array<std::string_view, 4> kEngineNames{"anomaly", "signature", "correlation",
                                                       "classifier"};

Level level_field(const nlohmann::json& obj, const std::string& owner) {
  const auto text = obj.value("severity", std::string{"medium"});
  auto level = parse_level(text);
  if (!level) throw Error("rule " + owner + " has invalid severity '" + text + "'");
  return *level;
}

std::string technique_field(const nlohmann::json& obj, const std::string& owner,
                            const taxonomy::Taxonomy& tax) {
  const auto id = obj.value("technique", std::string{});
  if (!tax.lookup_technique(id)) {
    throw Error("rule " + owner + " references technique '" + id + "' missing from taxonomy");
  }
  return id;
}

bool is_encrypted_name(std::string_view object) {
  static constexpr std::array<std::string_view, 6> kExt{".locked", ".encrypted", ".enc",
                                                        ".crypt",  ".crypted",   ".crypto"};
  return std::any_of(kExt.begin(), kExt.end(), [&](auto ext) { return iends_with(object, ext); });
}

}  // namespace

std::string_view to_string(Engine e) noexcept { return kEngineNames[static_cast<std::size_t>(e)]; }

std::optional<Engine> parse_engine(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kEngineNames.size(); ++i) {
    if (kEngineNames[i] == text) return static_cast<Engine>(i);
  }
  return std::nullopt;
}

nlohmann::json to_json(const Detection& d) {
  return {{"engine", std::string(to_string(d.engine))},
          {"score", d.score},
          {"technique_ids", d.technique_ids},
          {"evidence", d.evidence},
          {"ts", format_rfc3339(d.ts)},
          {"agent_id", d.agent_id},
          {"rule_id", d.rule_id},
          {"severity", std::string(edr::to_string(d.severity))}};
}

Detection detection_from_json(const nlohmann::json& obj) {
  Detection d;
  const auto engine = parse_engine(obj.at("engine").get<std::string>());
  if (!engine) throw Error("invalid detection engine");
  d.engine = *engine;
  d.score = obj.at("score").get<double>();
  d.technique_ids = obj.value("technique_ids", std::vector<std::string>{});
  d.evidence = obj.at("evidence").get<std::vector<std::string>>();
  auto ts = parse_rfc3339(obj.at("ts").get<std::string>());
  if (!ts) throw Error("invalid detection timestamp");
  d.ts = *ts;
  d.agent_id = obj.value("agent_id", std::string{});
  d.rule_id = obj.value("rule_id", std::string{});
  d.severity = parse_level(obj.value("severity", std::string{"medium"})).value_or(Level::medium);
  if (!(d.score >= 0.0 && d.score <= 1.0)) throw Error("detection score outside [0, 1]");
  if (d.evidence.empty()) throw Error("detection without evidence");
  return d;
}

RuleSet rules_from_json(const nlohmann::json& doc, const taxonomy::Taxonomy& tax) {
  RuleSet set;
  try {
    for (const auto& r : doc.value("signatures", nlohmann::json::array())) {
      SignatureRule rule;
      rule.id = r.at("id").get<std::string>();
      rule.name = r.value("name", rule.id);
      rule.match = conjunction_from_json(r.at("match"));
      if (rule.match.empty()) throw Error("signature " + rule.id + " has no predicates");
      rule.technique_id = technique_field(r, rule.id, tax);
      rule.severity = level_field(r, rule.id);
      set.signatures.push_back(std::move(rule));
    }
    for (const auto& r : doc.value("correlations", nlohmann::json::array())) {
      CorrelationRule rule;
      rule.id = r.at("id").get<std::string>();
      rule.name = r.value("name", rule.id);
      for (const auto& step : r.at("steps")) {
        rule.steps.push_back(conjunction_from_json(step.is_object() ? step.at("match") : step));
      }
      if (rule.steps.size() < 2) throw Error("correlation " + rule.id + " needs >= 2 steps");
      if (rule.steps.size() > 64) throw Error("correlation " + rule.id + " has too many steps");
      const double within = r.at("within_sec").get<double>();
      if (!(within > 0)) throw Error("correlation " + rule.id + " needs within_sec > 0");
      rule.within_ms = static_cast<TimestampMs>(within * 1000.0);
      rule.technique_id = technique_field(r, rule.id, tax);
      rule.severity = level_field(r, rule.id);
      rule.same = r.value("same", std::vector<std::string>{});
      for (const auto& f : rule.same) {
        if (!events::known_field(f)) throw Error("correlation " + rule.id + " binds unknown field " + f);
      }
      set.correlations.push_back(std::move(rule));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed rules document: ") + e.what());
  }
  return set;
}

RuleSet load_rules(const std::filesystem::path& path, const taxonomy::Taxonomy& tax) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open rules file " + path.string());
  try {
    return rules_from_json(nlohmann::json::parse(in), tax);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("rules parse failure: ") + e.what());
  }
}

std::vector<Detection> match_signatures(const SystemEvent& e, std::span<const SignatureRule> rules) {
  std::vector<Detection> out;
  for (const auto& rule : rules) {
    if (!matches_all(rule.match, e)) continue;
    Detection d;
    d.engine = Engine::signature;
    d.score = 1.0;
    d.technique_ids = {rule.technique_id};
    d.evidence = {e.id};
    d.ts = e.ts;
    d.agent_id = e.agent_id;
    d.rule_id = rule.id;
    d.severity = rule.severity;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Detection> CorrelationMatcher::match(const ingest::WindowStats& stats,
                                                 std::span<const CorrelationRule> rules) {
  std::vector<Detection> out;
  const auto& ring = stats.ring();
  if (ring.empty() || rules.empty()) return out;
  const TimestampMs front_ts = ring.front().ts;

  if (cache_.size() > 2 * ring.size() + 64) {
    std::erase_if(cache_, [&](const auto& kv) { return kv.second.ts < front_ts; });
  }
  std::vector<const std::vector<std::uint64_t>*> masks(ring.size());
  for (std::size_t i = 0; i < ring.size(); ++i) {
    auto& entry = cache_[ring[i].id];
    if (entry.masks.size() != rules.size()) {
      entry.ts = ring[i].ts;
      entry.masks.assign(rules.size(), 0);
      for (std::size_t r = 0; r < rules.size(); ++r) {
        for (std::size_t s = 0; s < rules[r].steps.size(); ++s) {
          if (matches_all(rules[r].steps[s], ring[i])) entry.masks[r] |= std::uint64_t{1} << s;
        }
      }
    }
    masks[i] = &entry.masks;
  }

  for (std::size_t r = 0; r < rules.size(); ++r) {
    const auto& rule = rules[r];
    auto& state = rules_[rule.id];
    if (!state.consumed.empty()) {
      std::erase_if(state.consumed, [&](const auto& kv) { return kv.second < front_ts; });
    }
    auto used = [&](std::size_t i) { return state.consumed.contains(ring[i].id); };
    auto bound_ok = [&](std::size_t i, std::size_t start) {
      for (const auto& f : rule.same) {
        if (events::field_value(ring[i], f) != events::field_value(ring[start], f)) return false;
      }
      return true;
    };

    for (std::size_t start = 0; start < ring.size(); ++start) {
      if (!((*masks[start])[r] & 1) || used(start)) continue;
      const TimestampMs limit = ring[start].ts + rule.within_ms;
      std::vector<std::size_t> picked{start};
      std::size_t pos = start;
      for (std::size_t s = 1; s < rule.steps.size(); ++s) {
        std::size_t j = pos + 1;
        for (; j < ring.size() && ring[j].ts <= limit; ++j) {
          if (((*masks[j])[r] >> s & 1) && !used(j) && bound_ok(j, start)) break;
        }
        if (j >= ring.size() || ring[j].ts > limit) break;
        picked.push_back(j);
        pos = j;
      }
      if (picked.size() != rule.steps.size()) continue;
      Detection d;
      d.engine = Engine::correlation;
      d.score = 1.0;
      d.technique_ids = {rule.technique_id};
      for (auto i : picked) {
        d.evidence.push_back(ring[i].id);
        state.consumed.emplace(ring[i].id, ring[i].ts);
      }
      d.ts = ring[picked.back()].ts;
      d.agent_id = ring[start].agent_id;
      d.rule_id = rule.id;
      d.severity = rule.severity;
      out.push_back(std::move(d));
    }
  }
  return out;
}

nlohmann::json CorrelationMatcher::to_json() const {
  auto out = nlohmann::json::object();
  for (const auto& [rule, state] : rules_) out[rule] = state.consumed;
  return out;
}

void CorrelationMatcher::restore(const nlohmann::json& obj) {
  rules_.clear();
  cache_.clear();
  for (const auto& [rule, consumed] : obj.items()) {
    rules_[rule].consumed = consumed.get<std::unordered_map<std::string, TimestampMs>>();
  }
}

std::vector<Detection> RuleBasedClassifier::classify(const ingest::WindowStats& window) const {
  std::vector<Detection> out;
  const auto& ring = window.ring();
  if (ring.empty()) return out;
  const SystemEvent& newest = ring.back();
  auto detection = [&](std::string technique, double score, Level severity,
                       std::vector<std::string> evidence, std::string rule) {
    Detection d;
    d.engine = Engine::classifier;
    d.score = score;
    d.technique_ids = {std::move(technique)};
    d.evidence = std::move(evidence);
    d.ts = newest.ts;
    d.agent_id = newest.agent_id;
    d.rule_id = std::move(rule);
    d.severity = severity;
    out.push_back(std::move(d));
  };

  if (newest.category == Category::user && newest.action == "logon") {
    const auto account = newest.object.substr(0, newest.object.find('@'));
    std::vector<std::string> evidence;
    for (std::size_t i = 0; i + 1 < ring.size(); ++i) {
      const auto& e = ring[i];
      if (e.category == Category::user && e.action == "logon_failed" &&
          iequals(e.object.substr(0, e.object.find('@')), account)) {
        evidence.push_back(e.id);
      }
    }
    if (evidence.size() >= thresholds_.failed_logons) {
      evidence.push_back(newest.id);
      detection("T1110", 0.9, Level::high, std::move(evidence), "stub-brute-force");
    }
  }

  if (newest.category == Category::file && newest.action == "rename" &&
      is_encrypted_name(newest.object)) {
    std::vector<std::string> evidence;
    for (const auto& e : ring) {
      if (e.category == Category::file && e.action == "rename" && is_encrypted_name(e.object)) {
        evidence.push_back(e.id);
      }
    }
    if (evidence.size() == thresholds_.encrypted_renames) {
      detection("T1486", 0.8, Level::critical, std::move(evidence), "stub-mass-encryption");
    }
  }

  if (newest.category == Category::registry && newest.action == "set_value" &&
      icontains(newest.object, "\\currentversion\\run") && !newest.subject.is_signed) {
    detection("T1547.001", 0.7, Level::high, {newest.id}, "stub-unsigned-autorun");
  }
  return out;
}

std::vector<std::string> RuleBasedClassifier::tag_features(const events::FeatureVector& fv) const {
  using events::Feature;
  std::vector<std::string> tags;
  if (fv[Feature::failed_logon_count] >= 0.2) tags.emplace_back("T1110");
  if (fv[Feature::file_sensitive_path_touches] > 0.0) tags.emplace_back("T1003");
  if (fv[Feature::file_high_entropy_writes] >= 0.1) tags.emplace_back("T1486");
  if (fv[Feature::net_beacon_regularity] >= 0.9 && fv[Feature::net_rare_port_count] > 0.0) {
    tags.emplace_back("T1071");
  }
  if (fv[Feature::reg_run_key_writes] > 0.0) tags.emplace_back("T1547.001");
  return tags;
}

ClassifierOutcome ClassifierStage::run(const ingest::WindowStats& window) const {
  ClassifierOutcome outcome;
  if (!enabled()) return outcome;
  const auto started = std::chrono::steady_clock::now();
  try {
    outcome.detections = impl_->classify(window);
  } catch (const std::exception& e) {
    outcome.detections.clear();
    outcome.degraded = true;
    outcome.error = e.what();
    return outcome;
  } catch (...) {
    outcome.detections.clear();
    outcome.degraded = true;
    outcome.error = "unknown classifier failure";
    return outcome;
  }
  if (std::chrono::steady_clock::now() - started > budget_) {
    outcome.detections.clear();
    outcome.degraded = true;
    outcome.error = "classifier exceeded latency budget";
  }
  for (auto& d : outcome.detections) d.score = std::clamp(d.score, 0.0, 1.0);
  return outcome;
}

std::vector<std::string> ClassifierStage::tags(const events::FeatureVector& fv) const {
  if (!enabled()) return {};
  try {
    return impl_->tag_features(fv);
  } catch (...) {
    return {};
  }
}

double AnomalyDetector::score(const events::FeatureVector& fv) const {
  if (!ready()) throw Error("no anomaly model loaded");
  return forest_->score(fv.values);
}

std::vector<std::vector<double>> window_feature_rows(std::span<const SystemEvent> stream,
                                                     TimestampMs window_ms,
                                                     const events::FeatureConfig& cfg,
                                                     std::size_t stride) {
  std::map<std::string, std::vector<SystemEvent>> by_agent;
  for (const auto& e : stream) by_agent[e.agent_id].push_back(e);
  std::vector<std::vector<double>> rows;
  stride = std::max<std::size_t>(stride, 1);
  for (auto& [agent, evs] : by_agent) {
    events::sort_events(evs);
    std::size_t begin = 0;
    for (std::size_t i = 0; i < evs.size(); ++i) {
      while (evs[begin].ts < evs[i].ts - window_ms) ++begin;
      if (i % stride != 0 || evs[i].ts - evs.front().ts < window_ms) continue;
      auto fv = events::extract_features(
          std::span<const SystemEvent>(evs.data() + begin, i - begin + 1), window_ms, cfg);
      rows.emplace_back(fv.values.begin(), fv.values.end());
    }
  }
  return rows;
}

}  // namespace edr::detect
