#include "edr/respond.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <thread>

namespace edr::respond {

namespace {

constexpr std::array<std::string_view, 5> kKindNames{"block_ip", "isolate_asset", "disable_user",
                                                     "firewall_rule_update", "quarantine_file"};
constexpr std::array<std::string_view, 5> kStatusNames{"pending", "running", "succeeded", "failed",
                                                       "expired"};

std::optional<ActionStatus> parse_status(std::string_view text) {
  for (std::size_t i = 0; i < kStatusNames.size(); ++i) {
    if (kStatusNames[i] == text) return static_cast<ActionStatus>(i);
  }
  return std::nullopt;
}

std::optional<PolicyMode> parse_mode(std::string_view text) {
  if (text == "automatic") return PolicyMode::automatic;
  if (text == "approval_required") return PolicyMode::approval_required;
  return std::nullopt;
}

std::vector<std::string> targets_for(ActionKind kind, const Alert& alert) {
  const auto& ent = alert.entities;
  switch (kind) {
    case ActionKind::block_ip: return {ent.remote_ips.begin(), ent.remote_ips.end()};
    case ActionKind::firewall_rule_update:
      return {ent.remote_endpoints.begin(), ent.remote_endpoints.end()};
    case ActionKind::isolate_asset:
      return alert.agent_id.empty() ? std::vector<std::string>{}
                                    : std::vector<std::string>{alert.agent_id};
    case ActionKind::disable_user: return {ent.users.begin(), ent.users.end()};
    case ActionKind::quarantine_file: return {ent.files.begin(), ent.files.end()};
  }
  return {};
}

bool rule_matches(const PolicyRule& rule, const Alert& alert, const taxonomy::Taxonomy& tax) {
  if (rule.tier != alert.tier) return false;
  if (rule.match == "*") return true;
  if (taxonomy::valid_tactic_id(rule.match)) {
    for (const auto& t : alert.technique_ids) {
      const auto* tech = tax.lookup_technique(t);
      if (!tech) tech = tax.lookup_technique(taxonomy::Taxonomy::parent_id(t));
      if (tech && std::find(tech->tactic_ids.begin(), tech->tactic_ids.end(), rule.match) !=
                      tech->tactic_ids.end()) {
        return true;
      }
    }
    return false;
  }
  return alert.has_technique(rule.match);
}

std::string action_id(const std::string& alert_id, ActionKind kind, const std::string& target) {
  return alert_id + "/" + std::string(to_string(kind)) + "/" + target;
}

}  // namespace

std::string_view to_string(ActionKind k) noexcept { return kKindNames[static_cast<std::size_t>(k)]; }

std::optional<ActionKind> parse_action_kind(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (kKindNames[i] == text) return static_cast<ActionKind>(i);
  }
  return std::nullopt;
}

std::string_view to_string(ActionStatus s) noexcept {
  return kStatusNames[static_cast<std::size_t>(s)];
}

std::string_view to_string(PolicyMode m) noexcept {
  return m == PolicyMode::automatic ? "automatic" : "approval_required";
}

bool target_matches_kind(ActionKind kind, std::string_view target) {
  if (target.empty()) return false;
  switch (kind) {
    case ActionKind::block_ip: return events::is_ipv4_literal(target);
    case ActionKind::firewall_rule_update: {
      const auto ep = events::split_endpoint(target);
      return events::is_ipv4_literal(ep.host) &&
             (target.find(':') == std::string_view::npos || ep.port > 0);
    }
    case ActionKind::quarantine_file:
      return target.find('\\') != std::string_view::npos ||
             target.find('/') != std::string_view::npos;
    case ActionKind::isolate_asset:
    case ActionKind::disable_user: return true;
  }
  return false;
}

nlohmann::json to_json(const ResponseAction& a) {
  return {{"id", a.id},
          {"kind", std::string(to_string(a.kind))},
          {"target", a.target},
          {"alert_id", a.alert_id},
          {"requested_ts", format_rfc3339(a.requested_ts)},
          {"status", std::string(to_string(a.status))},
          {"mode", std::string(to_string(a.mode))}};
}

ResponseAction action_from_json(const nlohmann::json& obj) {
  ResponseAction a;
  a.id = obj.at("id").get<std::string>();
  auto kind = parse_action_kind(obj.at("kind").get<std::string>());
  if (!kind) throw Error("unknown action kind");
  a.kind = *kind;
  a.target = obj.at("target").get<std::string>();
  a.alert_id = obj.value("alert_id", std::string{});
  a.requested_ts = parse_rfc3339(obj.value("requested_ts", std::string{})).value_or(0);
  a.status = parse_status(obj.value("status", std::string{"pending"})).value_or(ActionStatus::pending);
  a.mode = parse_mode(obj.value("mode", std::string{"automatic"})).value_or(PolicyMode::automatic);
  return a;
}

nlohmann::json to_json(const ActionResult& r) {
  return {{"action_id", r.action_id},
          {"kind", std::string(to_string(r.kind))},
          {"success", r.success},
          {"duration_ms", r.duration_ms},
          {"detail", r.detail}};
}

ActionResult result_from_json(const nlohmann::json& obj) {
  ActionResult r;
  r.action_id = obj.at("action_id").get<std::string>();
  auto kind = parse_action_kind(obj.at("kind").get<std::string>());
  if (!kind) throw Error("unknown action kind");
  r.kind = *kind;
  r.success = obj.at("success").get<bool>();
  r.duration_ms = obj.value("duration_ms", 0.0);
  r.detail = obj.value("detail", std::string{});
  return r;
}

int PolicyRule::specificity() const noexcept {
  if (match == "*") return 0;
  if (taxonomy::valid_tactic_id(match)) return 1;
  return 2;
}

ResponsePolicy ResponsePolicy::from_json(const nlohmann::json& doc) {
  ResponsePolicy policy;
  const auto& rules = doc.is_array() ? doc : doc.at("rules");
  for (const auto& r : rules) {
    PolicyRule rule;
    const auto tier = r.at("tier").get<std::string>();
    auto level = parse_level(tier);
    if (!level) throw Error("policy rule has invalid tier '" + tier + "'");
    rule.tier = *level;
    rule.match = r.value("match", std::string{"*"});
    for (const auto& k : r.value("actions", std::vector<std::string>{})) {
      auto kind = parse_action_kind(k);
      if (!kind) throw Error("policy rule has unknown action '" + k + "'");
      rule.actions.push_back(*kind);
    }
    const auto mode = r.value("mode", std::string{"automatic"});
    auto parsed = parse_mode(mode);
    if (!parsed) throw Error("policy rule has invalid mode '" + mode + "'");
    rule.mode = *parsed;
    policy.rules.push_back(std::move(rule));
  }
  return policy;
}

nlohmann::json ResponsePolicy::to_json() const {
  auto rules_json = nlohmann::json::array();
  for (const auto& r : rules) {
    std::vector<std::string> kinds;
    for (auto k : r.actions) kinds.emplace_back(respond::to_string(k));
    rules_json.push_back({{"tier", std::string(edr::to_string(r.tier))},
                          {"match", r.match},
                          {"actions", kinds},
                          {"mode", std::string(respond::to_string(r.mode))}});
  }
  return {{"rules", rules_json}};
}

void ResponsePolicy::validate(const taxonomy::Taxonomy& tax) const {
  std::set<Level> tiers;
  for (const auto& r : rules) {
    tiers.insert(r.tier);
    if (r.match == "*") continue;
    if (taxonomy::valid_tactic_id(r.match)) {
      if (!tax.lookup_tactic(r.match)) throw Error("policy references unknown tactic " + r.match);
    } else if (!tax.lookup_technique(r.match)) {
      throw Error("policy references unknown technique " + r.match);
    }
  }
  for (auto level : {Level::low, Level::medium, Level::high, Level::critical}) {
    if (!tiers.contains(level)) {
      throw Error("policy has no rule for tier " + std::string(edr::to_string(level)));
    }
  }
}

ResponsePolicy ResponsePolicy::defaults() {
  using K = ActionKind;
  ResponsePolicy p;
  p.rules = {
      {Level::critical, "T1003", {K::disable_user, K::isolate_asset}, PolicyMode::automatic},
      {Level::critical, "*", {K::isolate_asset, K::disable_user}, PolicyMode::automatic},
      {Level::high, "*", {K::block_ip, K::quarantine_file}, PolicyMode::automatic},
      {Level::medium, "*", {K::firewall_rule_update}, PolicyMode::automatic},
      {Level::low, "*", {}, PolicyMode::automatic},
  };
  return p;
}

ResponsePolicy load_policy(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open policy file " + path.string());
  try {
    return ResponsePolicy::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("policy parse failure: ") + e.what());
  }
}

Selection select_actions(const Alert& alert, const ResponsePolicy& policy,
                         const taxonomy::Taxonomy& tax, TimestampMs now) {
  Selection sel;
  std::vector<const PolicyRule*> matching;
  for (const auto& r : policy.rules) {
    if (rule_matches(r, alert, tax)) matching.push_back(&r);
  }
  if (matching.empty()) return sel;
  sel.matched = true;
  std::stable_sort(matching.begin(), matching.end(), [](const PolicyRule* a, const PolicyRule* b) {
    return a->specificity() > b->specificity();
  });
  sel.mode = matching.front()->mode;
  std::set<std::pair<ActionKind, std::string>> seen;
  for (const auto* rule : matching) {
    for (auto kind : rule->actions) {
      for (auto& target : targets_for(kind, alert)) {
        if (!target_matches_kind(kind, target) || !seen.emplace(kind, target).second) continue;
        ResponseAction a;
        a.id = action_id(alert.id, kind, target);
        a.kind = kind;
        a.target = std::move(target);
        a.alert_id = alert.id;
        a.requested_ts = now;
        a.mode = sel.mode;
        a.status = ActionStatus::pending;
        sel.actions.push_back(std::move(a));
      }
    }
  }
  return sel;
}

bool WorldLedger::apply(ActionKind kind, const std::string& target) {
  switch (kind) {
    case ActionKind::block_ip: return blocked_ips.insert(target).second;
    case ActionKind::isolate_asset: return isolated_assets.insert(target).second;
    case ActionKind::disable_user: return disabled_users.insert(target).second;
    case ActionKind::firewall_rule_update: return firewall_rules.insert(target).second;
    case ActionKind::quarantine_file: return quarantined_files.insert(target).second;
  }
  return false;
}

bool WorldLedger::contains(ActionKind kind, const std::string& target) const {
  switch (kind) {
    case ActionKind::block_ip: return blocked_ips.contains(target);
    case ActionKind::isolate_asset: return isolated_assets.contains(target);
    case ActionKind::disable_user: return disabled_users.contains(target);
    case ActionKind::firewall_rule_update: return firewall_rules.contains(target);
    case ActionKind::quarantine_file: return quarantined_files.contains(target);
  }
  return false;
}

nlohmann::json WorldLedger::to_json() const {
  return {{"blocked_ips", blocked_ips},
          {"isolated_assets", isolated_assets},
          {"disabled_users", disabled_users},
          {"firewall_rules", firewall_rules},
          {"quarantined_files", quarantined_files}};
}

WorldLedger WorldLedger::from_json(const nlohmann::json& obj) {
  WorldLedger l;
  l.blocked_ips = obj.value("blocked_ips", std::set<std::string>{});
  l.isolated_assets = obj.value("isolated_assets", std::set<std::string>{});
  l.disabled_users = obj.value("disabled_users", std::set<std::string>{});
  l.firewall_rules = obj.value("firewall_rules", std::set<std::string>{});
  l.quarantined_files = obj.value("quarantined_files", std::set<std::string>{});
  return l;
}

SimulatedActuator::SimulatedActuator(Options options)
    : options_(std::move(options)), rng_(options_.seed) {
  if (options_.audit_log) {
    audit_.open(*options_.audit_log, std::ios::app);
    if (!audit_) throw Error("cannot open action audit log " + options_.audit_log->string());
  }
}

ActionResult SimulatedActuator::execute(const ResponseAction& action) {
  std::lock_guard lock(mu_);
  const auto started = std::chrono::steady_clock::now();
  ActionResult result;
  result.action_id = action.id;
  result.kind = action.kind;
  if (!target_matches_kind(action.kind, action.target)) {
    result.detail = "target '" + action.target + "' does not fit " + std::string(to_string(action.kind));
  } else if (options_.fault_rate > 0.0 && rng_.unit() < options_.fault_rate) {
    result.detail = "injected actuator fault";
  } else {
    const bool changed = ledger_.apply(action.kind, action.target);
    result.success = true;
    result.detail = changed ? "applied" : "already in effect (no-op)";
  }
  double extra = 0.0;
  if (auto it = options_.simulated_latency_ms.find(action.kind);
      it != options_.simulated_latency_ms.end()) {
    extra = it->second;
  }
  result.duration_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
          .count() +
      extra;
  if (audit_.is_open()) {
    audit_ << nlohmann::json{{"action", to_json(action)},
                             {"result", to_json(result)},
                             {"ts", format_rfc3339(wall_clock_ms())}}
                  .dump()
           << '\n';
    audit_.flush();
  }
  return result;
}

WorldLedger SimulatedActuator::snapshot() const {
  std::lock_guard lock(mu_);
  return ledger_;
}

void SimulatedActuator::restore(WorldLedger ledger) {
  std::lock_guard lock(mu_);
  ledger_ = std::move(ledger);
}

WorldLedger replay_audit_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open audit log " + path.string());
  WorldLedger ledger;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto rec = nlohmann::json::parse(line);
    if (!rec.at("result").at("success").get<bool>()) continue;
    const auto action = action_from_json(rec.at("action"));
    ledger.apply(action.kind, action.target);
  }
  return ledger;
}

std::map<ActionKind, KindMetrics> response_metrics(std::span<const ActionResult> results) {
  std::map<ActionKind, KindMetrics> out;
  std::map<ActionKind, double> duration_sum;
  for (const auto& r : results) {
    auto& m = out[r.kind];
    ++m.total;
    if (r.success) {
      ++m.succeeded;
      duration_sum[r.kind] += r.duration_ms;
    }
  }
  for (auto& [kind, m] : out) {
    m.success_rate = static_cast<double>(m.succeeded) / static_cast<double>(m.total);
    m.mean_duration_ms = m.succeeded ? duration_sum[kind] / static_cast<double>(m.succeeded) : 0.0;
  }
  return out;
}

ResponseOrchestrator::ResponseOrchestrator(ResponsePolicy policy,
                                           std::shared_ptr<const taxonomy::Taxonomy> tax,
                                           std::shared_ptr<Actuator> actuator)
    : policy_(std::move(policy)), tax_(std::move(tax)), actuator_(std::move(actuator)) {
  if (!tax_ || !actuator_) throw Error("orchestrator needs a taxonomy and an actuator");
}

void ResponseOrchestrator::set_policy(ResponsePolicy policy) {
  policy.validate(*tax_);
  std::lock_guard lock(mu_);
  policy_ = std::move(policy);
}

ActionResult ResponseOrchestrator::run(ResponseAction& action) {
  action.status = ActionStatus::running;
  auto result = actuator_->execute(action);
  action.status = result.success ? ActionStatus::succeeded : ActionStatus::failed;
  results_[action.alert_id].push_back(result);
  return result;
}

ResponseOrchestrator::Outcome ResponseOrchestrator::handle_alert(const Alert& alert,
                                                                 TimestampMs now) {
  std::lock_guard lock(mu_);
  Outcome out;
  auto sel = select_actions(alert, policy_, *tax_, now);
  out.policy_gap = !sel.matched;
  for (auto& a : sel.actions) {
    auto [it, inserted] = actions_.emplace(a.id, a);
    if (!inserted) continue;  // already handled for this alert
    auto& stored = it->second;
    if (stored.mode == PolicyMode::automatic) out.results.push_back(run(stored));
    out.actions.push_back(stored);
  }
  return out;
}

ResponseOrchestrator::Outcome ResponseOrchestrator::execute_explicit(
    const Alert& alert, std::span<const ActionKind> kinds, TimestampMs now) {
  std::lock_guard lock(mu_);
  Outcome out;
  for (auto kind : kinds) {
    for (auto& target : targets_for(kind, alert)) {
      ResponseAction a;
      a.id = action_id(alert.id, kind, target);
      a.kind = kind;
      a.target = target;
      a.alert_id = alert.id;
      a.requested_ts = now;
      auto& stored = actions_[a.id];
      stored = a;
      out.results.push_back(run(stored));
      out.actions.push_back(stored);
    }
  }
  return out;
}

ActionResult ResponseOrchestrator::approve(const std::string& id, TimestampMs now) {
  std::lock_guard lock(mu_);
  auto it = actions_.find(id);
  ActionResult failed;
  failed.action_id = id;
  if (it == actions_.end()) {
    failed.detail = "unknown action";
    return failed;
  }
  auto& a = it->second;
  failed.kind = a.kind;
  if (a.status == ActionStatus::succeeded) {
    // Re-approval of an executed action re-applies it, which is a ledger no-op.
    return run(a);
  }
  if (a.status != ActionStatus::pending && a.status != ActionStatus::failed) {
    failed.detail = "action is " + std::string(to_string(a.status));
    return failed;
  }
  if (now - a.requested_ts > kApprovalTtlMs) {
    a.status = ActionStatus::expired;
    failed.detail = "approval window expired";
    return failed;
  }
  return run(a);
}

std::size_t ResponseOrchestrator::expire(TimestampMs now) {
  std::lock_guard lock(mu_);
  std::size_t n = 0;
  for (auto& [id, a] : actions_) {
    if (a.status == ActionStatus::pending && now - a.requested_ts > kApprovalTtlMs) {
      a.status = ActionStatus::expired;
      ++n;
    }
  }
  return n;
}

std::vector<ResponseAction> ResponseOrchestrator::actions_for(const std::string& alert_id) const {
  std::lock_guard lock(mu_);
  std::vector<ResponseAction> out;
  for (const auto& [id, a] : actions_) {
    if (a.alert_id == alert_id) out.push_back(a);
  }
  return out;
}

std::vector<ActionResult> ResponseOrchestrator::results_for(const std::string& alert_id) const {
  std::lock_guard lock(mu_);
  auto it = results_.find(alert_id);
  return it == results_.end() ? std::vector<ActionResult>{} : it->second;
}

std::vector<ActionResult> ResponseOrchestrator::all_results() const {
  std::lock_guard lock(mu_);
  std::vector<ActionResult> out;
  for (const auto& [alert, rs] : results_) out.insert(out.end(), rs.begin(), rs.end());
  return out;
}

nlohmann::json ResponseOrchestrator::to_json() const {
  std::lock_guard lock(mu_);
  auto actions = nlohmann::json::array();
  for (const auto& [id, a] : actions_) actions.push_back(respond::to_json(a));
  auto results = nlohmann::json::object();
  for (const auto& [alert, rs] : results_) {
    auto arr = nlohmann::json::array();
    for (const auto& r : rs) arr.push_back(respond::to_json(r));
    results[alert] = std::move(arr);
  }
  return {{"actions", actions}, {"results", results}, {"ledger", actuator_->snapshot().to_json()}};
}

void ResponseOrchestrator::restore(const nlohmann::json& state) {
  std::lock_guard lock(mu_);
  actions_.clear();
  results_.clear();
  for (const auto& a : state.value("actions", nlohmann::json::array())) {
    auto action = action_from_json(a);
    actions_[action.id] = action;
  }
  const auto results = state.value("results", nlohmann::json::object());
  for (const auto& [alert, rs] : results.items()) {
    for (const auto& r : rs) results_[alert].push_back(result_from_json(r));
  }
  if (auto* sim = dynamic_cast<SimulatedActuator*>(actuator_.get()); sim && state.contains("ledger")) {
    sim->restore(WorldLedger::from_json(state.at("ledger")));
  }
}

}  // namespace edr::respond
