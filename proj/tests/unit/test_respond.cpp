#include <gtest/gtest.h>

#include <fstream>

#include "edr/respond.hpp"
#include "test_util.hpp"

using namespace edr;
using namespace edr::respond;
using testutil::kT0;

namespace {

Alert sample_alert(Level tier, std::vector<std::string> techniques, std::string id = "ALR-a-1") {
  Alert a;
  a.id = std::move(id);
  a.agent_id = "agent-001";
  a.tier = tier;
  a.technique_ids = std::move(techniques);
  a.entities.users = {"alice"};
  a.entities.remote_ips = {"203.0.113.7"};
  a.entities.remote_endpoints = {"203.0.113.7:4444"};
  a.entities.files = {"C:\\Temp\\o.dmp"};
  return a;
}

std::set<std::pair<ActionKind, std::string>> kinds_targets(const std::vector<ResponseAction>& v) {
  std::set<std::pair<ActionKind, std::string>> out;
  for (const auto& a : v) out.emplace(a.kind, a.target);
  return out;
}

}  // namespace

TEST(Policy, DefaultsValidateAndRoundTrip) {
  const auto p = ResponsePolicy::defaults();
  EXPECT_NO_THROW(p.validate(testutil::bundled_taxonomy()));
  const auto q = ResponsePolicy::from_json(p.to_json());
  EXPECT_EQ(q.to_json(), p.to_json());
  for (const auto& r : p.rules) EXPECT_EQ(r.mode, PolicyMode::automatic);
  const auto file = load_policy(testutil::data_path("policy.json"));
  EXPECT_NO_THROW(file.validate(testutil::bundled_taxonomy()));
}

TEST(Policy, ValidationRejectsGapsAndUnknownIds) {
  auto p = ResponsePolicy::defaults();
  p.rules.pop_back();  // no low-tier rule
  EXPECT_THROW(p.validate(testutil::bundled_taxonomy()), Error);
  p = ResponsePolicy::defaults();
  p.rules.push_back({Level::high, "T9999", {ActionKind::block_ip}, PolicyMode::automatic});
  EXPECT_THROW(p.validate(testutil::bundled_taxonomy()), Error);
  p.rules.back().match = "TA0099";
  EXPECT_THROW(p.validate(testutil::bundled_taxonomy()), Error);
  EXPECT_THROW(ResponsePolicy::from_json(nlohmann::json::parse(R"([{"tier":"urgent"}])")), Error);
  EXPECT_THROW(ResponsePolicy::from_json(nlohmann::json::parse(R"([{"tier":"low","actions":["nuke"]}])")), Error);
  EXPECT_THROW(ResponsePolicy::from_json(nlohmann::json::parse(R"([{"tier":"low","mode":"maybe"}])")), Error);
}

TEST(Policy, SpecificityOrder) {
  EXPECT_EQ((PolicyRule{Level::low, "*", {}, PolicyMode::automatic}.specificity()), 0);
  EXPECT_EQ((PolicyRule{Level::low, "TA0006", {}, PolicyMode::automatic}.specificity()), 1);
  EXPECT_EQ((PolicyRule{Level::low, "T1003", {}, PolicyMode::automatic}.specificity()), 2);
}

TEST(Select, DefaultPolicyPerTier) {
  const auto& tax = testutil::bundled_taxonomy();
  const auto p = ResponsePolicy::defaults();
  using K = ActionKind;
  auto crit = select_actions(sample_alert(Level::critical, {"T1003"}), p, tax, kT0);
  EXPECT_TRUE(crit.matched);
  EXPECT_EQ(kinds_targets(crit.actions),
            (std::set<std::pair<K, std::string>>{{K::disable_user, "alice"}, {K::isolate_asset, "agent-001"}}));
  // Most specific rule comes first.
  EXPECT_EQ(crit.actions.front().kind, K::disable_user);
  for (const auto& a : crit.actions) {
    EXPECT_EQ(a.status, ActionStatus::pending);
    EXPECT_EQ(a.requested_ts, kT0);
    EXPECT_EQ(a.alert_id, "ALR-a-1");
  }
  auto high = select_actions(sample_alert(Level::high, {"T1486"}), p, tax, kT0);
  EXPECT_EQ(kinds_targets(high.actions),
            (std::set<std::pair<K, std::string>>{{K::block_ip, "203.0.113.7"}, {K::quarantine_file, "C:\\Temp\\o.dmp"}}));
  auto med = select_actions(sample_alert(Level::medium, {"T1071"}), p, tax, kT0);
  EXPECT_EQ(kinds_targets(med.actions),
            (std::set<std::pair<K, std::string>>{{K::firewall_rule_update, "203.0.113.7:4444"}}));
  auto low = select_actions(sample_alert(Level::low, {"T1071"}), p, tax, kT0);
  EXPECT_TRUE(low.matched);
  EXPECT_TRUE(low.actions.empty());
}

TEST(Select, PolicyGapAndMostSpecificMode) {
  const auto& tax = testutil::bundled_taxonomy();
  ResponsePolicy p;
  p.rules = {{Level::high, "*", {ActionKind::block_ip}, PolicyMode::automatic},
             {Level::high, "TA0006", {ActionKind::disable_user}, PolicyMode::approval_required}};
  auto s = select_actions(sample_alert(Level::high, {"T1003.001"}), p, tax, kT0);
  EXPECT_EQ(s.mode, PolicyMode::approval_required);
  EXPECT_EQ(s.actions.size(), 2u);
  for (const auto& a : s.actions) EXPECT_EQ(a.mode, PolicyMode::approval_required);
  auto other = select_actions(sample_alert(Level::high, {"T1486"}), p, tax, kT0);
  EXPECT_EQ(other.mode, PolicyMode::automatic);
  EXPECT_EQ(other.actions.size(), 1u);
  auto gap = select_actions(sample_alert(Level::critical, {"T1486"}), p, tax, kT0);
  EXPECT_FALSE(gap.matched);
  EXPECT_TRUE(gap.actions.empty());
}

TEST(Select, DeduplicatesByKindAndTarget) {
  const auto& tax = testutil::bundled_taxonomy();
  ResponsePolicy p;
  p.rules = {{Level::high, "T1003", {ActionKind::block_ip, ActionKind::block_ip}, PolicyMode::automatic},
             {Level::high, "*", {ActionKind::block_ip}, PolicyMode::automatic}};
  auto a = sample_alert(Level::high, {"T1003"});
  a.entities.remote_ips.insert("198.51.100.2");
  auto s = select_actions(a, p, tax, kT0);
  EXPECT_EQ(s.actions.size(), 2u);
}

TEST(Targets, KindShapes) {
  EXPECT_TRUE(target_matches_kind(ActionKind::block_ip, "203.0.113.7"));
  EXPECT_FALSE(target_matches_kind(ActionKind::block_ip, "evil.example"));
  EXPECT_TRUE(target_matches_kind(ActionKind::firewall_rule_update, "203.0.113.7:4444"));
  EXPECT_TRUE(target_matches_kind(ActionKind::firewall_rule_update, "203.0.113.7"));
  EXPECT_FALSE(target_matches_kind(ActionKind::firewall_rule_update, "203.0.113.7:x"));
  EXPECT_TRUE(target_matches_kind(ActionKind::quarantine_file, "C:\\a.exe"));
  EXPECT_TRUE(target_matches_kind(ActionKind::quarantine_file, "/tmp/a"));
  EXPECT_FALSE(target_matches_kind(ActionKind::quarantine_file, "a.exe"));
  EXPECT_TRUE(target_matches_kind(ActionKind::disable_user, "bob"));
  EXPECT_FALSE(target_matches_kind(ActionKind::isolate_asset, ""));
}

TEST(Ledger, ApplyIsIdempotent) {
  WorldLedger l;
  EXPECT_TRUE(l.apply(ActionKind::block_ip, "1.2.3.4"));
  EXPECT_FALSE(l.apply(ActionKind::block_ip, "1.2.3.4"));
  EXPECT_TRUE(l.contains(ActionKind::block_ip, "1.2.3.4"));
  EXPECT_FALSE(l.contains(ActionKind::isolate_asset, "1.2.3.4"));
  l.apply(ActionKind::quarantine_file, "C:\\x");
  EXPECT_EQ(WorldLedger::from_json(l.to_json()), l);
}

TEST(Actuator, FaultsRejectionsAndAuditReplay) {
  testutil::TempDir dir;
  SimulatedActuator::Options o;
  o.fault_rate = 0.3;
  o.seed = 9;
  o.audit_log = dir.path() / "audit.jsonl";
  o.simulated_latency_ms[ActionKind::isolate_asset] = 250.0;
  SimulatedActuator act(o);
  std::size_t ok = 0;
  for (int i = 0; i < 200; ++i) {
    ResponseAction a;
    a.id = "a" + std::to_string(i);
    a.kind = i % 2 ? ActionKind::block_ip : ActionKind::isolate_asset;
    a.target = i % 2 ? "203.0.113." + std::to_string(i % 250) : "host-" + std::to_string(i);
    const auto r = act.execute(a);
    ok += r.success;
    if (a.kind == ActionKind::isolate_asset) {
      EXPECT_GE(r.duration_ms, 250.0);
    }
    if (r.success) {
      EXPECT_TRUE(act.snapshot().contains(a.kind, a.target));
    }
  }
  EXPECT_GT(ok, 100u);
  EXPECT_LT(ok, 180u);
  ResponseAction bad;
  bad.id = "bad";
  bad.kind = ActionKind::block_ip;
  bad.target = "not-an-ip";
  EXPECT_FALSE(act.execute(bad).success);
  EXPECT_EQ(replay_audit_log(*o.audit_log), act.snapshot());
}

TEST(Metrics, PerKindRates) {
  std::vector<ActionResult> rs{{"1", ActionKind::block_ip, true, 10.0, ""},
                               {"2", ActionKind::block_ip, false, 99.0, ""},
                               {"3", ActionKind::block_ip, true, 20.0, ""},
                               {"4", ActionKind::disable_user, false, 5.0, ""}};
  const auto m = response_metrics(rs);
  EXPECT_EQ(m.at(ActionKind::block_ip).total, 3u);
  EXPECT_DOUBLE_EQ(m.at(ActionKind::block_ip).success_rate, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(m.at(ActionKind::block_ip).mean_duration_ms, 15.0);
  EXPECT_DOUBLE_EQ(m.at(ActionKind::disable_user).success_rate, 0.0);
  EXPECT_DOUBLE_EQ(m.at(ActionKind::disable_user).mean_duration_ms, 0.0);
  EXPECT_FALSE(m.contains(ActionKind::quarantine_file));
}

TEST(Orchestrator, AutomaticActionsRunOnce) {
  auto act = std::make_shared<SimulatedActuator>();
  ResponseOrchestrator orch(ResponsePolicy::defaults(), testutil::shared_taxonomy(), act);
  const auto alert = sample_alert(Level::critical, {"T1003"});
  auto out = orch.handle_alert(alert, kT0);
  EXPECT_FALSE(out.policy_gap);
  ASSERT_EQ(out.results.size(), 2u);
  for (const auto& r : out.results) EXPECT_TRUE(r.success);
  EXPECT_TRUE(orch.ledger().contains(ActionKind::isolate_asset, "agent-001"));
  EXPECT_TRUE(orch.ledger().contains(ActionKind::disable_user, "alice"));
  auto again = orch.handle_alert(alert, kT0 + 10);
  EXPECT_TRUE(again.actions.empty());
  EXPECT_EQ(orch.results_for(alert.id).size(), 2u);
  for (const auto& a : orch.actions_for(alert.id)) EXPECT_EQ(a.status, ActionStatus::succeeded);
}

TEST(Orchestrator, ApprovalQueueAndExpiry) {
  ResponsePolicy p = ResponsePolicy::defaults();
  for (auto& r : p.rules) r.mode = PolicyMode::approval_required;
  auto act = std::make_shared<SimulatedActuator>();
  ResponseOrchestrator orch(p, testutil::shared_taxonomy(), act);
  auto out = orch.handle_alert(sample_alert(Level::high, {"T1486"}), kT0);
  ASSERT_EQ(out.actions.size(), 2u);
  EXPECT_TRUE(out.results.empty());
  EXPECT_TRUE(orch.ledger().blocked_ips.empty());
  const auto& first = out.actions[0];
  const auto r = orch.approve(first.id, kT0 + 1000);
  EXPECT_TRUE(r.success);
  EXPECT_TRUE(orch.ledger().contains(first.kind, first.target));
  const auto late = orch.approve(out.actions[1].id, kT0 + ResponseOrchestrator::kApprovalTtlMs + 1);
  EXPECT_FALSE(late.success);
  EXPECT_EQ(late.detail, "approval window expired");
  EXPECT_FALSE(orch.approve("nope", kT0).success);
  out = orch.handle_alert(sample_alert(Level::high, {"T1486"}, "ALR-a-2"), kT0);
  EXPECT_EQ(orch.expire(kT0 + ResponseOrchestrator::kApprovalTtlMs), 0u);
  EXPECT_EQ(orch.expire(kT0 + ResponseOrchestrator::kApprovalTtlMs + 1), 2u);
}

TEST(Orchestrator, ExplicitAndStateRoundTrip) {
  auto act = std::make_shared<SimulatedActuator>();
  ResponseOrchestrator orch(ResponsePolicy::defaults(), testutil::shared_taxonomy(), act);
  const std::vector<ActionKind> kinds{ActionKind::block_ip, ActionKind::quarantine_file};
  auto out = orch.execute_explicit(sample_alert(Level::low, {}), kinds, kT0);
  EXPECT_EQ(out.results.size(), 2u);
  EXPECT_TRUE(orch.ledger().contains(ActionKind::block_ip, "203.0.113.7"));
  auto act2 = std::make_shared<SimulatedActuator>();
  ResponseOrchestrator copy(ResponsePolicy::defaults(), testutil::shared_taxonomy(), act2);
  copy.restore(orch.to_json());
  EXPECT_EQ(copy.to_json(), orch.to_json());
  EXPECT_EQ(copy.ledger(), orch.ledger());
  auto bad = ResponsePolicy::defaults();
  bad.rules.pop_back();
  EXPECT_THROW(orch.set_policy(bad), Error);
}
