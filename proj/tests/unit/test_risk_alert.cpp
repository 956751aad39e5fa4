#include <gtest/gtest.h>

#include "edr/alert.hpp"
#include "edr/risk.hpp"
#include "edr/rng.hpp"
#include "test_util.hpp"

using namespace edr;
using risk::RiskFactors;
using risk::RiskWeights;

namespace {

RiskFactors random_factors(Rng& rng) {
  return {rng.unit(), rng.unit(), rng.unit(), rng.unit(), rng.unit()};
}

/// Random weights summing to 1: normalized exponential draws.
RiskWeights random_weights(Rng& rng) {
  double w[5], s = 0;
  for (double& x : w) s += (x = -std::log(rng.open_unit()));
  RiskWeights out{w[0] / s, w[1] / s, w[2] / s, w[3] / s, 0};
  out.user_risk = 1.0 - out.anomaly - out.frequency - out.severity - out.asset_criticality;
  return out;
}

}  // namespace

TEST(Risk, DefaultWeights) {
  const RiskWeights w;
  EXPECT_DOUBLE_EQ(w.anomaly, 0.30);
  EXPECT_DOUBLE_EQ(w.frequency, 0.20);
  EXPECT_DOUBLE_EQ(w.severity, 0.25);
  EXPECT_DOUBLE_EQ(w.asset_criticality, 0.15);
  EXPECT_DOUBLE_EQ(w.user_risk, 0.10);
  EXPECT_NO_THROW(w.validate());
}

TEST(Risk, MatchesIndependentArithmetic) {
  Rng rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const auto f = random_factors(rng);
    const RiskWeights dw;
    const double expected = 0.30 * f.anomaly_score + 0.20 * f.frequency_score + 0.25 * f.severity_score +
                            0.15 * f.asset_criticality + 0.10 * f.user_risk;
    EXPECT_NEAR(risk::compute_risk(f), expected, 1e-12);
    const auto w = random_weights(rng);
    // Reverse summation order as the oracle.
    const double e2 = w.user_risk * f.user_risk + w.asset_criticality * f.asset_criticality +
                      w.severity * f.severity_score + w.frequency * f.frequency_score +
                      w.anomaly * f.anomaly_score;
    const double got = risk::compute_risk(f, w);
    EXPECT_NEAR(got, e2, 1e-12);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(Risk, MonotoneInEachFactor) {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    auto f = random_factors(rng);
    const double base = risk::compute_risk(f);
    auto g = f;
    g.severity_score = std::min(1.0, f.severity_score + 0.1);
    EXPECT_GE(risk::compute_risk(g), base);
    g = f;
    g.anomaly_score = std::min(1.0, f.anomaly_score + 0.1);
    EXPECT_GE(risk::compute_risk(g), base);
  }
}

TEST(Risk, WeightInvariantsRejected) {
  const RiskFactors f{0.5, 0.5, 0.5, 0.5, 0.5};
  RiskWeights w{0.3, 0.2, 0.25, 0.15, 0.0};  // sums to 0.9
  try {
    risk::compute_risk(f, w);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("sum to 1"), std::string::npos);
  }
  EXPECT_THROW(risk::compute_risk(f, RiskWeights{0.3, 0.2, 0.25, 0.15, 0.2}), Error);
  EXPECT_THROW(risk::compute_risk(f, RiskWeights{1.2, -0.2, 0.0, 0.0, 0.0}), Error);
  EXPECT_NO_THROW(risk::compute_risk(f, RiskWeights{1.0, 0.0, 0.0, 0.0, 0.0}));
}

TEST(Risk, FactorRangeRejected) {
  EXPECT_THROW(risk::compute_risk(RiskFactors{1.01, 0, 0, 0, 0}), Error);
  EXPECT_THROW(risk::compute_risk(RiskFactors{0, -0.01, 0, 0, 0}), Error);
  EXPECT_THROW(risk::compute_risk(RiskFactors{0, 0, std::nan(""), 0, 0}), Error);
}

TEST(Risk, TierBoundaries) {
  EXPECT_EQ(risk::classify_risk(0.0), Level::low);
  EXPECT_EQ(risk::classify_risk(0.3999999), Level::low);
  EXPECT_EQ(risk::classify_risk(0.4), Level::medium);
  EXPECT_EQ(risk::classify_risk(0.5999999), Level::medium);
  EXPECT_EQ(risk::classify_risk(0.6), Level::high);
  EXPECT_EQ(risk::classify_risk(0.7999999), Level::high);
  EXPECT_EQ(risk::classify_risk(0.8), Level::critical);
  EXPECT_EQ(risk::classify_risk(1.0), Level::critical);
  EXPECT_THROW(risk::classify_risk(1.5), Error);
}

TEST(Risk, FrequencyAndSeverityFactors) {
  EXPECT_DOUBLE_EQ(risk::frequency_score(std::size_t{0}), 0.0);
  EXPECT_DOUBLE_EQ(risk::frequency_score(std::size_t{50}), 0.5);
  EXPECT_DOUBLE_EQ(risk::frequency_score(std::size_t{100}), 1.0);
  EXPECT_DOUBLE_EQ(risk::frequency_score(std::size_t{1000}), 1.0);
  EXPECT_THROW(risk::frequency_score(std::size_t{5}, 0LL), Error);
  EXPECT_THROW(risk::frequency_score(std::size_t{5}, -3LL), Error);
  EXPECT_DOUBLE_EQ(risk::severity_score(Level::low), 0.25);
  EXPECT_DOUBLE_EQ(risk::severity_score(Level::medium), 0.5);
  EXPECT_DOUBLE_EQ(risk::severity_score(Level::high), 0.75);
  EXPECT_DOUBLE_EQ(risk::severity_score(Level::critical), 1.0);
  EXPECT_DOUBLE_EQ(risk::severity_score(Level::medium, Level::critical), 1.0);
  EXPECT_DOUBLE_EQ(risk::severity_score(Level::high, Level::low), 0.75);
}

TEST(Risk, ProfilesAndUserHeuristic) {
  risk::ProfileDirectory p;
  EXPECT_DOUBLE_EQ(p.asset_criticality("unknown"), 0.5);
  p.set_asset({"h1", 0.9, {}});
  EXPECT_DOUBLE_EQ(p.asset_criticality("h1"), 0.9);
  EXPECT_THROW(p.set_asset({"h2", 1.5, {}}), Error);
  EXPECT_EQ(risk::infer_user_role("SYSTEM"), risk::UserRole::admin);
  EXPECT_EQ(risk::infer_user_role("corp\\domain-admin"), risk::UserRole::admin);
  EXPECT_EQ(risk::infer_user_role("svc_backup"), risk::UserRole::service);
  EXPECT_EQ(risk::infer_user_role("NETWORK SERVICE"), risk::UserRole::service);
  EXPECT_EQ(risk::infer_user_role("alice"), risk::UserRole::standard);
  EXPECT_DOUBLE_EQ(p.user_risk("alice"), 0.2);
  EXPECT_DOUBLE_EQ(p.user_risk("Administrator"), 0.6);
  EXPECT_DOUBLE_EQ(p.user_risk(""), 0.0);
  p.set_user({"Alice", 0.95});
  EXPECT_DOUBLE_EQ(p.user_risk("alice"), 0.95);
}

TEST(Risk, JsonRoundTrip) {
  const RiskWeights w{0.2, 0.2, 0.2, 0.2, 0.2};
  const auto w2 = RiskWeights::from_json(w.to_json());
  EXPECT_DOUBLE_EQ(w2.user_risk, 0.2);
  const RiskFactors f{0.1, 0.2, 0.3, 0.4, 0.5};
  EXPECT_EQ(RiskFactors::from_json(f.to_json()), f);
}

// ---- alerts -----------------------------------------------------------------

TEST(AlertLifecycle, TransitionTableIsExact) {
  using S = AlertStatus;
  const std::set<std::pair<S, S>> legal{{S::open, S::acknowledged},
                                        {S::open, S::resolved},
                                        {S::open, S::false_positive},
                                        {S::acknowledged, S::resolved},
                                        {S::acknowledged, S::false_positive}};
  for (auto from : {S::open, S::acknowledged, S::resolved, S::false_positive}) {
    for (auto to : {S::open, S::acknowledged, S::resolved, S::false_positive}) {
      EXPECT_EQ(legal_transition(from, to), legal.contains({from, to}))
          << to_string(from) << " -> " << to_string(to);
    }
  }
}

TEST(AlertJson, RoundTripAndRescore) {
  Alert a;
  a.id = "ALR-agent-001-000001";
  a.agent_id = "agent-001";
  a.created_ts = testutil::kT0;
  a.updated_ts = testutil::kT0 + 1000;
  detect::Detection d;
  d.engine = detect::Engine::signature;
  d.score = 1.0;
  d.technique_ids = {"T1003"};
  d.evidence = {"e1"};
  d.ts = testutil::kT0;
  d.agent_id = "agent-001";
  d.rule_id = "SIG-CRED-001";
  d.severity = Level::critical;
  a.detections = {d};
  a.factors = {0.0, 0.01, 1.0, 0.5, 0.2};
  a.technique_ids = {"T1003"};
  a.rescore();
  EXPECT_NEAR(a.risk_score, 0.25 + 0.002 + 0.075 + 0.02, 1e-12);
  EXPECT_EQ(a.tier, Level::low);
  a.status = AlertStatus::acknowledged;
  a.assignee = "anna";
  a.notes = {"n1"};
  a.entities.users = {"alice"};
  a.source = "agent";
  const auto j = to_json(a);
  EXPECT_EQ(j["created_ts"], "2025-03-03T09:00:00.000Z");
  const auto b = alert_from_json(j);
  EXPECT_EQ(to_json(b), j);
  EXPECT_TRUE(b.has_technique("T1003"));
  EXPECT_FALSE(b.has_technique("T1003.001"));
}

TEST(AlertEntitiesTest, TargetsFromEvidence) {
  AlertEntities ent;
  auto net = testutil::make_event("n", testutil::kT0, events::Category::network, "connect", "x", "203.0.113.7:4444");
  ent.absorb(net);
  auto lan = testutil::make_event("l", testutil::kT0, events::Category::network, "connect", "x", "10.0.0.5:445");
  ent.absorb(lan);
  auto file = testutil::make_event("f", testutil::kT0, events::Category::file, "create", "x", "C:\\Temp\\o.dmp");
  ent.absorb(file);
  auto sys = testutil::make_event("s", testutil::kT0, events::Category::file, "create", "x", "C:\\a");
  sys.subject.user = "SYSTEM";
  ent.absorb(sys);
  EXPECT_EQ(ent.remote_ips, std::set<std::string>{"203.0.113.7"});
  EXPECT_EQ(ent.remote_endpoints, std::set<std::string>{"203.0.113.7:4444"});
  EXPECT_TRUE(ent.files.contains("C:\\Temp\\o.dmp"));
  EXPECT_EQ(ent.users, std::set<std::string>{"alice"});
}
