#include <gtest/gtest.h>

#include "edr/detect.hpp"
#include "edr/match.hpp"
#include "test_util.hpp"

using namespace edr;
using events::Category;
using nlohmann::json;
using testutil::kT0;
using testutil::make_event;

namespace {

const detect::RuleSet& bundled_rules() {
  static const auto rules = detect::load_rules(testutil::data_path("rules.json"), testutil::bundled_taxonomy());
  return rules;
}

std::vector<detect::Detection> correlate(const std::vector<events::SystemEvent>& evs,
                                         detect::CorrelationMatcher& m) {
  ingest::WindowStats w(120'000);
  std::vector<detect::Detection> all;
  for (const auto& e : evs) {
    w.update(e);
    for (auto& d : m.match(w, bundled_rules().correlations)) all.push_back(std::move(d));
  }
  return all;
}

std::vector<events::SystemEvent> credential_chain(const std::string& prefix, TimestampMs t0, TimestampMs gap) {
  return {make_event(prefix + "a", t0, Category::process, "access", "C:\\Temp\\p.exe", "C:\\Windows\\System32\\lsass.exe"),
          make_event(prefix + "b", t0 + gap, Category::file, "create", "C:\\Temp\\p.exe", "C:\\Temp\\out.dmp"),
          make_event(prefix + "c", t0 + 2 * gap, Category::network, "connect", "C:\\Temp\\p.exe", "203.0.113.5:8081")};
}

}  // namespace

// ---- predicates -------------------------------------------------------------

TEST(Predicate, Operators) {
  auto e = make_event("e", kT0, Category::network, "connect", "C:\\Windows\\System32\\Cmd.exe", "203.0.113.1:4444");
  e.bytes_out = 5000;
  EXPECT_TRUE(FieldPredicate("subject.image", MatchOp::equals, "c:\\windows\\system32\\cmd.exe").matches(e));
  EXPECT_TRUE(FieldPredicate("subject.image", MatchOp::prefix, "C:\\WINDOWS").matches(e));
  EXPECT_TRUE(FieldPredicate("subject.image", MatchOp::suffix, "\\cmd.EXE").matches(e));
  EXPECT_TRUE(FieldPredicate("object", MatchOp::contains, ":4444").matches(e));
  EXPECT_TRUE(FieldPredicate("object", MatchOp::regex, ":(4444|1337)$").matches(e));
  EXPECT_TRUE(FieldPredicate("bytes_out", MatchOp::gte, "5000").matches(e));
  EXPECT_FALSE(FieldPredicate("bytes_out", MatchOp::gte, "5001").matches(e));
  EXPECT_TRUE(FieldPredicate("bytes_out", MatchOp::lte, "5000").matches(e));
  EXPECT_FALSE(FieldPredicate("object", MatchOp::contains, ":4444", true).matches(e));
  EXPECT_FALSE(FieldPredicate("subject.image", MatchOp::gte, "1").matches(e));  // non-numeric field
}

TEST(Predicate, JsonValidationAndRoundTrip) {
  const auto p = FieldPredicate::from_json(json::parse(R"({"field":"object","op":"suffix","value":".dmp","negate":true})"));
  EXPECT_TRUE(p.negated());
  EXPECT_EQ(FieldPredicate::from_json(p.to_json()).to_json(), p.to_json());
  EXPECT_THROW(FieldPredicate::from_json(json::parse(R"({"field":"nope","op":"equals","value":"x"})")), Error);
  EXPECT_THROW(FieldPredicate::from_json(json::parse(R"({"field":"object","op":"glob","value":"x"})")), Error);
  EXPECT_THROW(FieldPredicate::from_json(json::parse(R"({"field":"object","op":"regex","value":"[a"})")), Error);
  EXPECT_THROW(FieldPredicate::from_json(json::parse(R"({"field":"bytes_out","op":"gte","value":"lots"})")), Error);
}

// ---- rules ------------------------------------------------------------------

TEST(Rules, BundledRulesResolveAgainstTaxonomy) {
  const auto& r = bundled_rules();
  EXPECT_GE(r.signatures.size(), 10u);
  EXPECT_GE(r.correlations.size(), 3u);
  for (const auto& s : r.signatures) EXPECT_NE(testutil::bundled_taxonomy().lookup_technique(s.technique_id), nullptr);
  for (const auto& c : r.correlations) EXPECT_GE(c.steps.size(), 2u);
}

TEST(Rules, UnknownTechniqueOrShortChainRejected) {
  const auto& tax = testutil::bundled_taxonomy();
  json bad_tech{{"signatures",
                 {{{"id", "S1"}, {"name", "n"}, {"technique", "T9999"}, {"severity", "high"},
                   {"match", {{{"field", "object"}, {"op", "equals"}, {"value", "x"}}}}}}}};
  EXPECT_THROW(detect::rules_from_json(bad_tech, tax), Error);
  json short_chain{{"correlations",
                    {{{"id", "C1"}, {"name", "n"}, {"technique", "T1003"}, {"within_sec", 60},
                      {"steps", {{{"match", {{{"field", "object"}, {"op", "equals"}, {"value", "x"}}}}}}}}}}};
  EXPECT_THROW(detect::rules_from_json(short_chain, tax), Error);
}

TEST(Signatures, MimikatzMatchesCredentialDumping) {
  auto e = make_event("m1", kT0, Category::process, "create", "C:\\Users\\Public\\mimikatz.exe");
  const auto d = detect::match_signatures(e, bundled_rules().signatures);
  ASSERT_FALSE(d.empty());
  EXPECT_EQ(d[0].rule_id, "SIG-CRED-001");
  EXPECT_EQ(d[0].technique_ids, std::vector<std::string>{"T1003"});
  EXPECT_EQ(d[0].evidence, std::vector<std::string>{"m1"});
  EXPECT_EQ(d[0].score, 1.0);
  EXPECT_EQ(d[0].engine, detect::Engine::signature);
  EXPECT_EQ(d[0].severity, Level::critical);
}

TEST(Signatures, RuleOrderAndBenignSilence) {
  auto e = make_event("m2", kT0, Category::process, "create", "C:\\Tools\\mimikatz.exe");
  e.subject.cmdline = "mimikatz.exe sekurlsa::logonpasswords";
  const auto d = detect::match_signatures(e, bundled_rules().signatures);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0].rule_id, "SIG-CRED-001");
  EXPECT_EQ(d[1].rule_id, "SIG-CRED-002");
  auto benign = make_event("b", kT0, Category::process, "create", "C:\\Windows\\notepad.exe");
  EXPECT_TRUE(detect::match_signatures(benign, bundled_rules().signatures).empty());
}

TEST(Signatures, EgressVolumeRuleUsesNumericAndNegatedPredicates) {
  auto e = make_event("n1", kT0, Category::network, "connect", "C:\\x\\rclone.exe", "198.51.100.7:9000");
  e.bytes_out = 2'000'000;
  auto ids = [](const std::vector<detect::Detection>& v) {
    std::vector<std::string> out;
    for (const auto& d : v) out.push_back(d.rule_id);
    return out;
  };
  EXPECT_EQ(ids(detect::match_signatures(e, bundled_rules().signatures)), std::vector<std::string>{"SIG-C2-002"});
  e.object = "198.51.100.7:443";
  EXPECT_TRUE(detect::match_signatures(e, bundled_rules().signatures).empty());
}

// ---- correlation ------------------------------------------------------------

TEST(Correlation, OrderedChainWithinWindow) {
  detect::CorrelationMatcher m;
  const auto d = correlate(credential_chain("x", kT0, 20'000), m);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].rule_id, "COR-CRED-001");
  EXPECT_EQ(d[0].evidence, (std::vector<std::string>{"xa", "xb", "xc"}));
  EXPECT_EQ(d[0].ts, kT0 + 40'000);
  EXPECT_EQ(d[0].engine, detect::Engine::correlation);
}

TEST(Correlation, WindowBoundaryIsInclusive) {
  detect::CorrelationMatcher inside;
  EXPECT_EQ(correlate(credential_chain("x", kT0, 30'000), inside).size(), 1u);
  detect::CorrelationMatcher outside;
  EXPECT_TRUE(correlate(credential_chain("x", kT0, 30'001), outside).empty());
}

TEST(Correlation, StepsMustArriveInOrder) {
  auto chain = credential_chain("x", kT0, 10'000);
  std::swap(chain[0].ts, chain[1].ts);  // dump written before lsass was touched
  std::swap(chain[0], chain[1]);
  detect::CorrelationMatcher m;
  EXPECT_TRUE(correlate(chain, m).empty());
}

TEST(Correlation, EventsAreConsumedOnce) {
  detect::CorrelationMatcher m;
  auto chain = credential_chain("x", kT0, 1'000);
  // A second network event after the first instance must not reuse steps 1-2.
  chain.push_back(make_event("xd", kT0 + 5'000, Category::network, "connect", "C:\\Temp\\p.exe", "203.0.113.5:8081"));
  EXPECT_EQ(correlate(chain, m).size(), 1u);
  // A fresh chain later gives a second instance.
  detect::CorrelationMatcher m2;
  auto two = credential_chain("x", kT0, 1'000);
  for (auto e : credential_chain("y", kT0 + 10'000, 1'000)) two.push_back(e);
  EXPECT_EQ(correlate(two, m2).size(), 2u);
}

TEST(Correlation, SameFieldsBindSteps) {
  std::vector<events::SystemEvent> same, mixed;
  for (int i = 0; i < 3; ++i) {
    same.push_back(make_event("s" + std::to_string(i), kT0 + i * 10'000, Category::network, "connect",
                              "C:\\x\\beacon.exe", "198.51.100.9:7000"));
    mixed.push_back(make_event("m" + std::to_string(i), kT0 + i * 10'000, Category::network, "connect",
                               "C:\\x\\beacon.exe", "198.51.100." + std::to_string(9 + i) + ":7000"));
  }
  detect::CorrelationMatcher a, b;
  const auto hits = correlate(same, a);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].rule_id, "COR-C2-001");
  for (const auto& d : correlate(mixed, b)) EXPECT_NE(d.rule_id, "COR-C2-001");
}

TEST(Correlation, StateRoundTripKeepsConsumption) {
  detect::CorrelationMatcher m;
  ingest::WindowStats w(120'000);
  for (const auto& e : credential_chain("x", kT0, 1'000)) {
    w.update(e);
    m.match(w, bundled_rules().correlations);
  }
  detect::CorrelationMatcher r;
  r.restore(m.to_json());
  EXPECT_TRUE(r.match(w, bundled_rules().correlations).empty());
  detect::CorrelationMatcher fresh;
  EXPECT_EQ(fresh.match(w, bundled_rules().correlations).size(), 1u);
}

// ---- classifier stub --------------------------------------------------------

TEST(Classifier, BruteForceThenSuccess) {
  detect::RuleBasedClassifier c;
  auto run = [&](int failures) {
    ingest::WindowStats w(60'000);
    for (int i = 0; i < failures; ++i) {
      w.update(make_event("f" + std::to_string(i), kT0 + i * 100, Category::user, "logon_failed", "x", "bob@corp"));
    }
    w.update(make_event("ok", kT0 + 5'000, Category::user, "logon", "x", "BOB@corp"));
    return c.classify(w);
  };
  EXPECT_TRUE(run(19).empty());
  const auto d = run(20);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].technique_ids, std::vector<std::string>{"T1110"});
  EXPECT_DOUBLE_EQ(d[0].score, 0.9);
  EXPECT_EQ(d[0].evidence.size(), 21u);
}

TEST(Classifier, MassEncryptionFiresOnceAtThreshold) {
  detect::RuleBasedClassifier c;
  ingest::WindowStats w(60'000);
  std::size_t fired = 0;
  for (int i = 0; i < 30; ++i) {
    w.update(make_event("r" + std::to_string(i), kT0 + i * 100, Category::file, "rename", "x",
                        "C:\\Users\\a\\doc" + std::to_string(i) + ".docx.locked"));
    for (const auto& d : c.classify(w)) {
      EXPECT_EQ(d.technique_ids, std::vector<std::string>{"T1486"});
      EXPECT_EQ(i, 19);
      ++fired;
    }
  }
  EXPECT_EQ(fired, 1u);
}

TEST(Classifier, UnsignedAutorun) {
  detect::RuleBasedClassifier c;
  ingest::WindowStats w(60'000);
  auto e = make_event("k", kT0, Category::registry, "set_value", "C:\\Users\\a\\x.exe",
                      "HKCU\\Software\\Microsoft\\Windows\\CurrentVersion\\Run\\x");
  e.subject.is_signed = false;
  w.update(e);
  const auto d = c.classify(w);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].technique_ids, std::vector<std::string>{"T1547.001"});
  e.id = "k2";
  e.subject.is_signed = true;
  ingest::WindowStats w2(60'000);
  w2.update(e);
  EXPECT_TRUE(c.classify(w2).empty());
}

namespace {
class Throwing final : public detect::BehaviorClassifier {
 public:
  std::string_view name() const override { return "throwing"; }
  std::vector<detect::Detection> classify(const ingest::WindowStats&) const override {
    throw std::runtime_error("model crashed");
  }
  std::vector<std::string> tag_features(const events::FeatureVector&) const override {
    throw std::runtime_error("model crashed");
  }
};
}  // namespace

TEST(Classifier, StageDegradesInsteadOfFailing) {
  ingest::WindowStats w(60'000);
  w.update(make_event("a", kT0, Category::file, "create"));
  detect::ClassifierStage stage(std::make_shared<Throwing>());
  const auto out = stage.run(w);
  EXPECT_TRUE(out.degraded);
  EXPECT_TRUE(out.detections.empty());
  EXPECT_NE(out.error.find("crashed"), std::string::npos);
  EXPECT_TRUE(stage.tags(events::FeatureVector{}).empty());
  detect::ClassifierStage off(std::make_shared<detect::RuleBasedClassifier>(), false);
  EXPECT_FALSE(off.enabled());
  EXPECT_FALSE(off.run(w).degraded);
}

TEST(DetectionJson, RoundTrip) {
  detect::Detection d;
  d.engine = detect::Engine::anomaly;
  d.score = 0.73;
  d.technique_ids = {"T1071"};
  d.evidence = {"e1", "e2"};
  d.ts = kT0;
  d.agent_id = "a";
  d.rule_id = "iforest";
  d.severity = Level::high;
  EXPECT_EQ(detect::detection_from_json(detect::to_json(d)), d);
  auto j = detect::to_json(d);
  j["evidence"] = json::array();
  EXPECT_THROW(detect::detection_from_json(j), Error);
}
