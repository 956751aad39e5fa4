#include <gtest/gtest.h>

#include <chrono>
#include <mutex>

#include "edr/agent.hpp"
#include "edr/harness.hpp"
#include "edr/ingest.hpp"
#include "test_util.hpp"

using namespace edr;
using edr::testutil::ServerFixture;
using edr::testutil::TempDir;
using nlohmann::json;

namespace {

/// Records every envelope payload passing through.
class RecordingTransport final : public agent::Transport {
 public:
  explicit RecordingTransport(std::shared_ptr<agent::Transport> inner) : inner_(std::move(inner)) {}

  struct Sent {
    std::string kind;
    std::size_t events = 0;
    std::size_t alerts = 0;
    std::uint64_t seq = 0;
    std::chrono::steady_clock::time_point at;
  };

  Reply post(const std::string& path, const json& body) override {
    if (path == "/api/v1/events") {
      const auto env = protocol::envelope_from_json(body);
      const auto p = protocol::decode_payload(env.body);
      std::lock_guard lock(mu_);
      sent_.push_back({p.kind, p.events.size(), p.alerts.size(), env.seq, std::chrono::steady_clock::now()});
    }
    return inner_->post(path, body);
  }

  std::vector<Sent> batches() const {
    std::lock_guard lock(mu_);
    std::vector<Sent> out;
    for (const auto& s : sent_) {
      if (s.kind == "batch") out.push_back(s);
    }
    return out;
  }
  std::vector<Sent> all() const {
    std::lock_guard lock(mu_);
    return sent_;
  }

 private:
  std::shared_ptr<agent::Transport> inner_;
  mutable std::mutex mu_;
  std::vector<Sent> sent_;
};

agent::AgentConfig base_config(const std::filesystem::path& state_dir, const std::string& mode = "local") {
  auto c = agent::AgentConfig::from_json(json::object());
  c.agent_id = "agent-001";
  c.state_dir = state_dir;
  c.enrollment_token = ServerFixture::kBootstrap;
  c.mode = mode;
  c.source.kind = "synth";
  c.source.scenario = "credential_theft";
  c.source.n = 1000;
  c.source.anomaly_frac = 0.05;
  c.source.seed = 42;
  return c;
}

std::vector<events::SystemEvent> plain_events(std::size_t n, const std::string& agent = "agent-001") {
  std::vector<events::SystemEvent> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto e = testutil::make_event("ev-" + std::to_string(i), testutil::kT0 + static_cast<TimestampMs>(i) * 10,
                                  events::Category::file, "create", "C:\\Windows\\explorer.exe",
                                  "C:\\Users\\alice\\doc" + std::to_string(i) + ".txt", agent);
    out.push_back(e);
  }
  return out;
}

std::size_t server_event_total(ServerFixture& f) {
  return f.call("GET", "/api/v1/events", nullptr, f.admin_token(), {{"limit", "1"}}).body["total"].get<std::size_t>();
}

}  // namespace

TEST(AgentConfigTest, DefaultsAndValidation) {
  auto c = agent::AgentConfig::from_json(json::object());
  EXPECT_EQ(c.batch_max, 200u);
  EXPECT_EQ(c.batch_flush_ms, 1000);
  EXPECT_EQ(c.heartbeat_ms, 30'000);
  EXPECT_EQ(c.backoff_cap_ms, 60'000);
  EXPECT_NO_THROW(c.validate());
  c.mode = "sideways";
  EXPECT_THROW(c.validate(), Error);
  auto d = agent::AgentConfig::from_json({{"agent", {{"batch_max", 0}}}});
  EXPECT_THROW(d.validate(), Error);
}

TEST(AgentEnrollment, NoCredentialsAndNoTokenIsAnError) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path());
  c.enrollment_token.clear();
  agent::Agent a(c, std::make_shared<agent::LoopbackTransport>(*f.service));
  EXPECT_THROW(a.ensure_enrolled(), Error);
}

TEST(AgentEnrollment, BadTokenIsAnError) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path());
  c.enrollment_token = "not-the-token";
  agent::Agent a(c, std::make_shared<agent::LoopbackTransport>(*f.service));
  EXPECT_THROW(a.ensure_enrolled(), Error);
}

TEST(AgentEnrollment, CredentialsPersistPrivately) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path());
  {
    agent::Agent a(c, std::make_shared<agent::LoopbackTransport>(*f.service));
    a.ensure_enrolled();
  }
  const auto path = state.path() / "credentials.json";
  ASSERT_TRUE(std::filesystem::exists(path));
  const auto perms = std::filesystem::status(path).permissions();
  EXPECT_EQ(perms & (std::filesystem::perms::group_all | std::filesystem::perms::others_all),
            std::filesystem::perms::none);
  // A second start reuses the file instead of enrolling again (which would be a 409).
  c.enrollment_token.clear();
  agent::Agent b(c, std::make_shared<agent::LoopbackTransport>(*f.service));
  EXPECT_NO_THROW(b.ensure_enrolled());
  EXPECT_EQ(b.credentials().agent_id, "agent-001");
}

TEST(AgentRun, LocalModeCredentialTheftEndToEnd) {
  ServerFixture f;
  TempDir state;
  auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
  agent::Agent a(base_config(state.path()), transport);
  const auto s = a.run();

  EXPECT_TRUE(s.balanced()) << s.to_json().dump();
  EXPECT_EQ(s.read, 1000u);
  EXPECT_EQ(s.delivered, s.ingest_kept);
  EXPECT_EQ(s.in_spool, 0u);
  EXPECT_GE(s.alerts_raised, 1u);
  EXPECT_EQ(server_event_total(f), s.delivered);

  const auto alerts = f.service->alerts();
  ASSERT_FALSE(alerts.empty());
  bool tagged = false;
  for (const auto& al : alerts) {
    EXPECT_EQ(al.source, "agent");
    EXPECT_NEAR(al.risk_score, risk::compute_risk(al.factors, al.weights), 1e-12);
    EXPECT_EQ(al.tier, risk::classify_risk(al.risk_score));
    for (const auto& t : al.technique_ids) tagged |= taxonomy::Taxonomy::parent_id(t) == "T1003";
  }
  EXPECT_TRUE(tagged);

  // Ledger effects: every automatic action the default policy picks is in place.
  const auto ledger = f.service->ledger();
  std::size_t expected_effects = 0;
  for (const auto& al : alerts) {
    const auto sel = respond::select_actions(al, respond::ResponsePolicy::defaults(), testutil::bundled_taxonomy(), 0);
    for (const auto& act : sel.actions) {
      if (act.mode != respond::PolicyMode::automatic) continue;
      ++expected_effects;
      EXPECT_TRUE(ledger.contains(act.kind, act.target)) << al.id << " " << respond::to_string(act.kind);
    }
  }
  EXPECT_GT(expected_effects, 0u);

  // One envelope per batch, each within batch_max.
  for (const auto& b : transport->batches()) EXPECT_LE(b.events, 200u);
  // Sequence numbers strictly increase.
  const auto sent = transport->all();
  for (std::size_t i = 1; i < sent.size(); ++i) EXPECT_GT(sent[i].seq, sent[i - 1].seq);
}

TEST(AgentRun, ForwardModeLetsServerDetect) {
  ServerFixture f;
  TempDir state;
  agent::Agent a(base_config(state.path(), "forward"), std::make_shared<agent::LoopbackTransport>(*f.service));
  const auto s = a.run();
  EXPECT_TRUE(s.balanced()) << s.to_json().dump();
  EXPECT_EQ(s.delivered, 1000u);  // raw events, no agent-side filtering
  EXPECT_EQ(s.dropped_noise + s.dropped_dup, 0u);
  EXPECT_EQ(server_event_total(f), 1000u);
  bool tagged = false;
  for (const auto& al : f.service->alerts()) {
    EXPECT_EQ(al.source, "pipeline");
    for (const auto& t : al.technique_ids) tagged |= taxonomy::Taxonomy::parent_id(t) == "T1003";
  }
  EXPECT_TRUE(tagged);
}

TEST(AgentRun, BatchesSplitAtBatchMax) {
  ServerFixture f;
  TempDir state;
  TempDir data;
  const auto file = data.path() / "in.jsonl";
  harness::write_jsonl(file, plain_events(450));
  auto c = base_config(state.path(), "forward");
  c.source.kind = "replay";
  c.source.path = file;
  c.batch_flush_ms = 60'000;
  auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
  agent::Agent a(c, transport);
  const auto s = a.run();
  EXPECT_EQ(s.delivered, 450u);
  std::vector<std::size_t> sizes;
  for (const auto& b : transport->batches()) sizes.push_back(b.events);
  EXPECT_EQ(sizes, (std::vector<std::size_t>{200, 200, 50}));
}

TEST(AgentRun, FewEventsShareOneEnvelope) {
  ServerFixture f;
  TempDir state;
  TempDir data;
  const auto file = data.path() / "in.jsonl";
  harness::write_jsonl(file, plain_events(3));
  auto c = base_config(state.path(), "forward");
  c.source.kind = "replay";
  c.source.path = file;
  auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
  agent::Agent a(c, transport);
  a.run();
  const auto b = transport->batches();
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].events, 3u);
}

TEST(AgentRun, TimerFlushesPartialBatches) {
  ServerFixture f;
  TempDir state;
  TempDir data;
  const auto file = data.path() / "in.jsonl";
  harness::write_jsonl(file, plain_events(3));
  auto c = base_config(state.path(), "forward");
  c.source.kind = "replay";
  c.source.path = file;
  c.source.rate = 2.0;  // one event every 500 ms
  c.batch_flush_ms = 150;
  auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
  agent::Agent a(c, transport);
  const auto start = std::chrono::steady_clock::now();
  const auto s = a.run();
  EXPECT_EQ(s.delivered, 3u);
  const auto b = transport->batches();
  ASSERT_EQ(b.size(), 3u);
  for (const auto& x : b) EXPECT_EQ(x.events, 1u);
  // The first envelope left long before the source was exhausted.
  EXPECT_LT(b[0].at - start, std::chrono::milliseconds(700));
}

TEST(AgentRun, EmptySourceSendsNoBatches) {
  ServerFixture f;
  TempDir state;
  TempDir data;
  const auto file = data.path() / "empty.jsonl";
  harness::write_jsonl(file, std::vector<events::SystemEvent>{});
  auto c = base_config(state.path(), "forward");
  c.source.kind = "replay";
  c.source.path = file;
  auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
  agent::Agent a(c, transport);
  const auto s = a.run();
  EXPECT_EQ(s.read, 0u);
  EXPECT_TRUE(transport->batches().empty());
  EXPECT_GE(s.heartbeats_sent, 1u);
}

TEST(AgentRun, MalformedReplayLinesAreCountedAsSkipped) {
  ServerFixture f;
  TempDir state;
  TempDir data;
  const auto file = data.path() / "in.jsonl";
  harness::write_jsonl(file, plain_events(10));
  {
    std::ofstream out(file, std::ios::app);
    out << "{not json\n" << R"({"id":"x"})" << "\n";
  }
  auto c = base_config(state.path(), "local");
  c.source.kind = "replay";
  c.source.path = file;
  agent::Agent a(c, std::make_shared<agent::LoopbackTransport>(*f.service));
  const auto s = a.run();
  EXPECT_EQ(s.read, 12u);
  EXPECT_EQ(s.skipped, 2u);
  EXPECT_TRUE(s.balanced()) << s.to_json().dump();
}

TEST(AgentRun, SurvivesServerOutage) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path(), "local");
  {
    // Enroll while the server is reachable.
    agent::Agent e(c, std::make_shared<agent::LoopbackTransport>(*f.service));
    e.ensure_enrolled();
  }
  const auto up_at = std::chrono::steady_clock::now() + std::chrono::seconds(10);
  auto flaky = std::make_shared<agent::FlakyTransport>(
      std::make_shared<agent::LoopbackTransport>(*f.service),
      [up_at] { return std::chrono::steady_clock::now() < up_at; });
  agent::Agent a(c, flaky);
  const auto s = a.run();
  EXPECT_GT(flaky->refused(), 0u);
  EXPECT_GT(s.upload_failures, 0u);
  EXPECT_TRUE(s.balanced()) << s.to_json().dump();
  EXPECT_EQ(s.in_spool, 0u);
  EXPECT_EQ(s.delivered, s.ingest_kept);
  EXPECT_EQ(server_event_total(f), s.delivered);
}

TEST(AgentRun, UndeliveredEventsStayInSpoolAndCarryOver) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path(), "forward");
  c.source.n = 300;
  c.drain_timeout_ms = 500;
  {
    agent::Agent e(c, std::make_shared<agent::LoopbackTransport>(*f.service));
    e.ensure_enrolled();
  }
  auto down = std::make_shared<agent::FlakyTransport>(std::make_shared<agent::LoopbackTransport>(*f.service),
                                                      [] { return true; });
  agent::Agent a(c, down);
  const auto s1 = a.run();
  EXPECT_TRUE(s1.balanced()) << s1.to_json().dump();
  EXPECT_EQ(s1.delivered, 0u);
  EXPECT_EQ(s1.in_spool, 300u);

  // Next run with the server back drains the carried spool plus a fresh stream.
  c.source.n = 100;
  agent::Agent b(c, std::make_shared<agent::LoopbackTransport>(*f.service));
  const auto s2 = b.run();
  EXPECT_EQ(s2.spool_carried, 300u);
  EXPECT_EQ(s2.delivered, 400u);
  EXPECT_TRUE(s2.balanced()) << s2.to_json().dump();
  EXPECT_EQ(server_event_total(f), 400u);
}

TEST(AgentRun, SeqKeepsIncreasingAcrossRestarts) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path(), "forward");
  c.source.n = 200;
  std::uint64_t last = 0;
  for (int run = 0; run < 3; ++run) {
    auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
    agent::Agent a(c, transport);
    const auto s = a.run();
    EXPECT_TRUE(s.rejections.empty()) << s.to_json().dump();
    const auto sent = transport->all();
    ASSERT_FALSE(sent.empty());
    EXPECT_GT(sent.front().seq, last);
    last = s.last_seq;
    EXPECT_EQ(agent::load_seq(state.path()), last);
    c.source.seed += 1;
  }
}

TEST(AgentRun, ServerConfigPushIsApplied) {
  ServerFixture f;
  TempDir state;
  auto c = base_config(state.path(), "forward");
  c.source.n = 100;
  {
    agent::Agent e(c, std::make_shared<agent::LoopbackTransport>(*f.service));
    e.ensure_enrolled();
  }
  auto put = f.call("PUT", "/api/v1/agents/agent-001/config", {{"config", {{"batch_max", 30}}}}, f.admin_token());
  ASSERT_EQ(put.status, 200) << put.body.dump();
  auto transport = std::make_shared<RecordingTransport>(std::make_shared<agent::LoopbackTransport>(*f.service));
  agent::Agent a(c, transport);
  const auto s = a.run();
  EXPECT_EQ(s.config_version, 1);
  EXPECT_EQ(s.delivered, 100u);
  for (const auto& b : transport->batches()) EXPECT_LE(b.events, 30u);
}

TEST(AgentSeq, LoadStoreRoundTrip) {
  TempDir state;
  EXPECT_EQ(agent::load_seq(state.path()), 0u);
  agent::store_seq(state.path(), 12345);
  EXPECT_EQ(agent::load_seq(state.path()), 12345u);
}

TEST(AgentSpool, FifoAndReload) {
  TempDir dir;
  {
    agent::Spool s(dir.path(), 1 << 20);
    s.push({{"events", {1, 2}}}, 2);
    s.push({{"events", {3}}}, 1);
    EXPECT_EQ(s.batches(), 2u);
    EXPECT_EQ(s.events(), 3u);
    EXPECT_EQ(s.front()->events, 2u);
  }
  agent::Spool r(dir.path(), 1 << 20);
  ASSERT_EQ(r.batches(), 2u);
  EXPECT_EQ(r.front()->body["events"], json({1, 2}));
  r.pop();
  EXPECT_EQ(r.front()->body["events"], json({3}));
  r.pop();
  EXPECT_TRUE(r.empty());
  EXPECT_FALSE(r.front());
}

TEST(AgentSpool, CapDropsOldestAndCounts) {
  TempDir dir;
  const json body{{"events", std::vector<int>(50, 7)}};
  const auto one = body.dump().size();
  agent::Spool s(dir.path(), one * 3 + 1);
  for (int i = 0; i < 5; ++i) {
    json b = body;
    b["n"] = i;
    s.push(b, 50);
  }
  EXPECT_LE(s.bytes(), one * 3 + 1 + 64);
  EXPECT_GE(s.dropped_batches(), 2u);
  EXPECT_EQ(s.dropped_events(), 50 * s.dropped_batches());
  EXPECT_EQ(s.events() + s.dropped_events(), 250u);
  // The survivors are the newest batches.
  EXPECT_EQ(s.front()->body["n"], static_cast<int>(s.dropped_batches()));
}
