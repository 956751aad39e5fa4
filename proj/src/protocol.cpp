#include "edr/protocol.hpp"

#include <algorithm>
#include <cstdlib>

#include "edr/crypto.hpp"

namespace edr::protocol {

nlohmann::json to_json(const Envelope& env) {
  return {{"v", env.v},         {"agent_id", env.agent_id}, {"seq", env.seq}, {"ts", env.ts},
          {"nonce", env.nonce}, {"body", env.body},         {"mac", env.mac}};
}

Envelope envelope_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw Error("envelope must be a JSON object");
  Envelope env;
  try {
    env.v = obj.at("v").get<int>();
    env.agent_id = obj.at("agent_id").get<std::string>();
    env.seq = obj.at("seq").get<std::uint64_t>();
    env.ts = obj.at("ts").get<TimestampMs>();
    env.nonce = obj.at("nonce").get<std::string>();
    env.body = obj.at("body").get<std::string>();
    env.mac = obj.at("mac").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed envelope: ") + e.what());
  }
  return env;
}

std::string canonical_string(const Envelope& env) {
  std::string s;
  s.reserve(env.agent_id.size() + env.nonce.size() + env.body.size() + 48);
  s += std::to_string(env.v);
  s += '|';
  s += env.agent_id;
  s += '|';
  s += std::to_string(env.seq);
  s += '|';
  s += std::to_string(env.ts);
  s += '|';
  s += env.nonce;
  s += '|';
  s += env.body;
  return s;
}

AgentCredentials mint_credentials(const std::string& agent_id, TimestampMs now) {
  return {agent_id, crypto::random_bytes(32), now};
}

nlohmann::json to_json(const AgentCredentials& creds, bool with_secret) {
  nlohmann::json obj{{"agent_id", creds.agent_id},
                     {"issued_ts", creds.issued_ts},
                     {"shared_secret", with_secret ? crypto::to_hex(creds.shared_secret)
                                                   : std::string("<redacted>")}};
  return obj;
}

AgentCredentials credentials_from_json(const nlohmann::json& obj) {
  AgentCredentials c;
  c.agent_id = obj.at("agent_id").get<std::string>();
  c.issued_ts = obj.value("issued_ts", TimestampMs{0});
  auto secret = crypto::from_hex(obj.at("shared_secret").get<std::string>());
  if (!secret || secret->size() < 32) throw Error("credential secret must be >= 32 bytes of hex");
  c.shared_secret = std::move(*secret);
  return c;
}

std::string make_nonce() { return crypto::to_hex(crypto::random_bytes(16)); }

Envelope sign_encoded(std::string body_b64, const AgentCredentials& creds, std::uint64_t seq,
                      TimestampMs ts, const std::string& nonce) {
  Envelope env;
  env.agent_id = creds.agent_id;
  env.seq = seq;
  env.ts = ts;
  env.nonce = nonce;
  env.body = std::move(body_b64);
  env.mac = crypto::to_hex(crypto::hmac_sha256(creds.shared_secret, canonical_string(env)));
  return env;
}

Envelope sign_envelope(std::string_view body, const AgentCredentials& creds, std::uint64_t seq,
                       TimestampMs ts, const std::string& nonce) {
  return sign_encoded(crypto::base64_encode(body), creds, seq, ts, nonce);
}

std::string_view to_string(Rejection r) noexcept {
  switch (r) {
    case Rejection::bad_version: return "bad_version";
    case Rejection::unknown_agent: return "unknown_agent";
    case Rejection::bad_mac: return "bad_mac";
    case Rejection::stale_seq: return "stale_seq";
    case Rejection::clock_skew: return "clock_skew";
    case Rejection::replayed_nonce: return "replayed_nonce";
  }
  return "unknown";
}

VerifyResult check_envelope(const Envelope& env, const AgentCredentials& creds,
                            const VerifyState& state, TimestampMs now, TimestampMs skew_ms) {
  if (env.v != kProtocolVersion) return {Rejection::bad_version};
  if (env.agent_id != creds.agent_id) return {Rejection::unknown_agent};
  const auto expected =
      crypto::to_hex(crypto::hmac_sha256(creds.shared_secret, canonical_string(env)));
  if (!crypto::constant_time_equals(expected, env.mac)) return {Rejection::bad_mac};
  if (env.seq <= state.last_seq) return {Rejection::stale_seq};
  if (std::llabs(now - env.ts) > skew_ms) return {Rejection::clock_skew};
  if (auto it = state.nonces.find(env.nonce);
      it != state.nonces.end() && std::llabs(env.ts - it->second) <= 2 * skew_ms) {
    return {Rejection::replayed_nonce};
  }
  return {};
}

void commit_envelope(const Envelope& env, VerifyState& state, TimestampMs now,
                     TimestampMs skew_ms) {
  const TimestampMs horizon = 2 * skew_ms;
  std::erase_if(state.nonces, [&](const auto& kv) { return now - kv.second > horizon; });
  state.nonces[env.nonce] = env.ts;
  state.last_seq = env.seq;
}

VerifyResult verify_envelope(const Envelope& env, const AgentCredentials& creds,
                             VerifyState& state, TimestampMs now, TimestampMs skew_ms) {
  auto result = check_envelope(env, creds, state, now, skew_ms);
  if (result.accepted()) commit_envelope(env, state, now, skew_ms);
  return result;
}

std::string_view to_string(EnrollError e) noexcept {
  switch (e) {
    case EnrollError::bad_token: return "bad_token";
    case EnrollError::duplicate_agent: return "duplicate_agent";
    case EnrollError::invalid_agent_id: return "invalid_agent_id";
  }
  return "unknown";
}

AgentRegistry::AgentRegistry(std::string bootstrap_token, TimestampMs skew_ms)
    : bootstrap_token_(std::move(bootstrap_token)), skew_ms_(skew_ms) {}

namespace {

bool valid_agent_id(std::string_view id) {
  if (id.empty() || id.size() > 64) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
           c == '-' || c == '_' || c == '.';
  });
}

}  // namespace

AgentRegistry::EnrollResult AgentRegistry::enroll(const std::string& agent_id,
                                                  std::string_view token, TimestampMs now) {
  if (bootstrap_token_.empty() || !crypto::constant_time_equals(
                                      crypto::sha256(token), crypto::sha256(bootstrap_token_))) {
    return {std::nullopt, EnrollError::bad_token};
  }
  if (!valid_agent_id(agent_id)) return {std::nullopt, EnrollError::invalid_agent_id};
  std::lock_guard lock(mu_);
  if (agents_.contains(agent_id)) return {std::nullopt, EnrollError::duplicate_agent};
  auto entry = std::make_shared<Entry>();
  entry->creds = mint_credentials(agent_id, now);
  agents_[agent_id] = entry;
  return {entry->creds, std::nullopt};
}

bool AgentRegistry::revoke(const std::string& agent_id) {
  std::lock_guard lock(mu_);
  return agents_.erase(agent_id) > 0;
}

void AgentRegistry::install(AgentCredentials creds, std::uint64_t last_seq) {
  auto entry = std::make_shared<Entry>();
  entry->creds = std::move(creds);
  entry->state.last_seq = last_seq;
  std::lock_guard lock(mu_);
  agents_[entry->creds.agent_id] = entry;
}

std::shared_ptr<AgentRegistry::Entry> AgentRegistry::find(const std::string& agent_id) const {
  std::lock_guard lock(mu_);
  auto it = agents_.find(agent_id);
  return it == agents_.end() ? nullptr : it->second;
}

VerifyResult AgentRegistry::verify(const Envelope& env, TimestampMs now,
                                   const std::function<void()>& before_commit) {
  if (env.v != kProtocolVersion) return {Rejection::bad_version};
  auto entry = find(env.agent_id);
  if (!entry) return {Rejection::unknown_agent};
  std::lock_guard lock(entry->mu);
  auto result = check_envelope(env, entry->creds, entry->state, now, skew_ms_);
  if (!result.accepted()) return result;
  if (before_commit) before_commit();
  commit_envelope(env, entry->state, now, skew_ms_);
  return result;
}

void AgentRegistry::observe_seq(const std::string& agent_id, std::uint64_t seq) {
  if (auto entry = find(agent_id)) {
    std::lock_guard lock(entry->mu);
    entry->state.last_seq = std::max(entry->state.last_seq, seq);
  }
}

std::optional<std::uint64_t> AgentRegistry::last_seq(const std::string& agent_id) const {
  auto entry = find(agent_id);
  if (!entry) return std::nullopt;
  std::lock_guard lock(entry->mu);
  return entry->state.last_seq;
}

bool AgentRegistry::known(const std::string& agent_id) const { return find(agent_id) != nullptr; }

std::vector<AgentCredentials> AgentRegistry::all_credentials() const {
  std::lock_guard lock(mu_);
  std::vector<AgentCredentials> out;
  for (const auto& [id, entry] : agents_) out.push_back(entry->creds);
  return out;
}

std::string encode_payload(const Payload& p) {
  auto events = nlohmann::json::array();
  for (const auto& e : p.events) events.push_back(events::to_json(e));
  auto alerts = nlohmann::json::array();
  for (const auto& a : p.alerts) alerts.push_back(to_json(a));
  const nlohmann::json doc{{"kind", p.kind},
                           {"mode", p.mode},
                           {"events", std::move(events)},
                           {"alerts", std::move(alerts)},
                           {"status", p.status}};
  return crypto::base64_encode(doc.dump());
}

Payload decode_payload(std::string_view base64_body) {
  const auto raw = crypto::base64_decode(base64_body);
  if (!raw) throw Error("envelope body is not valid base64");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(*raw);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(std::string("envelope body is not JSON: ") + e.what());
  }
  if (!doc.is_object()) throw Error("envelope body must be a JSON object");
  Payload p;
  p.kind = doc.value("kind", std::string{"batch"});
  p.mode = doc.value("mode", std::string{"forward"});
  if (p.kind != "batch" && p.kind != "heartbeat") throw Error("unknown payload kind '" + p.kind + "'");
  if (p.mode != "forward" && p.mode != "local") throw Error("unknown agent mode '" + p.mode + "'");
  try {
    for (const auto& e : doc.value("events", nlohmann::json::array())) {
      p.events.push_back(events::event_from_json(e));
    }
    for (const auto& a : doc.value("alerts", nlohmann::json::array())) {
      p.alerts.push_back(alert_from_json(a));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed batch: ") + e.what());
  }
  p.status = doc.value("status", nlohmann::json::object());
  return p;
}

}  // namespace edr::protocol
