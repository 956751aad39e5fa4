#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/alert.hpp"
#include "edr/common.hpp"
#include "edr/events.hpp"

namespace edr::protocol {

inline constexpr int kProtocolVersion = 1;
inline constexpr TimestampMs kDefaultSkewMs = 300'000;

struct Envelope {
  int v = kProtocolVersion;
  std::string agent_id;
  std::uint64_t seq = 0;
  TimestampMs ts = 0;
  std::string nonce;  // 32 hex chars
  std::string body;   // base64 text
  std::string mac;    // lowercase hex HMAC-SHA256

  bool operator==(const Envelope&) const = default;
};

nlohmann::json to_json(const Envelope& env);
/// Throws Error when a field is missing or has the wrong type.
Envelope envelope_from_json(const nlohmann::json& obj);

/// v|agent_id|seq|ts|nonce|body
std::string canonical_string(const Envelope& env);

struct AgentCredentials {
  std::string agent_id;
  std::string shared_secret;  // raw bytes, >= 32
  TimestampMs issued_ts = 0;
};

AgentCredentials mint_credentials(const std::string& agent_id, TimestampMs now);
/// The secret is written only when `with_secret` is set (credential files and
/// the one-time enrollment response); everything else sees a redacted form.
nlohmann::json to_json(const AgentCredentials& creds, bool with_secret = false);
AgentCredentials credentials_from_json(const nlohmann::json& obj);

std::string make_nonce();

Envelope sign_envelope(std::string_view body, const AgentCredentials& creds, std::uint64_t seq,
                       TimestampMs ts, const std::string& nonce);
/// The body text is assumed to be base64 already.
Envelope sign_encoded(std::string body_b64, const AgentCredentials& creds, std::uint64_t seq,
                      TimestampMs ts, const std::string& nonce);

enum class Rejection { bad_version, unknown_agent, bad_mac, stale_seq, clock_skew, replayed_nonce };
std::string_view to_string(Rejection r) noexcept;

struct VerifyResult {
  std::optional<Rejection> rejection;
  bool accepted() const noexcept { return !rejection; }
};

struct VerifyState {
  std::uint64_t last_seq = 0;
  std::unordered_map<std::string, TimestampMs> nonces;  // nonce -> envelope ts
};

/// Checks in order: version, mac, seq, clock skew, nonce. State changes only
/// on acceptance. Nonces are remembered for twice the skew window.
VerifyResult verify_envelope(const Envelope& env, const AgentCredentials& creds,
                             VerifyState& state, TimestampMs now,
                             TimestampMs skew_ms = kDefaultSkewMs);
/// The two halves of verify_envelope.
VerifyResult check_envelope(const Envelope& env, const AgentCredentials& creds,
                            const VerifyState& state, TimestampMs now,
                            TimestampMs skew_ms = kDefaultSkewMs);
void commit_envelope(const Envelope& env, VerifyState& state, TimestampMs now,
                     TimestampMs skew_ms = kDefaultSkewMs);

enum class EnrollError { bad_token, duplicate_agent, invalid_agent_id };
std::string_view to_string(EnrollError e) noexcept;

/// Server-side credential store plus per-agent verification state. Each agent
/// has its own lock, so distinct agents verify in parallel.
class AgentRegistry {
 public:
  explicit AgentRegistry(std::string bootstrap_token = {}, TimestampMs skew_ms = kDefaultSkewMs);

  struct EnrollResult {
    std::optional<AgentCredentials> credentials;
    std::optional<EnrollError> error;
  };
  EnrollResult enroll(const std::string& agent_id, std::string_view token, TimestampMs now);
  bool revoke(const std::string& agent_id);
  /// Installs known credentials (recovery).
  void install(AgentCredentials creds, std::uint64_t last_seq = 0);

  /// `before_commit` runs under the agent's lock once every check passed; if
  /// it throws, the verification state is left untouched and the exception
  /// propagates.
  VerifyResult verify(const Envelope& env, TimestampMs now,
                      const std::function<void()>& before_commit = {});
  /// Advances last_seq without MAC checks; used when replaying a journal.
  void observe_seq(const std::string& agent_id, std::uint64_t seq);
  std::optional<std::uint64_t> last_seq(const std::string& agent_id) const;
  bool known(const std::string& agent_id) const;
  std::vector<AgentCredentials> all_credentials() const;
  TimestampMs skew_ms() const noexcept { return skew_ms_; }

 private:
  struct Entry {
    AgentCredentials creds;
    VerifyState state;
    std::mutex mu;
  };
  std::shared_ptr<Entry> find(const std::string& agent_id) const;

  std::string bootstrap_token_;
  TimestampMs skew_ms_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> agents_;
};

/// Decoded envelope payload.
struct Payload {
  std::string kind = "batch";  // batch | heartbeat
  std::string mode = "forward";  // forward | local
  std::vector<events::SystemEvent> events;
  std::vector<Alert> alerts;
  nlohmann::json status = nlohmann::json::object();
};

std::string encode_payload(const Payload& p);
/// Throws Error on malformed JSON, unknown kind or mode, or any bad event.
Payload decode_payload(std::string_view base64_body);

}  // namespace edr::protocol
