#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/pipeline.hpp"
#include "edr/protocol.hpp"

namespace edr::server {
class ManagementService;
}

namespace edr::agent {

struct SourceConfig {
  std::string kind = "synth";  // replay | synth
  std::filesystem::path path;  // replay
  std::optional<double> rate;  // replay pacing, events/s
  std::string scenario = "baseline";
  std::size_t n = 1000;
  double anomaly_frac = 0.05;
  std::uint64_t seed = 42;
};

struct AgentConfig {
  std::string agent_id = "agent-001";
  std::string server_url = "http://127.0.0.1:8080";
  std::filesystem::path state_dir = "agent-state";  // credentials, seq, spool
  std::string enrollment_token;                     // used when no credentials exist
  std::string mode = "local";                       // local | forward
  SourceConfig source;
  std::size_t batch_max = 200;
  TimestampMs batch_flush_ms = 1000;
  TimestampMs heartbeat_ms = 30'000;
  std::size_t spool_max_bytes = 64u << 20;
  TimestampMs backoff_initial_ms = 500;
  TimestampMs backoff_cap_ms = 60'000;
  TimestampMs drain_timeout_ms = 120'000;  // how long shutdown keeps retrying the spool
  std::size_t queue_capacity = 4096;
  std::filesystem::path taxonomy_path;
  std::filesystem::path rules_path;
  std::filesystem::path noise_rules_path;
  std::optional<std::filesystem::path> model_path;
  pipeline::PipelineOptions pipeline;

  /// Reads the "agent" section plus the shared pipeline/risk keys. Relative
  /// paths resolve against `base`; EDR_BOOTSTRAP_TOKEN overrides the token.
  static AgentConfig from_json(const nlohmann::json& obj, const std::filesystem::path& base = {});
  void validate() const;
};

/// Request/response channel to the management API.
class Transport {
 public:
  struct Reply {
    bool reached = false;  // false: connection-level failure
    int status = 0;
    nlohmann::json body;
    std::string error;
  };
  virtual ~Transport() = default;
  virtual Reply post(const std::string& path, const nlohmann::json& body) = 0;
};

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(std::string base_url, std::chrono::milliseconds timeout = std::chrono::seconds(10));
  Reply post(const std::string& path, const nlohmann::json& body) override;

 private:
  std::string base_url_;
  std::chrono::milliseconds timeout_;
};

/// Calls a ManagementService in-process.
class LoopbackTransport final : public Transport {
 public:
  explicit LoopbackTransport(server::ManagementService& service) : service_(service) {}
  Reply post(const std::string& path, const nlohmann::json& body) override;

 private:
  server::ManagementService& service_;
};

/// Wraps another transport and fails every call while `down()` is true.
class FlakyTransport final : public Transport {
 public:
  FlakyTransport(std::shared_ptr<Transport> inner, std::function<bool()> down)
      : inner_(std::move(inner)), down_(std::move(down)) {}
  Reply post(const std::string& path, const nlohmann::json& body) override;
  std::size_t refused() const noexcept { return refused_; }

 private:
  std::shared_ptr<Transport> inner_;
  std::function<bool()> down_;
  std::atomic<std::size_t> refused_{0};
};

/// Disk-backed FIFO of pending batches, one file per batch. When a push would
/// exceed the byte cap the oldest batches are discarded and their events
/// counted in dropped_events().
class Spool {
 public:
  Spool(std::filesystem::path dir, std::size_t max_bytes);

  struct Batch {
    std::uint64_t id = 0;
    nlohmann::json body;  // {"events": [...], "alerts": [...]}
    std::size_t events = 0;
  };

  void push(const nlohmann::json& body, std::size_t events);
  std::optional<Batch> front() const;
  void pop();

  bool empty() const;
  std::size_t batches() const;
  std::size_t events() const;
  std::size_t bytes() const;
  std::size_t dropped_events() const;
  std::size_t dropped_batches() const;

 private:
  struct Entry {
    std::uint64_t id;
    std::size_t bytes;
    std::size_t events;
  };
  std::filesystem::path file_for(std::uint64_t id) const;
  void drop_front_locked();

  std::filesystem::path dir_;
  std::size_t max_bytes_;
  mutable std::mutex mu_;
  std::vector<Entry> entries_;  // oldest first
  std::size_t head_ = 0;
  std::uint64_t next_id_ = 1;
  std::size_t bytes_ = 0;
  std::size_t events_ = 0;
  std::size_t dropped_events_ = 0;
  std::size_t dropped_batches_ = 0;
};

struct RunSummary {
  std::string agent_id;
  std::string mode;
  std::size_t read = 0;  // events produced by the source plus skipped lines
  std::size_t ingest_kept = 0;
  std::size_t dropped_noise = 0;
  std::size_t dropped_dup = 0;
  std::size_t skipped = 0;
  std::size_t late_dropped = 0;
  std::size_t spool_dropped = 0;
  std::size_t delivered = 0;
  std::size_t in_spool = 0;
  std::size_t spool_carried = 0;  // events left in the spool by an earlier run
  std::size_t rejected_events = 0;
  std::size_t alerts_raised = 0;
  std::size_t alert_uploads = 0;
  std::size_t envelopes_sent = 0;
  std::size_t envelopes_accepted = 0;
  std::size_t upload_failures = 0;
  std::size_t heartbeats_sent = 0;
  std::map<std::string, std::size_t> rejections;
  std::vector<std::string> server_alert_ids;
  std::int64_t config_version = 0;
  std::uint64_t last_seq = 0;
  double elapsed_s = 0.0;
  std::size_t peak_rss_kb = 0;

  /// Events of this run that survived ingest and the spool cap.
  std::size_t kept() const noexcept {
    return delivered + in_spool + rejected_events - spool_carried;
  }
  /// read == kept + noise + dup + spool_dropped + skipped.
  bool balanced() const noexcept {
    return read == kept() + dropped_noise + dropped_dup + spool_dropped + skipped &&
           ingest_kept == kept() + spool_dropped;
  }
  nlohmann::json to_json() const;
};

/// Source -> local pipeline (or raw forwarding) -> batching uploader, as three
/// threads joined by bounded queues.
class Agent {
 public:
  Agent(AgentConfig config, std::shared_ptr<Transport> transport);
  ~Agent();

  Agent(const Agent&) = delete;
  Agent& operator=(const Agent&) = delete;

  /// Runs until the source is exhausted (or stop() is called) and the spool is
  /// drained or the drain timeout passed.
  RunSummary run();
  void stop();

  /// Loads credentials from the state dir or enrolls with the token.
  /// Throws Error when neither works.
  void ensure_enrolled();
  const protocol::AgentCredentials& credentials() const;
  const AgentConfig& config() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Reads "agent-state/seq"; returns 0 when missing.
std::uint64_t load_seq(const std::filesystem::path& state_dir);
void store_seq(const std::filesystem::path& state_dir, std::uint64_t seq);

}  // namespace edr::agent
