#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/auth.hpp"
#include "edr/pipeline.hpp"
#include "edr/protocol.hpp"
#include "edr/respond.hpp"

namespace httplib {
class Server;
}

namespace edr::server {

struct ServerConfig {
  std::filesystem::path data_dir = "edr-data";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string jwt_secret;       // empty: generated once and kept in data_dir
  std::string bootstrap_token;  // empty: enrollment disabled
  std::int64_t token_ttl_s = 8 * 3600;
  std::string admin_user = "admin";
  std::string admin_password;  // seeds the first admin when the user store is empty
  TimestampMs heartbeat_interval_ms = 30'000;
  TimestampMs skew_ms = protocol::kDefaultSkewMs;
  std::size_t snapshot_every = 1000;  // journal records between snapshots
  std::uint64_t scrypt_n = 16384;
  std::filesystem::path taxonomy_path;
  std::filesystem::path rules_path;
  std::filesystem::path noise_rules_path;
  std::filesystem::path policy_path;  // empty: built-in default policy
  std::optional<std::filesystem::path> model_path;
  double actuator_fault_rate = 0.0;
  pipeline::PipelineOptions pipeline;

  /// Paths default to the bundled data directory. Relative paths resolve
  /// against `base`. Environment overrides: EDR_JWT_SECRET, EDR_BOOTSTRAP_TOKEN,
  /// EDR_ADMIN_PASSWORD.
  static ServerConfig from_json(const nlohmann::json& obj, const std::filesystem::path& base = {});
  /// Throws Error naming the offending field.
  void validate() const;
};

struct Request {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string authorization;  // raw header value
  std::string body;
};

struct Response {
  int status = 200;
  nlohmann::json body = nlohmann::json::object();
};

struct AgentRecord {
  std::string agent_id;
  std::string hostname;
  TimestampMs enrolled_ts = 0;
  std::optional<TimestampMs> last_heartbeat_ts;
  TimestampMs heartbeat_interval_ms = 30'000;
  std::string mode = "forward";
  std::int64_t config_version = 0;
  nlohmann::json config = nlohmann::json::object();
  std::int64_t reported_config_version = 0;
  std::size_t events_received = 0;
  nlohmann::json last_status = nlohmann::json::object();
  bool revoked = false;
};

struct AssetRecord {
  std::string asset_id;
  std::string agent_id;
  double criticality = 0.5;
  nlohmann::json inventory = nlohmann::json::object();
  std::vector<std::string> tags;
};

/// The management API as a transport-independent service. Every state change
/// is appended to the journal (data_dir/events.jsonl) before it is applied;
/// startup restores data_dir/snapshot.json and replays the journal after it.
class ManagementService {
 public:
  explicit ManagementService(ServerConfig config,
                             std::function<TimestampMs()> clock = wall_clock_ms);
  ~ManagementService();

  ManagementService(const ManagementService&) = delete;
  ManagementService& operator=(const ManagementService&) = delete;

  Response handle(const Request& req);

  void snapshot();

  std::vector<Alert> alerts() const;  // sorted by id
  respond::WorldLedger ledger() const;
  std::size_t journal_records() const;
  std::filesystem::path journal_path() const { return config_.data_dir / "events.jsonl"; }
  const ServerConfig& config() const noexcept { return config_; }
  std::string issue_token_for(const std::string& user, auth::Role role) const;

 private:
  struct Principal {
    std::string user;
    auth::Role role = auth::Role::viewer;
  };
  enum class Access { open, bootstrap, envelope, viewer, analyst, admin };
  using Params = std::vector<std::string>;
  using Handler = Response (ManagementService::*)(const Request&, const Params&, const Principal&);
  struct Route {
    std::string method;
    std::string pattern;
    Access access;
    Handler handler;
  };

  static const std::vector<Route>& routes();

  // Route handlers.
  Response register_user(const Request&, const Params&, const Principal&);
  Response login(const Request&, const Params&, const Principal&);
  Response enroll(const Request&, const Params&, const Principal&);
  Response revoke_agent(const Request&, const Params&, const Principal&);
  Response list_agents(const Request&, const Params&, const Principal&);
  Response put_agent_config(const Request&, const Params&, const Principal&);
  Response list_assets(const Request&, const Params&, const Principal&);
  Response put_assets(const Request&, const Params&, const Principal&);
  Response asset_status(const Request&, const Params&, const Principal&);
  Response submit_events(const Request&, const Params&, const Principal&);
  Response query_events(const Request&, const Params&, const Principal&);
  Response list_alerts(const Request&, const Params&, const Principal&);
  Response get_alert(const Request&, const Params&, const Principal&);
  Response create_alert(const Request&, const Params&, const Principal&);
  Response patch_alert(const Request&, const Params&, const Principal&);
  Response risk_score(const Request&, const Params&, const Principal&);
  Response risk_asset(const Request&, const Params&, const Principal&);
  Response trigger_response(const Request&, const Params&, const Principal&);
  Response list_responses(const Request&, const Params&, const Principal&);
  Response get_policy(const Request&, const Params&, const Principal&);
  Response put_policy(const Request&, const Params&, const Principal&);
  Response ml_predict(const Request&, const Params&, const Principal&);
  Response ml_metrics(const Request&, const Params&, const Principal&);
  Response ml_status(const Request&, const Params&, const Principal&);
  Response ml_model(const Request&, const Params&, const Principal&);

  // Journal and state application, shared by live requests and replay.
  std::size_t append(nlohmann::json record);
  nlohmann::json apply(const nlohmann::json& record);
  nlohmann::json apply_envelope(const nlohmann::json& record);
  nlohmann::json apply_response(const nlohmann::json& record);
  nlohmann::json commit(nlohmann::json record);
  void recover();
  void persist_credentials();
  void load_model(const std::filesystem::path& path);
  void refresh_profiles();
  void maybe_snapshot();
  std::mutex& agent_lock(const std::string& agent_id);
  std::string agent_status(const AgentRecord& a, TimestampMs now) const;
  nlohmann::json agent_json(const AgentRecord& a, TimestampMs now) const;
  nlohmann::json asset_json(const AssetRecord& a) const;
  void upsert_alert(Alert alert);

  ServerConfig config_;
  std::function<TimestampMs()> clock_;

  std::shared_ptr<const taxonomy::Taxonomy> taxonomy_;
  std::shared_ptr<const detect::RuleSet> rules_;
  std::shared_ptr<respond::SimulatedActuator> actuator_;
  std::shared_ptr<respond::ResponseOrchestrator> orchestrator_;
  std::unique_ptr<pipeline::Pipeline> pipeline_;
  std::shared_ptr<const detect::RuleBasedClassifier> classifier_;
  std::optional<std::string> model_path_;

  auth::UserStore users_;
  protocol::AgentRegistry registry_;
  std::string jwt_secret_;

  // Replay guard: appends+applies hold it shared, snapshots hold it exclusively.
  mutable std::shared_mutex apply_mu_;
  // Serializes check+append+apply for mutations outside the envelope path.
  std::mutex mutation_mu_;
  // Guards the maps below.
  mutable std::mutex state_mu_;
  std::map<std::string, AgentRecord> agents_;
  std::map<std::string, AssetRecord> assets_;
  std::map<std::string, Alert> alerts_;
  std::map<std::string, std::vector<events::SystemEvent>> events_;  // by agent
  std::size_t manual_seq_ = 0;

  std::mutex agent_locks_mu_;
  std::map<std::string, std::unique_ptr<std::mutex>> agent_locks_;

  mutable std::mutex journal_mu_;
  std::ofstream journal_;
  std::size_t journal_records_ = 0;
  std::size_t snapshot_at_ = 0;  // journal records covered by the last snapshot
  bool replaying_ = false;
};

/// cpp-httplib front end for a ManagementService.
class HttpServer {
 public:
  explicit HttpServer(ManagementService& service);
  ~HttpServer();

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  void stop();
  int port() const noexcept { return port_; }

 private:
  ManagementService& service_;
  std::unique_ptr<httplib::Server> http_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace edr::server
