#include "edr/server.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <regex>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "edr/crypto.hpp"
#include "edr/features.hpp"

namespace edr::server {

using nlohmann::json;

namespace {

// Request time seen by the pipeline and orchestrator. Live requests set it from
// the service clock, replay from the journal record.
thread_local TimestampMs t_now = 0;

struct ApiError {
  int status;
  std::string code;
  std::string message;
  json detail = nullptr;
};

[[noreturn]] void fail(int status, std::string code, std::string message, json detail = nullptr) {
  throw ApiError{status, std::move(code), std::move(message), std::move(detail)};
}

Response error_response(const ApiError& e) {
  return {e.status, {{"code", e.code}, {"message", e.message}, {"detail", e.detail}}};
}

json parse_body(const Request& req) {
  if (req.body.empty()) return json::object();
  try {
    return json::parse(req.body);
  } catch (const json::parse_error& e) {
    fail(400, "invalid_json", "request body is not valid JSON", e.what());
  }
}

json require_object(const Request& req) {
  auto body = parse_body(req);
  if (!body.is_object()) fail(400, "invalid_body", "request body must be a JSON object");
  return body;
}

std::string require_string(const json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string() || it->get<std::string>().empty()) {
    fail(400, "validation_error", std::string("field '") + key + "' is required", key);
  }
  return it->get<std::string>();
}

std::optional<std::string> query(const Request& req, const std::string& key) {
  auto it = req.query.find(key);
  if (it == req.query.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

std::size_t query_size(const Request& req, const std::string& key, std::size_t def) {
  auto v = query(req, key);
  if (!v) return def;
  char* end = nullptr;
  const long long n = std::strtoll(v->c_str(), &end, 10);
  if (end == v->c_str() || *end != '\0' || n < 0) {
    fail(400, "validation_error", "'" + key + "' must be a non-negative integer", key);
  }
  return static_cast<std::size_t>(n);
}

std::optional<TimestampMs> query_time(const Request& req, const std::string& key) {
  auto v = query(req, key);
  if (!v) return std::nullopt;
  if (auto ts = parse_rfc3339(*v)) return ts;
  char* end = nullptr;
  const long long n = std::strtoll(v->c_str(), &end, 10);
  if (end == v->c_str() || *end != '\0') {
    fail(400, "validation_error", "'" + key + "' must be RFC 3339 or epoch milliseconds", key);
  }
  return n;
}

json paginate(const json& items, const Request& req) {
  const auto limit = std::min<std::size_t>(query_size(req, "limit", 100), 1000);
  const auto offset = query_size(req, "offset", 0);
  auto page = json::array();
  for (std::size_t i = offset; i < items.size() && page.size() < limit; ++i) page.push_back(items[i]);
  return {{"items", std::move(page)}, {"total", items.size()}, {"limit", limit}, {"offset", offset}};
}

auth::Role required_role(int access) {
  switch (access) {
    case 4: return auth::Role::analyst;
    case 5: return auth::Role::admin;
    default: return auth::Role::viewer;
  }
}

void write_atomic(const std::filesystem::path& path, const std::string& text, bool private_file) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
    out.flush();
    if (!out) throw Error("short write to " + tmp.string());
  }
  if (private_file) {
    std::filesystem::permissions(tmp, std::filesystem::perms::owner_read |
                                          std::filesystem::perms::owner_write);
  }
  std::filesystem::rename(tmp, path);
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

const char* getenv_nonempty(const char* name) {
  const char* v = std::getenv(name);
  return (v && *v) ? v : nullptr;
}

json result_json(const respond::ActionResult& r) { return respond::to_json(r); }

json outcome_json(const respond::ResponseOrchestrator::Outcome& o) {
  auto actions = json::array();
  for (const auto& a : o.actions) actions.push_back(respond::to_json(a));
  auto results = json::array();
  for (const auto& r : o.results) results.push_back(result_json(r));
  return {{"actions", actions}, {"results", results}, {"policy_gap", o.policy_gap}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

ServerConfig ServerConfig::from_json(const nlohmann::json& obj, const std::filesystem::path& base) {
  ServerConfig c;
  const std::filesystem::path data(EDR_DATA_DIR);
  c.taxonomy_path = data / "attck_min.json";
  c.rules_path = data / "rules.json";
  c.noise_rules_path = data / "noise_rules.json";
  const json s = obj.value("server", json::object());
  if (s.contains("data_dir")) c.data_dir = resolve(base, s.at("data_dir").get<std::string>());
  c.host = s.value("host", c.host);
  c.port = s.value("port", c.port);
  c.jwt_secret = s.value("jwt_secret", c.jwt_secret);
  c.bootstrap_token = s.value("bootstrap_token", c.bootstrap_token);
  c.token_ttl_s = static_cast<std::int64_t>(s.value("token_ttl_hours", 8.0) * 3600.0);
  c.admin_user = s.value("admin_user", c.admin_user);
  c.admin_password = s.value("admin_password", c.admin_password);
  c.heartbeat_interval_ms =
      static_cast<TimestampMs>(s.value("heartbeat_interval_sec", 30.0) * 1000.0);
  c.skew_ms = static_cast<TimestampMs>(s.value("skew_window_sec", 300.0) * 1000.0);
  c.snapshot_every = s.value("snapshot_every", c.snapshot_every);
  c.scrypt_n = s.value("scrypt_n", c.scrypt_n);
  c.actuator_fault_rate = s.value("actuator_fault_rate", c.actuator_fault_rate);
  if (obj.contains("taxonomy_path")) c.taxonomy_path = resolve(base, obj.at("taxonomy_path").get<std::string>());
  if (obj.contains("rules_path")) c.rules_path = resolve(base, obj.at("rules_path").get<std::string>());
  if (obj.contains("noise_rules_path")) {
    c.noise_rules_path = resolve(base, obj.at("noise_rules_path").get<std::string>());
  }
  if (obj.contains("policy_path")) c.policy_path = resolve(base, obj.at("policy_path").get<std::string>());
  if (obj.contains("model_path") && obj.at("model_path").is_string()) {
    c.model_path = resolve(base, obj.at("model_path").get<std::string>());
  }
  c.pipeline = pipeline::PipelineOptions::from_json(obj);
  if (auto v = getenv_nonempty("EDR_JWT_SECRET")) c.jwt_secret = v;
  if (auto v = getenv_nonempty("EDR_BOOTSTRAP_TOKEN")) c.bootstrap_token = v;
  if (auto v = getenv_nonempty("EDR_ADMIN_PASSWORD")) c.admin_password = v;
  return c;
}

void ServerConfig::validate() const {
  if (port < 0 || port > 65535) throw Error("server.port must be in [0, 65535]");
  if (token_ttl_s <= 0) throw Error("server.token_ttl_hours must be positive");
  if (heartbeat_interval_ms <= 0) throw Error("server.heartbeat_interval_sec must be positive");
  if (skew_ms <= 0) throw Error("server.skew_window_sec must be positive");
  if (snapshot_every == 0) throw Error("server.snapshot_every must be >= 1");
  if (scrypt_n < 2 || (scrypt_n & (scrypt_n - 1)) != 0) {
    throw Error("server.scrypt_n must be a power of two >= 2");
  }
  if (actuator_fault_rate < 0.0 || actuator_fault_rate > 1.0) {
    throw Error("server.actuator_fault_rate must be in [0, 1]");
  }
  if (!jwt_secret.empty() && jwt_secret.size() < 16) throw Error("jwt_secret must be >= 16 bytes");
  if (!admin_password.empty() && admin_password.size() < 8) {
    throw Error("admin_password must be >= 8 characters");
  }
  pipeline.validate();
}

// ---------------------------------------------------------------------------
// Routes

const std::vector<ManagementService::Route>& ManagementService::routes() {
  using S = ManagementService;
  static const std::vector<Route> table{
      {"POST", "/api/v1/auth/register", Access::admin, &S::register_user},
      {"POST", "/api/v1/auth/login", Access::open, &S::login},
      {"POST", "/api/v1/agents/enroll", Access::bootstrap, &S::enroll},
      {"GET", "/api/v1/agents", Access::viewer, &S::list_agents},
      {"DELETE", "/api/v1/agents/([^/]+)", Access::admin, &S::revoke_agent},
      {"PUT", "/api/v1/agents/([^/]+)/config", Access::admin, &S::put_agent_config},
      {"GET", "/api/v1/assets", Access::viewer, &S::list_assets},
      {"PUT", "/api/v1/assets", Access::admin, &S::put_assets},
      {"GET", "/api/v1/assets/([^/]+)/status", Access::viewer, &S::asset_status},
      {"POST", "/api/v1/events", Access::envelope, &S::submit_events},
      {"GET", "/api/v1/events", Access::viewer, &S::query_events},
      {"GET", "/api/v1/alerts", Access::viewer, &S::list_alerts},
      {"POST", "/api/v1/alerts", Access::analyst, &S::create_alert},
      {"GET", "/api/v1/alerts/([^/]+)", Access::viewer, &S::get_alert},
      {"PATCH", "/api/v1/alerts/([^/]+)", Access::analyst, &S::patch_alert},
      {"POST", "/api/v1/risk/score", Access::viewer, &S::risk_score},
      {"GET", "/api/v1/risk/assets/([^/]+)", Access::viewer, &S::risk_asset},
      {"POST", "/api/v1/responses", Access::analyst, &S::trigger_response},
      {"GET", "/api/v1/responses", Access::viewer, &S::list_responses},
      {"GET", "/api/v1/responses/policy", Access::viewer, &S::get_policy},
      {"PUT", "/api/v1/responses/policy", Access::admin, &S::put_policy},
      {"POST", "/api/v1/ml/predict", Access::viewer, &S::ml_predict},
      {"GET", "/api/v1/ml/metrics", Access::viewer, &S::ml_metrics},
      {"GET", "/api/v1/ml/status", Access::viewer, &S::ml_status},
      {"PUT", "/api/v1/ml/model", Access::admin, &S::ml_model},
  };
  return table;
}

namespace {

const std::vector<std::regex>& route_regexes(const std::vector<std::string>& patterns) {
  static const std::vector<std::regex> compiled = [&] {
    std::vector<std::regex> out;
    for (const auto& p : patterns) out.emplace_back(p);
    return out;
  }();
  return compiled;
}

}  // namespace

Response ManagementService::handle(const Request& req) {
  const auto& table = routes();
  static const std::vector<std::string> patterns = [&] {
    std::vector<std::string> out;
    for (const auto& r : table) out.push_back(r.pattern);
    return out;
  }();
  const auto& regexes = route_regexes(patterns);

  const Route* route = nullptr;
  Params params;
  bool path_known = false;
  for (std::size_t i = 0; i < table.size(); ++i) {
    std::smatch m;
    if (!std::regex_match(req.path, m, regexes[i])) continue;
    path_known = true;
    if (table[i].method != req.method) continue;
    route = &table[i];
    for (std::size_t g = 1; g < m.size(); ++g) params.push_back(m[g].str());
    break;
  }
  try {
    if (!route) {
      if (path_known) fail(405, "method_not_allowed", req.method + " not allowed on " + req.path);
      fail(404, "not_found", "no route for " + req.path);
    }
    Principal principal;
    const int access = static_cast<int>(route->access);
    if (access >= static_cast<int>(Access::viewer)) {
      constexpr std::string_view prefix = "Bearer ";
      if (req.authorization.size() <= prefix.size() ||
          req.authorization.compare(0, prefix.size(), prefix) != 0) {
        fail(401, "missing_token", "a bearer token is required");
      }
      const auto token = std::string_view(req.authorization).substr(prefix.size());
      auto check = auth::decode_jwt(token, jwt_secret_, clock_() / 1000);
      if (!check.claims) {
        fail(401, "invalid_token", "token rejected", std::string(auth::to_string(*check.error)));
      }
      principal.user = check.claims->sub;
      principal.role = check.claims->role;
      const auto need = required_role(access);
      if (static_cast<int>(principal.role) < static_cast<int>(need)) {
        fail(403, "forbidden", "role '" + std::string(auth::to_string(principal.role)) +
                                   "' may not call " + req.method + " " + route->pattern,
             std::string(auth::to_string(need)));
      }
    }
    return (this->*(route->handler))(req, params, principal);
  } catch (const ApiError& e) {
    return error_response(e);
  } catch (const taxonomy::TaxonomyError& e) {
    return error_response({400, "unknown_technique", e.what()});
  } catch (const Error& e) {
    return error_response({400, "validation_error", e.what()});
  } catch (const json::exception& e) {
    return error_response({400, "validation_error", e.what()});
  } catch (const std::exception& e) {
    spdlog::error("{} {} failed: {}", req.method, req.path, e.what());
    return error_response({500, "internal_error", e.what()});
  }
}

// ---------------------------------------------------------------------------
// Construction and recovery

ManagementService::ManagementService(ServerConfig config, std::function<TimestampMs()> clock)
    : config_(std::move(config)),
      clock_(std::move(clock)),
      users_(crypto::ScryptParams{config_.scrypt_n, 8, 1}),
      registry_(config_.bootstrap_token, config_.skew_ms) {
  config_.validate();
  std::filesystem::create_directories(config_.data_dir);

  taxonomy_ = std::make_shared<taxonomy::Taxonomy>(taxonomy::load_taxonomy(config_.taxonomy_path));
  rules_ = std::make_shared<detect::RuleSet>(detect::load_rules(config_.rules_path, *taxonomy_));
  if (!config_.noise_rules_path.empty() && std::filesystem::exists(config_.noise_rules_path)) {
    config_.pipeline.ingest.noise_rules = ingest::load_noise_rules(config_.noise_rules_path);
  }
  auto policy = config_.policy_path.empty() ? respond::ResponsePolicy::defaults()
                                            : respond::load_policy(config_.policy_path);
  policy.validate(*taxonomy_);

  respond::SimulatedActuator::Options act;
  act.fault_rate = config_.actuator_fault_rate;
  act.audit_log = config_.data_dir / "actions.jsonl";
  actuator_ = std::make_shared<respond::SimulatedActuator>(act);
  orchestrator_ = std::make_shared<respond::ResponseOrchestrator>(policy, taxonomy_, actuator_);
  classifier_ = std::make_shared<detect::RuleBasedClassifier>();

  auto opts = config_.pipeline;
  opts.alert_prefix = "SRV";
  pipeline_ = std::make_unique<pipeline::Pipeline>(
      pipeline::Components{taxonomy_, rules_, nullptr, classifier_, nullptr}, opts, orchestrator_);
  pipeline_->set_clock([] { return t_now; });

  // Credentials live outside the journal so that secrets never land in it.
  const auto cred_path = config_.data_dir / "credentials.json";
  if (std::filesystem::exists(cred_path)) {
    std::ifstream in(cred_path);
    const auto doc = json::parse(in);
    if (config_.jwt_secret.empty()) {
      auto secret = crypto::from_hex(doc.value("jwt_secret", std::string{}));
      if (secret) jwt_secret_ = *secret;
    }
    for (const auto& c : doc.value("agents", json::array())) {
      registry_.install(protocol::credentials_from_json(c));
    }
  }
  if (!config_.jwt_secret.empty()) jwt_secret_ = config_.jwt_secret;
  if (jwt_secret_.empty()) jwt_secret_ = crypto::random_bytes(32);
  persist_credentials();

  if (config_.model_path) load_model(*config_.model_path);

  recover();

  if (users_.size() == 0 && !config_.admin_password.empty()) {
    commit({{"type", "register"},
            {"user", config_.admin_user},
            {"role", "admin"},
            {"password_hash", crypto::hash_password(config_.admin_password,
                                                    crypto::ScryptParams{config_.scrypt_n, 8, 1})}});
    spdlog::info("seeded admin user '{}'", config_.admin_user);
  }
}

ManagementService::~ManagementService() {
  try {
    snapshot();
  } catch (const std::exception& e) {
    spdlog::error("final snapshot failed: {}", e.what());
  }
}

void ManagementService::recover() {
  const auto snap_path = config_.data_dir / "snapshot.json";
  std::size_t covered = 0;
  if (std::filesystem::exists(snap_path)) {
    std::ifstream in(snap_path);
    const auto snap = json::parse(in);
    covered = snap.at("journal_records").get<std::size_t>();
    users_.restore(snap.at("users"));
    for (const auto& a : snap.at("agents")) {
      AgentRecord r;
      r.agent_id = a.at("agent_id").get<std::string>();
      r.hostname = a.value("hostname", std::string{});
      r.enrolled_ts = a.value("enrolled_ts", TimestampMs{0});
      if (a.contains("last_heartbeat_ts") && !a.at("last_heartbeat_ts").is_null()) {
        r.last_heartbeat_ts = a.at("last_heartbeat_ts").get<TimestampMs>();
      }
      r.heartbeat_interval_ms = a.value("heartbeat_interval_ms", config_.heartbeat_interval_ms);
      r.mode = a.value("mode", std::string{"forward"});
      r.config_version = a.value("config_version", std::int64_t{0});
      r.config = a.value("config", json::object());
      r.reported_config_version = a.value("reported_config_version", std::int64_t{0});
      r.events_received = a.value("events_received", std::size_t{0});
      r.last_status = a.value("last_status", json::object());
      r.revoked = a.value("revoked", false);
      agents_[r.agent_id] = std::move(r);
    }
    for (const auto& a : snap.at("assets")) {
      AssetRecord r;
      r.asset_id = a.at("asset_id").get<std::string>();
      r.agent_id = a.value("agent_id", std::string{});
      r.criticality = a.value("criticality", 0.5);
      r.inventory = a.value("inventory", json::object());
      r.tags = a.value("tags", std::vector<std::string>{});
      assets_[r.asset_id] = std::move(r);
    }
    for (const auto& a : snap.at("alerts")) {
      auto alert = alert_from_json(a);
      alerts_[alert.id] = std::move(alert);
    }
    for (const auto& [agent, evs] : snap.at("events").items()) {
      auto& out = events_[agent];
      for (const auto& e : evs) out.push_back(events::event_from_json(e));
    }
    manual_seq_ = snap.value("manual_seq", std::size_t{0});
    pipeline_->restore(snap.at("pipeline"));
    orchestrator_->restore(snap.at("orchestrator"));
    if (snap.contains("policy")) {
      orchestrator_->set_policy(respond::ResponsePolicy::from_json(snap.at("policy")));
    }
    if (snap.contains("model_path") && snap.at("model_path").is_string()) {
      load_model(snap.at("model_path").get<std::string>());
    }
    const auto last_seq = snap.value("last_seq", json::object());
    for (const auto& [agent, seq] : last_seq.items()) {
      registry_.observe_seq(agent, seq.get<std::uint64_t>());
    }
    refresh_profiles();
  }
  snapshot_at_ = covered;

  std::size_t n = 0;
  std::size_t replayed = 0;
  bool needs_newline = false;
  if (std::filesystem::exists(journal_path())) {
    std::ifstream in(journal_path(), std::ios::binary);
    std::string line;
    replaying_ = true;
    while (std::getline(in, line)) {
      needs_newline = in.eof();
      if (line.empty()) continue;
      const std::size_t index = n++;
      if (index < covered) continue;
      json rec;
      try {
        rec = json::parse(line);
      } catch (const json::parse_error&) {
        spdlog::warn("journal record {} is not valid JSON, skipped", index);
        continue;
      }
      try {
        apply(rec);
        ++replayed;
      } catch (const std::exception& e) {
        spdlog::warn("journal record {} ({}) failed to replay: {}", index,
                     rec.value("type", std::string{"?"}), e.what());
      }
    }
    replaying_ = false;
  }
  journal_records_ = n;
  if (n < covered) {
    spdlog::warn("snapshot covers {} records but the journal holds {}", covered, n);
  }
  journal_.open(journal_path(), std::ios::binary | std::ios::app);
  if (!journal_) throw Error("cannot open journal " + journal_path().string());
  if (needs_newline) journal_ << '\n';
  if (replayed > 0 || covered > 0) {
    spdlog::info("recovered state: snapshot covering {} records, {} replayed", covered, replayed);
  }
}

void ManagementService::persist_credentials() {
  auto agents = json::array();
  for (const auto& c : registry_.all_credentials()) agents.push_back(protocol::to_json(c, true));
  const json doc{{"jwt_secret", config_.jwt_secret.empty() ? crypto::to_hex(jwt_secret_) : ""},
                 {"agents", agents}};
  write_atomic(config_.data_dir / "credentials.json", doc.dump(2), true);
}

void ManagementService::load_model(const std::filesystem::path& path) {
  auto forest = std::make_shared<detect::IsolationForest>(detect::IsolationForest::load(path));
  if (forest->feature_count() != events::kFeatureCount) {
    throw Error("model " + path.string() + " expects " + std::to_string(forest->feature_count()) +
                " features");
  }
  pipeline_->set_forest(std::move(forest));
  std::lock_guard lock(state_mu_);
  model_path_ = path.string();
}

void ManagementService::refresh_profiles() {
  auto profiles = std::make_shared<risk::ProfileDirectory>();
  {
    std::lock_guard lock(state_mu_);
    for (const auto& [id, a] : assets_) {
      profiles->set_asset({a.agent_id.empty() ? a.asset_id : a.agent_id, a.criticality, a.tags});
    }
  }
  pipeline_->set_profiles(std::move(profiles));
}

void ManagementService::snapshot() {
  std::unique_lock guard(apply_mu_);
  std::lock_guard journal_lock(journal_mu_);
  json snap;
  snap["journal_records"] = journal_records_;
  snap["users"] = users_.to_json();
  {
    std::lock_guard lock(state_mu_);
    auto agents = json::array();
    for (const auto& [id, a] : agents_) {
      auto j = agent_json(a, clock_());
      j["enrolled_ts"] = a.enrolled_ts;
      j["last_heartbeat_ts"] = a.last_heartbeat_ts ? json(*a.last_heartbeat_ts) : json(nullptr);
      j["config"] = a.config;
      j["last_status"] = a.last_status;
      agents.push_back(std::move(j));
    }
    snap["agents"] = std::move(agents);
    auto assets = json::array();
    for (const auto& [id, a] : assets_) assets.push_back(asset_json(a));
    snap["assets"] = std::move(assets);
    auto alerts = json::array();
    for (const auto& [id, a] : alerts_) alerts.push_back(to_json(a));
    snap["alerts"] = std::move(alerts);
    json evs = json::object();
    for (const auto& [agent, list] : events_) {
      auto arr = json::array();
      for (const auto& e : list) arr.push_back(events::to_json(e));
      evs[agent] = std::move(arr);
    }
    snap["events"] = std::move(evs);
    snap["manual_seq"] = manual_seq_;
    snap["model_path"] = model_path_ ? json(*model_path_) : json(nullptr);
  }
  snap["pipeline"] = pipeline_->state_to_json();
  snap["orchestrator"] = orchestrator_->to_json();
  snap["policy"] = orchestrator_->policy().to_json();
  json seqs = json::object();
  for (const auto& c : registry_.all_credentials()) {
    if (auto s = registry_.last_seq(c.agent_id)) seqs[c.agent_id] = *s;
  }
  snap["last_seq"] = std::move(seqs);
  write_atomic(config_.data_dir / "snapshot.json", snap.dump(), false);
  snapshot_at_ = journal_records_;
}

void ManagementService::maybe_snapshot() {
  bool due = false;
  {
    std::lock_guard lock(journal_mu_);
    due = journal_records_ - snapshot_at_ >= config_.snapshot_every;
  }
  if (due) snapshot();
}

// ---------------------------------------------------------------------------
// Journal

std::size_t ManagementService::append(nlohmann::json record) {
  std::lock_guard lock(journal_mu_);
  record["n"] = journal_records_;
  journal_ << record.dump() << '\n';
  journal_.flush();
  if (!journal_) throw Error("journal write failed");
  return journal_records_++;
}

nlohmann::json ManagementService::commit(nlohmann::json record) {
  json result;
  {
    std::shared_lock guard(apply_mu_);
    if (!record.contains("ts")) record["ts"] = clock_();
    append(record);
    result = apply(record);
  }
  maybe_snapshot();
  return result;
}

nlohmann::json ManagementService::apply(const nlohmann::json& rec) {
  const auto type = rec.at("type").get<std::string>();
  const TimestampMs ts = rec.at("ts").get<TimestampMs>();
  t_now = ts;

  if (type == "register") {
    users_.add_hashed({rec.at("user").get<std::string>(),
                       *auth::parse_role(rec.at("role").get<std::string>()),
                       rec.at("password_hash").get<std::string>()});
    return {{"user", rec.at("user")}, {"role", rec.at("role")}};
  }
  if (type == "enroll") {
    AgentRecord r;
    r.agent_id = rec.at("agent_id").get<std::string>();
    r.hostname = rec.value("hostname", std::string{});
    r.enrolled_ts = ts;
    r.heartbeat_interval_ms = config_.heartbeat_interval_ms;
    std::lock_guard lock(state_mu_);
    agents_[r.agent_id] = r;
    return agent_json(r, ts);
  }
  if (type == "revoke") {
    std::lock_guard lock(state_mu_);
    auto it = agents_.find(rec.at("agent_id").get<std::string>());
    if (it == agents_.end()) return json::object();
    it->second.revoked = true;
    return agent_json(it->second, ts);
  }
  if (type == "envelope") return apply_envelope(rec);
  if (type == "agent_config") {
    std::lock_guard lock(state_mu_);
    auto& a = agents_.at(rec.at("agent_id").get<std::string>());
    a.config = rec.at("config");
    ++a.config_version;
    return {{"agent_id", a.agent_id}, {"config_version", a.config_version}, {"config", a.config}};
  }
  if (type == "assets") {
    auto items = json::array();
    {
      std::lock_guard lock(state_mu_);
      for (const auto& a : rec.at("assets")) {
        AssetRecord r;
        r.asset_id = a.at("asset_id").get<std::string>();
        r.agent_id = a.value("agent_id", std::string{});
        r.criticality = a.value("criticality", 0.5);
        r.inventory = a.value("inventory", json::object());
        r.tags = a.value("tags", std::vector<std::string>{});
        items.push_back(asset_json(r));
        assets_[r.asset_id] = std::move(r);
      }
    }
    refresh_profiles();
    return {{"items", items}};
  }
  if (type == "alert_manual") {
    const auto& body = rec.at("alert");
    Alert a;
    a.agent_id = body.at("agent_id").get<std::string>();
    a.created_ts = a.updated_ts = ts;
    a.technique_ids = body.at("technique_ids").get<std::vector<std::string>>();
    std::sort(a.technique_ids.begin(), a.technique_ids.end());
    a.technique_ids.erase(std::unique(a.technique_ids.begin(), a.technique_ids.end()),
                          a.technique_ids.end());
    a.factors = risk::RiskFactors::from_json(body.at("factors"));
    a.weights = body.contains("weights") ? risk::RiskWeights::from_json(body.at("weights"))
                                         : config_.pipeline.weights;
    a.source = "manual";
    a.source_id = rec.value("user", std::string{});
    if (body.contains("note") && body.at("note").is_string()) {
      a.notes.push_back(body.at("note").get<std::string>());
    }
    a.rescore(config_.pipeline.tiers);
    std::lock_guard lock(state_mu_);
    char id[32];
    std::snprintf(id, sizeof id, "MAN-%06zu", ++manual_seq_);
    a.id = id;
    alerts_[a.id] = a;
    return to_json(a);
  }
  if (type == "alert_patch") {
    std::lock_guard lock(state_mu_);
    auto& a = alerts_.at(rec.at("id").get<std::string>());
    const auto user = rec.value("user", std::string{"?"});
    if (rec.contains("status")) {
      const auto to = *parse_alert_status(rec.at("status").get<std::string>());
      if (!legal_transition(a.status, to)) {
        throw Error("illegal transition recorded in journal");
      }
      a.notes.push_back(format_rfc3339(ts) + " " + user + ": status " +
                        std::string(to_string(a.status)) + " -> " + std::string(to_string(to)));
      a.status = to;
    }
    if (rec.contains("assignee")) {
      if (rec.at("assignee").is_null()) {
        a.assignee.reset();
      } else {
        a.assignee = rec.at("assignee").get<std::string>();
      }
      a.notes.push_back(format_rfc3339(ts) + " " + user + ": assignee " +
                        (a.assignee ? *a.assignee : std::string("(none)")));
    }
    if (rec.contains("note")) {
      a.notes.push_back(format_rfc3339(ts) + " " + user + ": " + rec.at("note").get<std::string>());
    }
    a.updated_ts = ts;
    return to_json(a);
  }
  if (type == "response") return apply_response(rec);
  if (type == "policy") {
    auto policy = respond::ResponsePolicy::from_json(rec.at("policy"));
    policy.validate(*taxonomy_);
    orchestrator_->set_policy(policy);
    return policy.to_json();
  }
  if (type == "model") {
    load_model(rec.at("path").get<std::string>());
    return {{"loaded", true}, {"path", rec.at("path")}};
  }
  throw Error("unknown journal record type '" + type + "'");
}

nlohmann::json ManagementService::apply_envelope(const nlohmann::json& rec) {
  const auto agent_id = rec.at("agent_id").get<std::string>();
  const auto kind = rec.at("kind").get<std::string>();
  const auto mode = rec.at("mode").get<std::string>();
  const TimestampMs ts = rec.at("ts").get<TimestampMs>();
  registry_.observe_seq(agent_id, rec.at("seq").get<std::uint64_t>());

  std::vector<events::SystemEvent> evs;
  for (const auto& e : rec.at("events")) evs.push_back(events::event_from_json(e));

  std::set<std::string> alert_ids;
  std::vector<Alert> touched;
  if (mode == "forward") {
    std::set<std::string> ids;
    for (const auto& e : evs) {
      for (auto& id : pipeline_->process(e).alert_ids) ids.insert(std::move(id));
    }
    for (const auto& id : ids) {
      if (auto a = pipeline_->find_alert(id)) touched.push_back(std::move(*a));
    }
  } else {
    for (const auto& a : rec.at("alerts")) {
      auto alert = alert_from_json(a);
      alert.source = "agent";
      alert.rescore(config_.pipeline.tiers);
      touched.push_back(std::move(alert));
    }
  }

  json out;
  std::vector<Alert> uploaded;
  {
    std::lock_guard lock(state_mu_);
    auto& agent = agents_[agent_id];
    agent.agent_id = agent_id;
    agent.mode = mode;
    agent.events_received += evs.size();
    const auto& status = rec.at("status");
    if (status.is_object() && !status.empty()) {
      agent.last_status = status;
      if (status.contains("config_version") && status.at("config_version").is_number_integer()) {
        agent.reported_config_version = status.at("config_version").get<std::int64_t>();
      }
      if (status.contains("heartbeat_ms") && status.at("heartbeat_ms").is_number() &&
          status.at("heartbeat_ms").get<double>() > 0) {
        agent.heartbeat_interval_ms = status.at("heartbeat_ms").get<TimestampMs>();
      }
    }
    if (kind == "heartbeat") agent.last_heartbeat_ts = ts;
    auto& store = events_[agent_id];
    store.insert(store.end(), evs.begin(), evs.end());
    for (auto& a : touched) {
      alert_ids.insert(a.id);
      const auto id = a.id;
      upsert_alert(std::move(a));
      if (mode == "local") uploaded.push_back(alerts_.at(id));
    }
    out = {{"accepted_count", evs.size()},
           {"alert_ids", std::vector<std::string>(alert_ids.begin(), alert_ids.end())},
           {"config_version", agent.config_version}};
    if (agent.reported_config_version < agent.config_version) out["config"] = agent.config;
  }
  // Forward-mode alerts were already handed to the orchestrator by the pipeline.
  for (const auto& a : uploaded) orchestrator_->handle_alert(a, ts);
  return out;
}

void ManagementService::upsert_alert(Alert alert) {
  // Caller holds state_mu_. Triage fields are owned by the server.
  auto it = alerts_.find(alert.id);
  if (it != alerts_.end()) {
    alert.status = it->second.status;
    alert.assignee = it->second.assignee;
    alert.notes = it->second.notes;
    it->second = std::move(alert);
  } else {
    auto id = alert.id;
    alerts_.emplace(std::move(id), std::move(alert));
  }
}

nlohmann::json ManagementService::apply_response(const nlohmann::json& rec) {
  const TimestampMs ts = rec.at("ts").get<TimestampMs>();
  json out = json::object();
  if (rec.contains("approve")) {
    auto results = json::array();
    for (const auto& id : rec.at("approve")) {
      results.push_back(result_json(orchestrator_->approve(id.get<std::string>(), ts)));
    }
    out["results"] = std::move(results);
    out["actions"] = json::array();
    if (rec.contains("alert_id")) {
      for (const auto& a : orchestrator_->actions_for(rec.at("alert_id").get<std::string>())) {
        out["actions"].push_back(respond::to_json(a));
      }
    }
    return out;
  }
  Alert alert;
  {
    std::lock_guard lock(state_mu_);
    alert = alerts_.at(rec.at("alert_id").get<std::string>());
  }
  if (rec.contains("kinds")) {
    std::vector<respond::ActionKind> kinds;
    for (const auto& k : rec.at("kinds")) kinds.push_back(*respond::parse_action_kind(k.get<std::string>()));
    return outcome_json(orchestrator_->execute_explicit(alert, kinds, ts));
  }
  return outcome_json(orchestrator_->handle_alert(alert, ts));
}

// ---------------------------------------------------------------------------
// Helpers

std::mutex& ManagementService::agent_lock(const std::string& agent_id) {
  std::lock_guard lock(agent_locks_mu_);
  auto& slot = agent_locks_[agent_id];
  if (!slot) slot = std::make_unique<std::mutex>();
  return *slot;
}

std::string ManagementService::agent_status(const AgentRecord& a, TimestampMs now) const {
  if (a.revoked) return "revoked";
  if (a.last_heartbeat_ts && now - *a.last_heartbeat_ts <= 3 * a.heartbeat_interval_ms) {
    return "online";
  }
  return "offline";
}

nlohmann::json ManagementService::agent_json(const AgentRecord& a, TimestampMs now) const {
  return {{"agent_id", a.agent_id},
          {"hostname", a.hostname},
          {"enrolled_at", format_rfc3339(a.enrolled_ts)},
          {"last_heartbeat",
           a.last_heartbeat_ts ? json(format_rfc3339(*a.last_heartbeat_ts)) : json(nullptr)},
          {"heartbeat_interval_ms", a.heartbeat_interval_ms},
          {"status", agent_status(a, now)},
          {"mode", a.mode},
          {"config_version", a.config_version},
          {"reported_config_version", a.reported_config_version},
          {"events_received", a.events_received},
          {"revoked", a.revoked}};
}

nlohmann::json ManagementService::asset_json(const AssetRecord& a) const {
  return {{"asset_id", a.asset_id},
          {"agent_id", a.agent_id},
          {"criticality", a.criticality},
          {"inventory", a.inventory},
          {"tags", a.tags}};
}

std::vector<Alert> ManagementService::alerts() const {
  std::lock_guard lock(state_mu_);
  std::vector<Alert> out;
  for (const auto& [id, a] : alerts_) out.push_back(a);
  return out;
}

respond::WorldLedger ManagementService::ledger() const { return orchestrator_->ledger(); }

std::size_t ManagementService::journal_records() const {
  std::lock_guard lock(journal_mu_);
  return journal_records_;
}

std::string ManagementService::issue_token_for(const std::string& user, auth::Role role) const {
  const auto now = clock_() / 1000;
  return auth::encode_jwt({user, role, now, now + config_.token_ttl_s}, jwt_secret_);
}

// ---------------------------------------------------------------------------
// Auth and agents

Response ManagementService::register_user(const Request& req, const Params&, const Principal& who) {
  const auto body = require_object(req);
  const auto user = require_string(body, "user");
  const auto password = require_string(body, "password");
  const auto role_text = body.value("role", std::string{"viewer"});
  const auto role = auth::parse_role(role_text);
  if (!role) fail(400, "validation_error", "role must be viewer, analyst or admin", "role");
  if (password.size() < 8) fail(400, "validation_error", "password must be >= 8 characters", "password");
  if (user.size() > 64) fail(400, "validation_error", "user name too long", "user");
  std::lock_guard lock(mutation_mu_);
  if (users_.find(user)) fail(409, "user_exists", "user '" + user + "' already exists");
  auto out = commit({{"type", "register"},
                     {"user", user},
                     {"role", role_text},
                     {"by", who.user},
                     {"password_hash", crypto::hash_password(
                                           password, crypto::ScryptParams{config_.scrypt_n, 8, 1})}});
  return {201, out};
}

Response ManagementService::login(const Request& req, const Params&, const Principal&) {
  const auto body = require_object(req);
  const auto user = body.value("user", std::string{});
  const auto password = body.value("password", std::string{});
  auto role = users_.authenticate(user, password);
  if (!role) fail(401, "invalid_credentials", "invalid user name or password");
  const auto now = clock_() / 1000;
  const auth::Claims claims{user, *role, now, now + config_.token_ttl_s};
  return {200,
          {{"token", auth::encode_jwt(claims, jwt_secret_)},
           {"role", std::string(auth::to_string(*role))},
           {"expires_at", format_rfc3339(claims.exp * 1000)}}};
}

Response ManagementService::enroll(const Request& req, const Params&, const Principal&) {
  const auto body = require_object(req);
  const auto agent_id = body.value("agent_id", std::string{});
  const auto token = body.value("enrollment_token", std::string{});
  const auto hostname = body.value("hostname", agent_id);
  const auto now = clock_();
  std::lock_guard lock(mutation_mu_);
  auto result = registry_.enroll(agent_id, token, now);
  if (!result.credentials) {
    switch (*result.error) {
      case protocol::EnrollError::bad_token:
        fail(401, "bad_token", "enrollment token rejected");
      case protocol::EnrollError::duplicate_agent:
        fail(409, "duplicate_agent", "agent '" + agent_id + "' is already enrolled");
      case protocol::EnrollError::invalid_agent_id:
        fail(400, "invalid_agent_id", "agent ids are 1-64 characters of [A-Za-z0-9._-]");
    }
  }
  persist_credentials();
  commit({{"type", "enroll"}, {"agent_id", agent_id}, {"hostname", hostname}, {"ts", now}});
  spdlog::info("enrolled agent {}", agent_id);
  return {201,
          {{"agent_id", agent_id},
           {"shared_secret", crypto::to_hex(result.credentials->shared_secret)},
           {"issued_ts", now},
           {"heartbeat_interval_ms", config_.heartbeat_interval_ms},
           {"skew_window_ms", config_.skew_ms}}};
}

Response ManagementService::revoke_agent(const Request&, const Params& p, const Principal& who) {
  std::lock_guard lock(mutation_mu_);
  if (!registry_.revoke(p.at(0))) fail(404, "not_found", "unknown agent '" + p.at(0) + "'");
  persist_credentials();
  return {200, commit({{"type", "revoke"}, {"agent_id", p.at(0)}, {"by", who.user}})};
}

Response ManagementService::list_agents(const Request& req, const Params&, const Principal&) {
  const auto status = query(req, "status");
  const auto now = clock_();
  auto items = json::array();
  std::lock_guard lock(state_mu_);
  for (const auto& [id, a] : agents_) {
    auto j = agent_json(a, now);
    if (status && j["status"] != *status) continue;
    items.push_back(std::move(j));
  }
  return {200, paginate(items, req)};
}

Response ManagementService::put_agent_config(const Request& req, const Params& p,
                                             const Principal& who) {
  auto body = require_object(req);
  json config = body.contains("config") ? body.at("config") : body;
  if (!config.is_object()) fail(400, "validation_error", "config must be an object", "config");
  auto positive = [&](const char* key) {
    if (!config.contains(key)) return;
    const auto& v = config.at(key);
    if (!v.is_number() || v.get<double>() <= 0) {
      fail(400, "validation_error", std::string(key) + " must be a positive number", key);
    }
  };
  positive("batch_max");
  positive("batch_flush_ms");
  positive("heartbeat_ms");
  positive("spool_max_bytes");
  if (config.contains("mode")) {
    const auto& m = config.at("mode");
    if (!m.is_string() || (m != "local" && m != "forward")) {
      fail(400, "validation_error", "mode must be 'local' or 'forward'", "mode");
    }
  }
  std::lock_guard lock(mutation_mu_);
  {
    std::lock_guard state(state_mu_);
    if (!agents_.contains(p.at(0))) fail(404, "not_found", "unknown agent '" + p.at(0) + "'");
  }
  return {200, commit({{"type", "agent_config"}, {"agent_id", p.at(0)}, {"config", config},
                       {"by", who.user}})};
}

// ---------------------------------------------------------------------------
// Assets

Response ManagementService::list_assets(const Request& req, const Params&, const Principal&) {
  auto items = json::array();
  std::lock_guard lock(state_mu_);
  for (const auto& [id, a] : assets_) items.push_back(asset_json(a));
  return {200, paginate(items, req)};
}

Response ManagementService::put_assets(const Request& req, const Params&, const Principal& who) {
  auto body = parse_body(req);
  json list;
  if (body.is_array()) {
    list = body;
  } else if (body.is_object() && body.contains("assets")) {
    list = body.at("assets");
  } else if (body.is_object()) {
    list = json::array({body});
  }
  if (!list.is_array() || list.empty()) fail(400, "validation_error", "no assets given", "assets");
  auto clean = json::array();
  for (const auto& a : list) {
    if (!a.is_object()) fail(400, "validation_error", "each asset must be an object");
    const auto id = require_string(a, "asset_id");
    const double crit = a.value("criticality", 0.5);
    if (!(crit >= 0.0 && crit <= 1.0)) {
      fail(400, "validation_error", "criticality must be in [0, 1]", "criticality");
    }
    json tags = a.value("tags", json::array());
    if (!tags.is_array()) fail(400, "validation_error", "tags must be a list", "tags");
    clean.push_back({{"asset_id", id},
                     {"agent_id", a.value("agent_id", std::string{})},
                     {"criticality", crit},
                     {"inventory", a.value("inventory", json::object())},
                     {"tags", tags}});
  }
  std::lock_guard lock(mutation_mu_);
  return {200, commit({{"type", "assets"}, {"assets", clean}, {"by", who.user}})};
}

Response ManagementService::asset_status(const Request&, const Params& p, const Principal&) {
  const auto now = clock_();
  std::lock_guard lock(state_mu_);
  auto it = assets_.find(p.at(0));
  if (it == assets_.end()) fail(404, "not_found", "unknown asset '" + p.at(0) + "'");
  const auto& asset = it->second;
  const auto agent_id = asset.agent_id.empty() ? asset.asset_id : asset.agent_id;
  json out{{"asset", asset_json(asset)}};
  auto ag = agents_.find(agent_id);
  out["agent"] = ag == agents_.end() ? json(nullptr) : agent_json(ag->second, now);
  out["status"] = ag == agents_.end() ? "unmanaged" : agent_status(ag->second, now);
  std::size_t open = 0;
  for (const auto& [id, a] : alerts_) {
    if (a.agent_id == agent_id && (a.status == AlertStatus::open || a.status == AlertStatus::acknowledged)) {
      ++open;
    }
  }
  out["open_alerts"] = open;
  out["isolated"] = orchestrator_->ledger().contains(respond::ActionKind::isolate_asset, agent_id);
  return {200, out};
}

// ---------------------------------------------------------------------------
// Events

Response ManagementService::submit_events(const Request& req, const Params&, const Principal&) {
  protocol::Envelope env;
  try {
    env = protocol::envelope_from_json(parse_body(req));
  } catch (const Error& e) {
    fail(400, "malformed_envelope", e.what());
  }
  const auto now = clock_();
  protocol::Payload payload;
  std::lock_guard agent_guard(agent_lock(env.agent_id));
  auto verdict = registry_.verify(env, now, [&] {
    try {
      payload = protocol::decode_payload(env.body);
    } catch (const Error& e) {
      fail(400, "malformed_batch", e.what());
    }
    for (const auto& e : payload.events) {
      if (e.agent_id != env.agent_id) {
        fail(400, "malformed_batch", "event " + e.id + " belongs to another agent", e.id);
      }
    }
    for (const auto& a : payload.alerts) {
      if (a.agent_id != env.agent_id || a.id.empty()) {
        fail(400, "malformed_batch", "alert '" + a.id + "' is not from this agent", a.id);
      }
      for (const auto& t : a.technique_ids) {
        if (!taxonomy_->lookup_technique(t)) {
          fail(400, "malformed_batch", "alert " + a.id + " carries unknown technique " + t, t);
        }
      }
      a.factors.validate();
      a.weights.validate();
    }
  });
  if (!verdict.accepted()) {
    const auto reason = std::string(protocol::to_string(*verdict.rejection));
    spdlog::warn("envelope from '{}' rejected: {}", env.agent_id, reason);
    fail(401, reason, "envelope rejected", reason);
  }
  auto events = json::array();
  for (const auto& e : payload.events) events.push_back(events::to_json(e));
  auto alerts = json::array();
  for (const auto& a : payload.alerts) alerts.push_back(to_json(a));
  return {200, commit({{"type", "envelope"},
                       {"agent_id", env.agent_id},
                       {"seq", env.seq},
                       {"ts", now},
                       {"kind", payload.kind},
                       {"mode", payload.mode},
                       {"events", std::move(events)},
                       {"alerts", std::move(alerts)},
                       {"status", payload.status}})};
}

Response ManagementService::query_events(const Request& req, const Params&, const Principal&) {
  const auto agent = query(req, "agent");
  const auto from = query_time(req, "from");
  const auto to = query_time(req, "to");
  const auto category_text = query(req, "category");
  std::optional<events::Category> category;
  if (category_text) {
    category = events::parse_category(*category_text);
    if (!category) fail(400, "validation_error", "unknown category '" + *category_text + "'", "category");
  }
  std::vector<events::SystemEvent> hits;
  {
    std::lock_guard lock(state_mu_);
    for (const auto& [id, list] : events_) {
      if (agent && id != *agent) continue;
      for (const auto& e : list) {
        if (from && e.ts < *from) continue;
        if (to && e.ts > *to) continue;
        if (category && e.category != *category) continue;
        hits.push_back(e);
      }
    }
  }
  events::sort_events(hits);
  auto items = json::array();
  for (const auto& e : hits) items.push_back(events::to_json(e));
  return {200, paginate(items, req)};
}

// ---------------------------------------------------------------------------
// Alerts

Response ManagementService::list_alerts(const Request& req, const Params&, const Principal&) {
  const auto status = query(req, "status");
  const auto tier = query(req, "tier");
  const auto agent = query(req, "agent_id");
  if (status && !parse_alert_status(*status)) fail(400, "validation_error", "unknown status", "status");
  if (tier && !parse_level(*tier)) fail(400, "validation_error", "unknown tier", "tier");
  std::vector<const Alert*> hits;
  std::lock_guard lock(state_mu_);
  for (const auto& [id, a] : alerts_) {
    if (status && a.status != *parse_alert_status(*status)) continue;
    if (tier && a.tier != *parse_level(*tier)) continue;
    if (agent && a.agent_id != *agent) continue;
    hits.push_back(&a);
  }
  std::stable_sort(hits.begin(), hits.end(), [](const Alert* x, const Alert* y) {
    return x->created_ts > y->created_ts;
  });
  auto items = json::array();
  for (const auto* a : hits) items.push_back(to_json(*a));
  return {200, paginate(items, req)};
}

Response ManagementService::get_alert(const Request&, const Params& p, const Principal&) {
  std::lock_guard lock(state_mu_);
  auto it = alerts_.find(p.at(0));
  if (it == alerts_.end()) fail(404, "not_found", "unknown alert '" + p.at(0) + "'");
  auto out = to_json(it->second);
  auto actions = json::array();
  for (const auto& a : orchestrator_->actions_for(it->first)) actions.push_back(respond::to_json(a));
  out["responses"] = std::move(actions);
  return {200, out};
}

Response ManagementService::create_alert(const Request& req, const Params&, const Principal& who) {
  const auto body = require_object(req);
  const auto agent_id = require_string(body, "agent_id");
  if (!body.contains("technique_ids") || !body.at("technique_ids").is_array() ||
      body.at("technique_ids").empty()) {
    fail(400, "validation_error", "technique_ids must be a non-empty list", "technique_ids");
  }
  for (const auto& t : body.at("technique_ids")) {
    if (!t.is_string() || !taxonomy_->lookup_technique(t.get<std::string>())) {
      fail(400, "unknown_technique", "technique " + t.dump() + " does not resolve", t);
    }
  }
  const auto factors = risk::RiskFactors::from_json(body.value("factors", json::object()));
  factors.validate();
  json alert{{"agent_id", agent_id},
             {"technique_ids", body.at("technique_ids")},
             {"factors", factors.to_json()}};
  if (body.contains("weights")) {
    risk::RiskWeights::from_json(body.at("weights")).validate();
    alert["weights"] = body.at("weights");
  }
  if (body.contains("note")) alert["note"] = body.at("note");
  std::lock_guard lock(mutation_mu_);
  return {201, commit({{"type", "alert_manual"}, {"alert", alert}, {"user", who.user}})};
}

Response ManagementService::patch_alert(const Request& req, const Params& p, const Principal& who) {
  const auto body = require_object(req);
  json rec{{"type", "alert_patch"}, {"id", p.at(0)}, {"user", who.user}};
  std::lock_guard lock(mutation_mu_);
  {
    std::lock_guard state(state_mu_);
    auto it = alerts_.find(p.at(0));
    if (it == alerts_.end()) fail(404, "not_found", "unknown alert '" + p.at(0) + "'");
    if (body.contains("status")) {
      const auto& s = body.at("status");
      auto to = s.is_string() ? parse_alert_status(s.get<std::string>()) : std::nullopt;
      if (!to) fail(400, "validation_error", "unknown status " + s.dump(), "status");
      if (!legal_transition(it->second.status, *to)) {
        fail(409, "illegal_transition",
             "cannot move alert from " + std::string(to_string(it->second.status)) + " to " +
                 std::string(to_string(*to)),
             {{"from", to_string(it->second.status)}, {"to", to_string(*to)}});
      }
      rec["status"] = s;
    }
  }
  if (body.contains("assignee")) {
    const auto& a = body.at("assignee");
    if (!a.is_null() && !a.is_string()) fail(400, "validation_error", "assignee must be a string", "assignee");
    rec["assignee"] = a;
  }
  if (body.contains("note")) {
    if (!body.at("note").is_string()) fail(400, "validation_error", "note must be a string", "note");
    rec["note"] = body.at("note");
  }
  if (rec.size() == 3) fail(400, "validation_error", "nothing to update");
  return {200, commit(rec)};
}

// ---------------------------------------------------------------------------
// Risk

Response ManagementService::risk_score(const Request& req, const Params&, const Principal&) {
  const auto body = require_object(req);
  const auto factors = risk::RiskFactors::from_json(body.value("factors", body));
  const auto weights = body.contains("weights") ? risk::RiskWeights::from_json(body.at("weights"))
                                                : config_.pipeline.weights;
  const double score = risk::compute_risk(factors, weights);
  return {200,
          {{"risk_score", score},
           {"tier", to_string(risk::classify_risk(score, config_.pipeline.tiers))},
           {"factors", factors.to_json()},
           {"weights", weights.to_json()}}};
}

Response ManagementService::risk_asset(const Request&, const Params& p, const Principal&) {
  std::lock_guard lock(state_mu_);
  std::string agent_id = p.at(0);
  double criticality = 0.5;
  auto it = assets_.find(p.at(0));
  if (it != assets_.end()) {
    criticality = it->second.criticality;
    if (!it->second.agent_id.empty()) agent_id = it->second.agent_id;
  } else if (!agents_.contains(p.at(0))) {
    fail(404, "not_found", "unknown asset '" + p.at(0) + "'");
  }
  std::size_t total = 0;
  std::size_t open = 0;
  const Alert* top = nullptr;
  for (const auto& [id, a] : alerts_) {
    if (a.agent_id != agent_id) continue;
    ++total;
    const bool active = a.status == AlertStatus::open || a.status == AlertStatus::acknowledged;
    if (!active) continue;
    ++open;
    if (!top || a.risk_score > top->risk_score) top = &a;
  }
  return {200,
          {{"asset_id", p.at(0)},
           {"agent_id", agent_id},
           {"criticality", criticality},
           {"alert_count", total},
           {"open_alerts", open},
           {"max_risk", top ? top->risk_score : 0.0},
           {"tier", to_string(top ? top->tier : Level::low)},
           {"top_alert", top ? json(top->id) : json(nullptr)}}};
}

// ---------------------------------------------------------------------------
// Responses

Response ManagementService::trigger_response(const Request& req, const Params&,
                                             const Principal& who) {
  const auto body = require_object(req);
  json rec{{"type", "response"}, {"user", who.user}};
  if (body.contains("approve")) {
    const auto& ids = body.at("approve");
    if (!ids.is_array() || ids.empty()) {
      fail(400, "validation_error", "approve must be a non-empty list of action ids", "approve");
    }
    for (const auto& id : ids) {
      if (!id.is_string()) fail(400, "validation_error", "action ids are strings", "approve");
    }
    rec["approve"] = ids;
    if (body.contains("alert_id")) rec["alert_id"] = body.at("alert_id");
  } else {
    const auto alert_id = require_string(body, "alert_id");
    {
      std::lock_guard state(state_mu_);
      if (!alerts_.contains(alert_id)) fail(404, "not_found", "unknown alert '" + alert_id + "'");
    }
    rec["alert_id"] = alert_id;
    const json kinds = body.value("kinds", json("policy"));
    if (kinds.is_array()) {
      if (who.role != auth::Role::admin) {
        fail(403, "forbidden", "explicit response kinds bypass the policy and need admin",
             "admin");
      }
      if (kinds.empty()) fail(400, "validation_error", "kinds must not be empty", "kinds");
      for (const auto& k : kinds) {
        if (!k.is_string() || !respond::parse_action_kind(k.get<std::string>())) {
          fail(400, "validation_error", "unknown action kind " + k.dump(), "kinds");
        }
      }
      rec["kinds"] = kinds;
    } else if (kinds != "policy") {
      fail(400, "validation_error", "kinds must be \"policy\" or a list", "kinds");
    }
  }
  std::lock_guard lock(mutation_mu_);
  return {200, commit(rec)};
}

Response ManagementService::list_responses(const Request& req, const Params&, const Principal&) {
  const auto alert_id = query(req, "alert_id");
  std::vector<respond::ActionResult> results;
  auto actions = json::array();
  if (alert_id) {
    results = orchestrator_->results_for(*alert_id);
    for (const auto& a : orchestrator_->actions_for(*alert_id)) actions.push_back(respond::to_json(a));
  } else {
    results = orchestrator_->all_results();
  }
  auto items = json::array();
  for (const auto& r : results) items.push_back(result_json(r));
  auto out = paginate(items, req);
  if (alert_id) out["actions"] = std::move(actions);
  json metrics = json::object();
  for (const auto& [kind, m] : respond::response_metrics(results)) {
    metrics[std::string(respond::to_string(kind))] = {{"total", m.total},
                                                       {"succeeded", m.succeeded},
                                                       {"success_rate", m.success_rate},
                                                       {"mean_duration_ms", m.mean_duration_ms}};
  }
  out["metrics"] = std::move(metrics);
  out["ledger"] = orchestrator_->ledger().to_json();
  return {200, out};
}

Response ManagementService::get_policy(const Request&, const Params&, const Principal&) {
  return {200, orchestrator_->policy().to_json()};
}

Response ManagementService::put_policy(const Request& req, const Params&, const Principal& who) {
  const auto body = parse_body(req);
  auto policy = respond::ResponsePolicy::from_json(body);
  policy.validate(*taxonomy_);
  std::lock_guard lock(mutation_mu_);
  return {200, commit({{"type", "policy"}, {"policy", policy.to_json()}, {"by", who.user}})};
}

// ---------------------------------------------------------------------------
// ML

Response ManagementService::ml_predict(const Request& req, const Params&, const Principal&) {
  const auto body = require_object(req);
  auto forest = pipeline_->forest();
  if (!forest || forest->empty()) fail(503, "model_unavailable", "no anomaly model is loaded");
  const auto it = body.find("features");
  if (it == body.end() || !it->is_array()) {
    fail(400, "validation_error", "features must be a list of numbers", "features");
  }
  if (it->size() != events::kFeatureCount) {
    fail(400, "validation_error",
         "features must have " + std::to_string(events::kFeatureCount) + " values, got " +
             std::to_string(it->size()),
         {{"expected", events::kFeatureCount}, {"got", it->size()}});
  }
  events::FeatureVector fv;
  for (std::size_t i = 0; i < fv.values.size(); ++i) {
    const auto& v = (*it)[i];
    if (!v.is_number() || !std::isfinite(v.get<double>())) {
      fail(400, "validation_error", "feature " + std::to_string(i) + " is not a finite number", i);
    }
    fv.values[i] = v.get<double>();
  }
  const double score = forest->score(fv.values);
  auto tags = json::array();
  for (const auto& t : classifier_->tag_features(fv)) {
    if (taxonomy_->lookup_technique(t)) tags.push_back(t);
  }
  return {200,
          {{"anomaly_score", score},
           {"threshold", config_.pipeline.anomaly_threshold},
           {"anomalous", score >= config_.pipeline.anomaly_threshold},
           {"technique_tags", tags}}};
}

Response ManagementService::ml_metrics(const Request&, const Params&, const Principal&) {
  json by_engine = json::object();
  json by_tier = json::object();
  std::size_t count = 0;
  {
    std::lock_guard lock(state_mu_);
    for (const auto& [id, a] : alerts_) {
      ++count;
      by_tier[std::string(to_string(a.tier))] = by_tier.value(std::string(to_string(a.tier)), 0) + 1;
      for (const auto& d : a.detections) {
        const auto key = std::string(detect::to_string(d.engine));
        by_engine[key] = by_engine.value(key, 0) + 1;
      }
    }
  }
  const auto c = pipeline_->counters();
  const auto latency = pipeline_->latency_samples_ms();
  return {200,
          {{"alerts", count},
           {"alerts_by_tier", by_tier},
           {"detections_by_engine", by_engine},
           {"detections_total", pipeline_->detections_total()},
           {"ingest",
            {{"read", c.read},
             {"kept", c.kept},
             {"dropped_noise", c.dropped_noise},
             {"dropped_dup", c.dropped_dup},
             {"late_dropped", pipeline_->late_dropped()}}},
           {"response_latency_samples", latency.size()},
           {"classifier_degraded", pipeline_->classifier_degraded()}}};
}

Response ManagementService::ml_status(const Request&, const Params&, const Principal&) {
  auto forest = pipeline_->forest();
  json out{{"loaded", forest && !forest->empty()},
           {"classifier", classifier_->name()},
           {"classifier_enabled", config_.pipeline.classifier_enabled},
           {"classifier_degraded", pipeline_->classifier_degraded()},
           {"threshold", config_.pipeline.anomaly_threshold}};
  if (forest && !forest->empty()) {
    out["model"] = {{"n_trees", forest->trees().size()},
                    {"psi", forest->psi()},
                    {"c_psi", forest->c_psi()},
                    {"height_limit", forest->height_limit()},
                    {"feature_count", forest->feature_count()},
                    {"seed", forest->seed()}};
  }
  std::lock_guard lock(state_mu_);
  out["model_path"] = model_path_ ? json(*model_path_) : json(nullptr);
  return {200, out};
}

Response ManagementService::ml_model(const Request& req, const Params&, const Principal& who) {
  const auto body = require_object(req);
  const auto path = require_string(body, "path");
  try {
    auto forest = detect::IsolationForest::load(path);
    if (forest.feature_count() != events::kFeatureCount) throw Error("wrong feature count");
  } catch (const std::exception& e) {
    fail(400, "invalid_model", std::string("cannot load model: ") + e.what(), path);
  }
  std::lock_guard lock(mutation_mu_);
  return {200, commit({{"type", "model"}, {"path", path}, {"by", who.user}})};
}

// ---------------------------------------------------------------------------
// HTTP front end

HttpServer::HttpServer(ManagementService& service)
    : service_(service), http_(std::make_unique<httplib::Server>()) {
  auto handler = [this](const httplib::Request& hreq, httplib::Response& hres) {
    Request req;
    req.method = hreq.method;
    req.path = hreq.path;
    for (const auto& [k, v] : hreq.params) req.query.emplace(k, v);
    req.authorization = hreq.get_header_value("Authorization");
    req.body = hreq.body;
    auto res = service_.handle(req);
    hres.status = res.status;
    hres.set_content(res.body.dump(), "application/json");
  };
  http_->Get(".*", handler);
  http_->Post(".*", handler);
  http_->Put(".*", handler);
  http_->Patch(".*", handler);
  http_->Delete(".*", handler);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start(const std::string& host, int port) {
  if (port == 0) {
    port_ = http_->bind_to_any_port(host);
  } else if (http_->bind_to_port(host, port)) {
    port_ = port;
  } else {
    port_ = -1;
  }
  if (port_ <= 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return port_;
}

void HttpServer::stop() {
  if (http_) http_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace edr::server
