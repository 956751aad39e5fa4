#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "edr/crypto.hpp"
#include "edr/events.hpp"
#include "edr/protocol.hpp"
#include "edr/server.hpp"
#include "edr/taxonomy.hpp"

namespace edr::testutil {

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (std::filesystem::temp_directory_path() / "edr-test-XXXXXX").string();
    if (!mkdtemp(tmpl.data())) throw Error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

inline std::filesystem::path data_path(const std::string& name) {
  return std::filesystem::path(EDR_DATA_DIR) / name;
}

inline const taxonomy::Taxonomy& bundled_taxonomy() {
  static const auto tax = taxonomy::load_taxonomy(data_path("attck_min.json"));
  return tax;
}

inline std::shared_ptr<const taxonomy::Taxonomy> shared_taxonomy() {
  static const auto tax = std::make_shared<taxonomy::Taxonomy>(bundled_taxonomy());
  return tax;
}

inline constexpr TimestampMs kT0 = 1'740'992'400'000;  // 2025-03-03T09:00:00Z

inline events::SystemEvent make_event(std::string id, TimestampMs ts, events::Category cat,
                                      std::string action, std::string image = "C:\\Windows\\explorer.exe",
                                      std::string object = {}, std::string agent = "agent-001") {
  events::SystemEvent e;
  e.id = std::move(id);
  e.ts = ts;
  e.agent_id = std::move(agent);
  e.category = cat;
  e.action = std::move(action);
  e.subject.pid = 100;
  e.subject.ppid = 4;
  e.subject.image = std::move(image);
  e.subject.cmdline = e.subject.image;
  e.subject.user = "alice";
  e.object = std::move(object);
  return e;
}

/// In-process management service on a temp data dir with a controllable clock.
struct ServerFixture {
  static constexpr const char* kBootstrap = "bootstrap-token-0001";
  static constexpr const char* kAdminPassword = "admin-password-1";

  TempDir dir;
  std::shared_ptr<std::atomic<TimestampMs>> now = std::make_shared<std::atomic<TimestampMs>>(0);
  server::ServerConfig config;
  std::unique_ptr<server::ManagementService> service;

  ServerFixture() {
    config = server::ServerConfig::from_json(nlohmann::json::object());
    config.data_dir = dir.path() / "server";
    config.bootstrap_token = kBootstrap;
    config.admin_password = kAdminPassword;
    config.jwt_secret = "test-jwt-secret-0123456789";
    config.scrypt_n = 1024;
    start();
  }

  /// 0 means wall clock.
  void set_now(TimestampMs t) { now->store(t); }
  TimestampMs clock() const {
    const auto t = now->load();
    return t == 0 ? wall_clock_ms() : t;
  }

  void start() {
    auto n = now;
    service = std::make_unique<server::ManagementService>(config, [n] {
      const auto t = n->load();
      return t == 0 ? wall_clock_ms() : t;
    });
  }
  void restart() {
    service.reset();
    start();
  }

  server::Response call(const std::string& method, const std::string& path,
                        const nlohmann::json& body = nullptr, const std::string& token = {},
                        std::map<std::string, std::string> query = {}) {
    server::Request req;
    req.method = method;
    req.path = path;
    req.query = std::move(query);
    if (!token.empty()) req.authorization = "Bearer " + token;
    if (!body.is_null()) req.body = body.dump();
    return service->handle(req);
  }

  std::string login(const std::string& user, const std::string& password) {
    auto r = call("POST", "/api/v1/auth/login", {{"user", user}, {"password", password}});
    if (r.status != 200) throw Error("login failed: " + r.body.dump());
    return r.body.at("token").get<std::string>();
  }
  std::string admin_token() { return login("admin", kAdminPassword); }

  std::string make_user(const std::string& user, const std::string& role) {
    const std::string password = user + "-password";
    auto r = call("POST", "/api/v1/auth/register",
                  {{"user", user}, {"password", password}, {"role", role}}, admin_token());
    if (r.status != 201) throw Error("register failed: " + r.body.dump());
    return login(user, password);
  }

  protocol::AgentCredentials enroll(const std::string& agent_id) {
    auto r = call("POST", "/api/v1/agents/enroll",
                  {{"agent_id", agent_id}, {"enrollment_token", kBootstrap}, {"hostname", agent_id}});
    if (r.status != 201) throw Error("enroll failed: " + r.body.dump());
    return protocol::credentials_from_json(r.body);
  }

  server::Response submit(const protocol::AgentCredentials& creds, std::uint64_t seq,
                          const protocol::Payload& payload) {
    auto env = protocol::sign_encoded(protocol::encode_payload(payload), creds, seq, clock(),
                                      protocol::make_nonce());
    return call("POST", "/api/v1/events", protocol::to_json(env));
  }
};

}  // namespace edr::testutil
