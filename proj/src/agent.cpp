#include "edr/agent.hpp"

#include <sys/resource.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <set>
#include <thread>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "edr/bounded_queue.hpp"
#include "edr/crypto.hpp"
#include "edr/server.hpp"

namespace edr::agent {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) return base / path;
  return path;
}

TimestampMs steady_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::size_t peak_rss_kb() {
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  return static_cast<std::size_t>(usage.ru_maxrss);
}

std::string host_name() {
  char buf[256] = {};
  if (gethostname(buf, sizeof buf - 1) != 0) return "unknown";
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

AgentConfig AgentConfig::from_json(const nlohmann::json& obj, const std::filesystem::path& base) {
  AgentConfig c;
  const std::filesystem::path data(EDR_DATA_DIR);
  c.taxonomy_path = data / "attck_min.json";
  c.rules_path = data / "rules.json";
  c.noise_rules_path = data / "noise_rules.json";
  const json a = obj.value("agent", json::object());
  c.agent_id = a.value("agent_id", c.agent_id);
  c.server_url = a.value("server_url", c.server_url);
  if (a.contains("state_dir")) c.state_dir = resolve(base, a.at("state_dir").get<std::string>());
  c.enrollment_token = a.value("enrollment_token", c.enrollment_token);
  c.mode = a.value("mode", c.mode);
  c.batch_max = a.value("batch_max", c.batch_max);
  c.batch_flush_ms = static_cast<TimestampMs>(a.value("batch_flush_sec", 1.0) * 1000.0);
  c.heartbeat_ms = static_cast<TimestampMs>(a.value("heartbeat_sec", 30.0) * 1000.0);
  c.spool_max_bytes = a.value("spool_max_bytes", c.spool_max_bytes);
  c.backoff_initial_ms = static_cast<TimestampMs>(a.value("backoff_initial_sec", 0.5) * 1000.0);
  c.backoff_cap_ms = static_cast<TimestampMs>(a.value("backoff_cap_sec", 60.0) * 1000.0);
  c.drain_timeout_ms = static_cast<TimestampMs>(a.value("drain_timeout_sec", 120.0) * 1000.0);
  c.queue_capacity = a.value("queue_capacity", c.queue_capacity);
  if (a.contains("source")) {
    const auto& s = a.at("source");
    c.source.kind = s.value("kind", c.source.kind);
    if (s.contains("path")) c.source.path = resolve(base, s.at("path").get<std::string>());
    if (s.contains("rate") && s.at("rate").is_number()) c.source.rate = s.at("rate").get<double>();
    c.source.scenario = s.value("scenario", c.source.scenario);
    c.source.n = s.value("n", c.source.n);
    c.source.anomaly_frac = s.value("anomaly_frac", c.source.anomaly_frac);
    c.source.seed = s.value("seed", c.source.seed);
  }
  if (obj.contains("taxonomy_path")) c.taxonomy_path = resolve(base, obj.at("taxonomy_path").get<std::string>());
  if (obj.contains("rules_path")) c.rules_path = resolve(base, obj.at("rules_path").get<std::string>());
  if (obj.contains("noise_rules_path")) {
    c.noise_rules_path = resolve(base, obj.at("noise_rules_path").get<std::string>());
  }
  if (obj.contains("model_path") && obj.at("model_path").is_string()) {
    c.model_path = resolve(base, obj.at("model_path").get<std::string>());
  }
  c.pipeline = pipeline::PipelineOptions::from_json(obj);
  if (const char* t = std::getenv("EDR_BOOTSTRAP_TOKEN"); t && *t) c.enrollment_token = t;
  return c;
}

void AgentConfig::validate() const {
  if (agent_id.empty()) throw Error("agent.agent_id must not be empty");
  if (mode != "local" && mode != "forward") throw Error("agent.mode must be 'local' or 'forward'");
  if (batch_max < 1) throw Error("agent.batch_max must be >= 1");
  if (batch_flush_ms <= 0) throw Error("agent.batch_flush_sec must be positive");
  if (heartbeat_ms <= 0) throw Error("agent.heartbeat_sec must be positive");
  if (spool_max_bytes == 0) throw Error("agent.spool_max_bytes must be positive");
  if (backoff_initial_ms <= 0 || backoff_cap_ms < backoff_initial_ms) {
    throw Error("agent.backoff_initial_sec must be positive and <= backoff_cap_sec");
  }
  if (source.kind != "replay" && source.kind != "synth") {
    throw Error("agent.source.kind must be 'replay' or 'synth'");
  }
  if (source.kind == "replay" && source.path.empty()) throw Error("agent.source.path is required for replay");
  if (source.rate && *source.rate <= 0) throw Error("agent.source.rate must be positive");
  if (source.anomaly_frac < 0.0 || source.anomaly_frac > 1.0) {
    throw Error("agent.source.anomaly_frac must be in [0, 1]");
  }
  pipeline.validate();
}

// ---------------------------------------------------------------------------
// Transports

HttpTransport::HttpTransport(std::string base_url, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)), timeout_(timeout) {}

Transport::Reply HttpTransport::post(const std::string& path, const nlohmann::json& body) {
  httplib::Client client(base_url_);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  client.set_write_timeout(timeout_);
  auto res = client.Post(path, body.dump(), "application/json");
  Reply reply;
  if (!res) {
    reply.error = httplib::to_string(res.error());
    return reply;
  }
  reply.reached = true;
  reply.status = res->status;
  reply.body = json::parse(res->body, nullptr, false);
  if (reply.body.is_discarded()) reply.body = json::object();
  return reply;
}

Transport::Reply LoopbackTransport::post(const std::string& path, const nlohmann::json& body) {
  server::Request req;
  req.method = "POST";
  req.path = path;
  req.body = body.dump();
  auto res = service_.handle(req);
  return {true, res.status, std::move(res.body), {}};
}

Transport::Reply FlakyTransport::post(const std::string& path, const nlohmann::json& body) {
  if (down_ && down_()) {
    ++refused_;
    return {false, 0, json::object(), "connection refused (simulated)"};
  }
  return inner_->post(path, body);
}

// ---------------------------------------------------------------------------
// Spool

Spool::Spool(std::filesystem::path dir, std::size_t max_bytes)
    : dir_(std::move(dir)), max_bytes_(max_bytes) {
  std::filesystem::create_directories(dir_);
  std::vector<std::uint64_t> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir_)) {
    if (entry.path().extension() != ".batch") continue;
    try {
      ids.push_back(std::stoull(entry.path().stem().string()));
    } catch (const std::exception&) {
    }
  }
  std::sort(ids.begin(), ids.end());
  for (auto id : ids) {
    std::ifstream in(file_for(id));
    auto doc = json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) {
      spdlog::warn("spool file {} is unreadable, discarded", file_for(id).string());
      std::filesystem::remove(file_for(id));
      continue;
    }
    const auto size = std::filesystem::file_size(file_for(id));
    const auto n = doc.value("events", json::array()).size();
    entries_.push_back({id, static_cast<std::size_t>(size), n});
    bytes_ += size;
    events_ += n;
    next_id_ = id + 1;
  }
}

std::filesystem::path Spool::file_for(std::uint64_t id) const {
  char name[32];
  std::snprintf(name, sizeof name, "%012llu.batch", static_cast<unsigned long long>(id));
  return dir_ / name;
}

void Spool::drop_front_locked() {
  const auto& e = entries_[head_];
  std::filesystem::remove(file_for(e.id));
  bytes_ -= e.bytes;
  events_ -= e.events;
  ++head_;
  if (head_ > 64 && head_ * 2 > entries_.size()) {
    entries_.erase(entries_.begin(), entries_.begin() + static_cast<std::ptrdiff_t>(head_));
    head_ = 0;
  }
}

void Spool::push(const nlohmann::json& body, std::size_t events) {
  const auto text = body.dump();
  std::lock_guard lock(mu_);
  while (head_ < entries_.size() && bytes_ + text.size() > max_bytes_) {
    dropped_events_ += entries_[head_].events;
    ++dropped_batches_;
    drop_front_locked();
  }
  if (text.size() > max_bytes_) {
    // A single batch larger than the whole spool cannot be kept.
    dropped_events_ += events;
    ++dropped_batches_;
    return;
  }
  const auto id = next_id_++;
  const auto path = file_for(id);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw Error("cannot write spool file " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
  entries_.push_back({id, text.size(), events});
  bytes_ += text.size();
  events_ += events;
}

std::optional<Spool::Batch> Spool::front() const {
  std::lock_guard lock(mu_);
  if (head_ >= entries_.size()) return std::nullopt;
  const auto& e = entries_[head_];
  std::ifstream in(file_for(e.id));
  auto doc = json::parse(in, nullptr, false);
  if (doc.is_discarded()) doc = json{{"events", json::array()}, {"alerts", json::array()}};
  return Batch{e.id, std::move(doc), e.events};
}

void Spool::pop() {
  std::lock_guard lock(mu_);
  if (head_ < entries_.size()) drop_front_locked();
}

bool Spool::empty() const {
  std::lock_guard lock(mu_);
  return head_ >= entries_.size();
}
std::size_t Spool::batches() const {
  std::lock_guard lock(mu_);
  return entries_.size() - head_;
}
std::size_t Spool::events() const {
  std::lock_guard lock(mu_);
  return events_;
}
std::size_t Spool::bytes() const {
  std::lock_guard lock(mu_);
  return bytes_;
}
std::size_t Spool::dropped_events() const {
  std::lock_guard lock(mu_);
  return dropped_events_;
}
std::size_t Spool::dropped_batches() const {
  std::lock_guard lock(mu_);
  return dropped_batches_;
}

// ---------------------------------------------------------------------------
// Seq persistence

std::uint64_t load_seq(const std::filesystem::path& state_dir) {
  std::ifstream in(state_dir / "seq");
  std::uint64_t seq = 0;
  if (in >> seq) return seq;
  return 0;
}

void store_seq(const std::filesystem::path& state_dir, std::uint64_t seq) {
  const auto path = state_dir / "seq";
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << seq << '\n';
    if (!out) throw Error("cannot persist seq to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Summary

nlohmann::json RunSummary::to_json() const {
  return {{"agent_id", agent_id},
          {"mode", mode},
          {"read", read},
          {"kept", kept()},
          {"ingest_kept", ingest_kept},
          {"dropped_noise", dropped_noise},
          {"dropped_dup", dropped_dup},
          {"skipped", skipped},
          {"late_dropped", late_dropped},
          {"spool_dropped", spool_dropped},
          {"delivered", delivered},
          {"in_spool", in_spool},
          {"spool_carried", spool_carried},
          {"rejected_events", rejected_events},
          {"alerts_raised", alerts_raised},
          {"alert_uploads", alert_uploads},
          {"envelopes_sent", envelopes_sent},
          {"envelopes_accepted", envelopes_accepted},
          {"upload_failures", upload_failures},
          {"heartbeats_sent", heartbeats_sent},
          {"rejections", rejections},
          {"server_alert_ids", server_alert_ids},
          {"config_version", config_version},
          {"last_seq", last_seq},
          {"elapsed_s", elapsed_s},
          {"events_per_sec", elapsed_s > 0 ? static_cast<double>(read) / elapsed_s : 0.0},
          {"peak_rss_kb", peak_rss_kb},
          {"balanced", balanced()}};
}

// ---------------------------------------------------------------------------
// Agent

struct Agent::Impl {
  struct Item {
    std::optional<events::SystemEvent> event;
    std::optional<Alert> alert;
  };

  AgentConfig config;
  std::shared_ptr<Transport> transport;
  std::optional<protocol::AgentCredentials> creds;
  std::atomic<bool> stop{false};

  // Uploader-owned state.
  std::unique_ptr<Spool> spool;
  std::uint64_t seq = 0;
  TimestampMs backoff_ms = 0;
  TimestampMs next_attempt = 0;
  std::int64_t config_version = 0;
  std::atomic<bool> local_mode{true};
  RunSummary summary;
  std::set<std::string> server_alerts;

  Impl(AgentConfig c, std::shared_ptr<Transport> t)
      : config(std::move(c)), transport(std::move(t)) {}

  json status_body() const {
    return {{"config_version", config_version},
            {"heartbeat_ms", config.heartbeat_ms},
            {"batch_max", config.batch_max},
            {"mode", local_mode ? "local" : "forward"},
            {"read", summary.read},
            {"delivered", summary.delivered},
            {"in_spool", spool ? spool->events() : 0},
            {"spool_dropped", spool ? spool->dropped_events() : 0}};
  }

  Transport::Reply send(const std::string& kind, const json& events, const json& alerts) {
    const json doc{{"kind", kind},
                   {"mode", local_mode ? "local" : "forward"},
                   {"events", events},
                   {"alerts", alerts},
                   {"status", status_body()}};
    ++seq;
    store_seq(config.state_dir, seq);
    auto env = protocol::sign_encoded(crypto::base64_encode(doc.dump()), *creds, seq,
                                      wall_clock_ms(), protocol::make_nonce());
    ++summary.envelopes_sent;
    auto reply = transport->post("/api/v1/events", protocol::to_json(env));
    if (reply.reached && reply.status == 200) {
      ++summary.envelopes_accepted;
      apply_reply(reply.body);
    }
    return reply;
  }

  void apply_reply(const json& body) {
    for (const auto& id : body.value("alert_ids", json::array())) server_alerts.insert(id.get<std::string>());
    if (!body.contains("config") || !body.at("config").is_object()) return;
    const auto& c = body.at("config");
    try {
      if (c.contains("batch_max")) config.batch_max = std::max<std::size_t>(1, c.at("batch_max").get<std::size_t>());
      if (c.contains("batch_flush_ms")) config.batch_flush_ms = c.at("batch_flush_ms").get<TimestampMs>();
      if (c.contains("heartbeat_ms")) config.heartbeat_ms = c.at("heartbeat_ms").get<TimestampMs>();
      if (c.contains("mode")) local_mode = c.at("mode") == "local";
      config_version = body.value("config_version", config_version);
      spdlog::info("agent {} applied config version {}", config.agent_id, config_version);
    } catch (const json::exception& e) {
      spdlog::warn("agent {} ignored malformed config: {}", config.agent_id, e.what());
    }
  }

  void note_failure(const Transport::Reply& reply) {
    ++summary.upload_failures;
    backoff_ms = backoff_ms == 0 ? config.backoff_initial_ms
                                 : std::min(backoff_ms * 2, config.backoff_cap_ms);
    next_attempt = steady_ms() + backoff_ms;
    spdlog::debug("upload failed ({}), retry in {} ms",
                  reply.reached ? std::to_string(reply.status) : reply.error, backoff_ms);
  }

  /// Sends the oldest spooled batch. Returns false when the caller should back off.
  bool deliver_front() {
    auto batch = spool->front();
    if (!batch) return false;
    const auto events = batch->body.value("events", json::array());
    const auto alerts = batch->body.value("alerts", json::array());
    auto reply = send("batch", events, alerts);
    if (reply.reached && reply.status == 200) {
      summary.delivered += batch->events;
      summary.alert_uploads += alerts.size();
      spool->pop();
      backoff_ms = 0;
      next_attempt = 0;
      return true;
    }
    if (!reply.reached || reply.status >= 500 || reply.status == 429) {
      note_failure(reply);
      return false;
    }
    const auto code = reply.body.value("code", std::to_string(reply.status));
    ++summary.rejections[code];
    if (code == "clock_skew" || code == "stale_seq" || code == "replayed_nonce") {
      // Transient: a fresh envelope may pass.
      note_failure(reply);
      return false;
    }
    spdlog::error("agent {}: batch of {} events rejected: {}", config.agent_id, batch->events, code);
    summary.rejected_events += batch->events;
    spool->pop();
    return true;
  }

  void heartbeat() {
    auto reply = send("heartbeat", json::array(), json::array());
    ++summary.heartbeats_sent;
    if (!(reply.reached && reply.status == 200)) {
      ++summary.upload_failures;
      if (reply.reached) ++summary.rejections[reply.body.value("code", std::to_string(reply.status))];
    }
  }

  void uploader(BoundedQueue<Item>& q) {
    json pending_events = json::array();
    std::map<std::string, Alert> pending_alerts;
    TimestampMs first_pending = 0;
    TimestampMs next_heartbeat = steady_ms() + config.heartbeat_ms;
    auto flush = [&] {
      if (pending_events.empty() && pending_alerts.empty()) return;
      auto alerts = json::array();
      for (const auto& [id, a] : pending_alerts) alerts.push_back(to_json(a));
      const auto n = pending_events.size();
      spool->push({{"events", std::move(pending_events)}, {"alerts", std::move(alerts)}}, n);
      pending_events = json::array();
      pending_alerts.clear();
    };
    auto drain = [&](std::size_t max_batches) {
      for (std::size_t i = 0; i < max_batches && !spool->empty(); ++i) {
        if (steady_ms() < next_attempt) return;
        if (!deliver_front()) return;
      }
    };
    heartbeat();
    bool open = true;
    while (open) {
      auto item = q.pop_for(std::chrono::milliseconds(20));
      if (item) {
        if (pending_events.empty() && pending_alerts.empty()) first_pending = steady_ms();
        if (item->event) pending_events.push_back(events::to_json(*item->event));
        if (item->alert) pending_alerts[item->alert->id] = std::move(*item->alert);
        if (pending_events.size() >= config.batch_max) flush();
      } else if (q.closed()) {
        open = false;
      }
      const auto now = steady_ms();
      if (!pending_events.empty() || !pending_alerts.empty()) {
        if (now - first_pending >= config.batch_flush_ms) flush();
      }
      drain(8);
      if (now >= next_heartbeat) {
        heartbeat();
        next_heartbeat = now + config.heartbeat_ms;
      }
    }
    flush();
    const auto deadline = steady_ms() + config.drain_timeout_ms;
    while (!spool->empty() && steady_ms() < deadline && !stop) {
      drain(64);
      if (spool->empty()) break;
      const auto wait = std::clamp<TimestampMs>(next_attempt - steady_ms(), 1, 100);
      std::this_thread::sleep_for(std::chrono::milliseconds(wait));
      if (steady_ms() >= next_heartbeat) {
        heartbeat();
        next_heartbeat = steady_ms() + config.heartbeat_ms;
      }
    }
    heartbeat();
  }
};

Agent::Agent(AgentConfig config, std::shared_ptr<Transport> transport)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(transport))) {
  impl_->config.validate();
  if (!impl_->transport) throw Error("agent needs a transport");
}

Agent::~Agent() = default;

void Agent::stop() { impl_->stop = true; }

const AgentConfig& Agent::config() const { return impl_->config; }

const protocol::AgentCredentials& Agent::credentials() const {
  if (!impl_->creds) throw Error("agent is not enrolled");
  return *impl_->creds;
}

void Agent::ensure_enrolled() {
  auto& cfg = impl_->config;
  std::filesystem::create_directories(cfg.state_dir);
  const auto path = cfg.state_dir / "credentials.json";
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    auto creds = protocol::credentials_from_json(json::parse(in));
    if (creds.agent_id != cfg.agent_id) {
      throw Error("credentials in " + path.string() + " belong to agent '" + creds.agent_id + "'");
    }
    impl_->creds = std::move(creds);
    return;
  }
  if (cfg.enrollment_token.empty()) {
    throw Error("no credentials in " + cfg.state_dir.string() + " and no enrollment token configured");
  }
  auto reply = impl_->transport->post(
      "/api/v1/agents/enroll",
      {{"agent_id", cfg.agent_id}, {"enrollment_token", cfg.enrollment_token}, {"hostname", host_name()}});
  if (!reply.reached) throw Error("enrollment failed: " + reply.error);
  if (reply.status != 201) {
    throw Error("enrollment rejected (" + std::to_string(reply.status) +
                "): " + reply.body.value("code", std::string{"error"}));
  }
  auto creds = protocol::credentials_from_json(reply.body);
  const auto text = protocol::to_json(creds, true).dump(2);
  {
    std::ofstream out(path, std::ios::trunc);
    out << text;
    if (!out) throw Error("cannot store credentials in " + path.string());
  }
  std::filesystem::permissions(path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write);
  impl_->creds = std::move(creds);
  spdlog::info("agent {} enrolled", cfg.agent_id);
}

RunSummary Agent::run() {
  auto& im = *impl_;
  auto& cfg = im.config;
  ensure_enrolled();
  const auto started = std::chrono::steady_clock::now();

  im.seq = load_seq(cfg.state_dir);
  im.spool = std::make_unique<Spool>(cfg.state_dir / "spool", cfg.spool_max_bytes);
  im.summary = RunSummary{};
  im.summary.agent_id = cfg.agent_id;
  im.summary.mode = cfg.mode;
  im.summary.spool_carried = im.spool->events();
  im.local_mode = cfg.mode == "local";

  // Detection assets for local mode.
  auto tax = std::make_shared<taxonomy::Taxonomy>(taxonomy::load_taxonomy(cfg.taxonomy_path));
  auto rules = std::make_shared<detect::RuleSet>(detect::load_rules(cfg.rules_path, *tax));
  auto opts = cfg.pipeline;
  if (!cfg.noise_rules_path.empty() && std::filesystem::exists(cfg.noise_rules_path)) {
    opts.ingest.noise_rules = ingest::load_noise_rules(cfg.noise_rules_path);
  }
  std::shared_ptr<const detect::IsolationForest> forest;
  if (cfg.model_path) {
    forest = std::make_shared<detect::IsolationForest>(detect::IsolationForest::load(*cfg.model_path));
  }
  pipeline::Pipeline pipe({tax, rules, forest, std::make_shared<detect::RuleBasedClassifier>(), nullptr},
                          opts);

  BoundedQueue<events::SystemEvent> raw(cfg.queue_capacity);
  BoundedQueue<Impl::Item> out(cfg.queue_capacity);
  std::atomic<std::size_t> read{0};
  std::atomic<std::size_t> skipped{0};

  std::thread reader([&] {
    auto emit = [&](events::SystemEvent e) {
      e.agent_id = cfg.agent_id;
      ++read;
      return raw.push(std::move(e));
    };
    try {
      if (cfg.source.kind == "synth") {
        ingest::SynthOptions so;
        so.scenario = cfg.source.scenario;
        so.n = cfg.source.n;
        so.anomaly_frac = cfg.source.scenario == "baseline" ? 0.0 : cfg.source.anomaly_frac;
        so.seed = cfg.source.seed;
        so.agent_id = cfg.agent_id;
        for (auto& e : ingest::synth_source(so)) {
          if (im.stop || !emit(std::move(e))) break;
        }
      } else {
        ingest::ReplaySource src(cfg.source.path, cfg.source.rate);
        while (!im.stop) {
          auto e = src.next();
          if (!e) break;
          if (!emit(std::move(*e))) break;
        }
        skipped = src.skipped();
      }
    } catch (const std::exception& e) {
      spdlog::error("agent {} source failed: {}", cfg.agent_id, e.what());
    }
    raw.close();
  });

  std::set<std::string> local_alerts;
  std::size_t noise = 0;
  std::size_t dup = 0;
  std::size_t kept = 0;
  std::thread detector([&] {
    while (auto e = raw.pop()) {
      if (!im.local_mode) {
        ++kept;
        out.push({std::move(*e), std::nullopt});
        continue;
      }
      auto outcome = pipe.process(*e);
      if (!outcome.verdict.keep) {
        (outcome.verdict.reason == "duplicate" ? dup : noise)++;
        continue;
      }
      ++kept;
      out.push({std::move(*e), std::nullopt});
      for (auto& a : pipe.take_updates()) {
        local_alerts.insert(a.id);
        out.push({std::nullopt, std::move(a)});
      }
    }
    out.close();
  });

  std::thread uploader([&] { im.uploader(out); });

  reader.join();
  detector.join();
  uploader.join();

  auto& s = im.summary;
  s.read = read + skipped;
  s.skipped = skipped;
  s.ingest_kept = kept;
  s.dropped_noise = noise;
  s.dropped_dup = dup;
  s.late_dropped = pipe.late_dropped();
  s.alerts_raised = local_alerts.size();
  s.spool_dropped = im.spool->dropped_events();
  s.in_spool = im.spool->events();
  s.config_version = im.config_version;
  s.last_seq = im.seq;
  s.server_alert_ids.assign(im.server_alerts.begin(), im.server_alerts.end());
  s.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  s.peak_rss_kb = peak_rss_kb();
  return s;
}

}  // namespace edr::agent
