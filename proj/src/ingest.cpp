#include "edr/ingest.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "edr/rng.hpp"

namespace edr::ingest {

using events::Category;
using events::SystemEvent;

std::vector<NoiseRule> noise_rules_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw Error("noise rules must be a JSON list");
  std::vector<NoiseRule> rules;
  for (const auto& obj : arr) {
    auto predicate = FieldPredicate::from_json(obj);
    auto name = obj.value("name", std::string{});
    if (name.empty()) name = predicate.field() + ":" + predicate.value();
    rules.push_back({std::move(name), std::move(predicate)});
  }
  return rules;
}

std::vector<NoiseRule> load_noise_rules(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open noise rules " + path.string());
  try {
    return noise_rules_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error("noise rules parse failure: " + std::string(e.what()));
  }
}

void PipelineConfig::validate() const {
  if (window_ms <= 0) throw Error("window_seconds must be > 0");
  if (max_window_events == 0) throw Error("max_window_events must be > 0");
  if (dedup_horizon_ms < 0) throw Error("dedup_horizon must be >= 0");
  if (replay_rate && !(*replay_rate > 0)) throw Error("replay_rate must be > 0");
}

Verdict noise_filter(const SystemEvent& e, std::span<const NoiseRule> rules) {
  for (const auto& rule : rules) {
    if (rule.predicate.matches(e)) return Verdict::dropped(rule.name);
  }
  return Verdict::kept();
}

WindowStats::WindowStats(TimestampMs window_ms, std::size_t max_events,
                         TimestampMs dedup_horizon_ms)
    : window_ms_(window_ms), max_events_(max_events), dedup_horizon_ms_(dedup_horizon_ms) {
  if (window_ms_ <= 0 || max_events_ == 0) throw Error("invalid window parameters");
}

std::string WindowStats::count_key(Category c, std::string_view action) {
  std::string key(events::to_string(c));
  key += '/';
  key += action;
  return key;
}

std::size_t WindowStats::count(Category c, std::string_view action) const {
  auto it = counts_.find(count_key(c, action));
  return it == counts_.end() ? 0 : it->second;
}

void WindowStats::evict_front() {
  const auto& old = ring_.front();
  auto it = counts_.find(count_key(old.category, old.action));
  if (it != counts_.end() && --it->second == 0) counts_.erase(it);
  ring_.pop_front();
  ++evicted_;
}

bool WindowStats::update(const SystemEvent& e) {
  if (newest_ && e.ts < *newest_ - window_ms_) {
    ++late_dropped_;
    return false;
  }
  newest_ = newest_ ? std::max(*newest_, e.ts) : e.ts;
  // Keep ring order by ts; small out-of-order arrivals are inserted in place.
  auto pos = ring_.end();
  while (pos != ring_.begin() && std::prev(pos)->ts > e.ts) --pos;
  ring_.insert(pos, e);
  ++counts_[count_key(e.category, e.action)];
  const TimestampMs bound = *newest_ - window_ms_;
  while (!ring_.empty() && ring_.front().ts < bound) evict_front();
  while (ring_.size() > max_events_) evict_front();
  return true;
}

Verdict WindowStats::dedup(const SystemEvent& e) {
  std::string key;
  key.reserve(e.agent_id.size() + e.action.size() + e.object.size() + 24);
  key += e.agent_id;
  key += '\x1f';
  key += events::to_string(e.category);
  key += '\x1f';
  key += e.action;
  key += '\x1f';
  key += e.object;
  key += '\x1f';
  key += std::to_string(e.subject.pid);

  if (++dedup_checks_ % 4096 == 0) {
    std::erase_if(last_kept_, [&](const auto& kv) { return e.ts - kv.second > dedup_horizon_ms_; });
  }
  auto it = last_kept_.find(key);
  if (it != last_kept_.end() && e.ts >= it->second && e.ts - it->second <= dedup_horizon_ms_) {
    return Verdict::dropped("duplicate");
  }
  last_kept_[std::move(key)] = e.ts;
  return Verdict::kept();
}

nlohmann::json WindowStats::to_json() const {
  auto ring = nlohmann::json::array();
  for (const auto& e : ring_) ring.push_back(events::to_json(e));
  return {{"window_ms", window_ms_},
          {"max_events", max_events_},
          {"dedup_horizon_ms", dedup_horizon_ms_},
          {"ring", std::move(ring)},
          {"last_kept", last_kept_},
          {"newest", newest_ ? nlohmann::json(*newest_) : nlohmann::json()},
          {"late_dropped", late_dropped_},
          {"evicted", evicted_},
          {"dedup_checks", dedup_checks_}};
}

WindowStats WindowStats::from_json(const nlohmann::json& obj) {
  WindowStats w(obj.at("window_ms").get<TimestampMs>(), obj.at("max_events").get<std::size_t>(),
                obj.at("dedup_horizon_ms").get<TimestampMs>());
  for (const auto& e : obj.at("ring")) {
    w.ring_.push_back(events::event_from_json(e));
    ++w.counts_[count_key(w.ring_.back().category, w.ring_.back().action)];
  }
  w.last_kept_ = obj.at("last_kept").get<std::unordered_map<std::string, TimestampMs>>();
  if (!obj.at("newest").is_null()) w.newest_ = obj.at("newest").get<TimestampMs>();
  w.late_dropped_ = obj.value("late_dropped", std::size_t{0});
  w.evicted_ = obj.value("evicted", std::size_t{0});
  w.dedup_checks_ = obj.value("dedup_checks", std::size_t{0});
  return w;
}

ReplaySource::ReplaySource(const std::filesystem::path& path, std::optional<double> rate)
    : in_(path), rate_(rate), start_(std::chrono::steady_clock::now()) {
  if (!in_) throw Error("cannot open replay file " + path.string());
  if (rate_ && !(*rate_ > 0)) throw Error("replay rate must be positive");
}

std::optional<SystemEvent> ReplaySource::next() {
  std::string line;
  while (std::getline(in_, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ++lines_read_;
    try {
      auto e = events::parse_event(line);
      if (rate_) {
        const auto due = start_ + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                      std::chrono::duration<double>(double(emitted_) / *rate_));
        std::this_thread::sleep_until(due);
      }
      ++emitted_;
      return e;
    } catch (const events::EventParseError& err) {
      ++skipped_;
      if (errors_.size() < kMaxErrors) {
        errors_.push_back("line " + std::to_string(lines_read_) + ": " + err.what());
      }
    }
  }
  if (in_.bad()) throw Error("I/O failure while reading replay file");
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Synthetic scenarios

namespace {

constexpr std::array<std::string_view, 4> kScenarios{"baseline", "credential_theft", "ransomware",
                                                     "beacon"};

constexpr std::array<std::string_view, 4> kUsers{"alice", "bob", "carol", "dave"};

struct BenignApp {
  std::string_view image;
  std::string_view args;
};

constexpr std::array<BenignApp, 7> kApps{{
    {"C:\\Program Files\\Google\\Chrome\\Application\\chrome.exe", "--type=renderer --lang=en-US"},
    {"C:\\Windows\\System32\\notepad.exe", "C:\\Users\\user\\Documents\\notes.txt"},
    {"C:\\Windows\\explorer.exe", ""},
    {"C:\\Windows\\System32\\svchost.exe", "-k netsvcs -p"},
    {"C:\\Users\\user\\AppData\\Local\\Microsoft\\Teams\\current\\Teams.exe", "--system-initiated"},
    {"C:\\Program Files\\Microsoft Office\\root\\Office16\\WINWORD.EXE", "/n"},
    {"C:\\Windows\\System32\\SearchProtocolHost.exe", "Global\\UsGthrFltPipeMssGthrPipe"},
}};

constexpr std::array<std::string_view, 6> kPublicHosts{"142.250.74.110", "151.101.1.69",
                                                       "13.107.42.14",   "52.96.166.130",
                                                       "104.16.132.229", "172.217.16.142"};
constexpr std::array<std::string_view, 4> kDomains{"www.google.com", "outlook.office365.com",
                                                   "github.com", "update.microsoft.com"};

class Builder {
 public:
  Builder(const SynthOptions& opt) : opt_(opt), rng_(opt.seed), ts_(opt.start_ts) {}

  SystemEvent base(Category c, std::string action) {
    SystemEvent e;
    e.id = rng_.uuid();
    e.ts = ts_;
    e.agent_id = opt_.agent_id;
    e.category = c;
    e.action = std::move(action);
    e.label = "benign";
    return e;
  }

  void advance(TimestampMs lo, TimestampMs hi) { ts_ += rng_.between(lo, hi); }

  SystemEvent benign() {
    advance(200, 1800);
    const auto user = std::string(kUsers[rng_.below(kUsers.size())]);
    const auto roll = rng_.below(100);
    if (roll < 22) {
      auto e = base(Category::process, rng_.chance(0.8) ? "create" : "terminate");
      const auto& app = kApps[rng_.below(kApps.size())];
      e.subject = {rng_.between(1000, 60000), rng_.between(600, 999),  std::string(app.image),
                   "\"" + std::string(app.image) + "\" " + std::string(app.args),
                   user,     true,  false};
      e.object = "C:\\Windows\\explorer.exe";
      return e;
    }
    if (roll < 44) {
      static constexpr std::array<std::string_view, 4> kActions{"create", "modify", "read",
                                                                "delete"};
      auto e = base(Category::file, std::string(kActions[rng_.below(kActions.size())]));
      e.subject = {rng_.between(1000, 60000), 640, std::string(kApps[5].image), "", user, true,
                   false};
      static constexpr std::array<std::string_view, 3> kExt{".docx", ".xlsx", ".txt"};
      e.object = "C:\\Users\\" + user + "\\Documents\\report-" +
                 std::to_string(rng_.below(100)) + std::string(kExt[rng_.below(kExt.size())]);
      return e;
    }
    if (roll < 66) {
      auto e = base(Category::network, "connect");
      e.subject = {rng_.between(1000, 60000), 640, std::string(kApps[0].image), "", user, true,
                   false};
      const auto kind = rng_.below(10);
      if (kind < 2) {
        e.action = "dns";
        e.object = std::string(kDomains[rng_.below(kDomains.size())]);
      } else if (kind < 3) {
        e.object = "10.0.0." + std::to_string(rng_.between(2, 40)) + ":445";
        e.bytes_out = static_cast<std::uint64_t>(rng_.between(200, 20000));
        e.bytes_in = static_cast<std::uint64_t>(rng_.between(200, 20000));
      } else {
        e.object = std::string(kPublicHosts[rng_.below(kPublicHosts.size())]) +
                   (rng_.chance(0.85) ? ":443" : ":80");
        e.bytes_out = static_cast<std::uint64_t>(rng_.between(400, 40000));
        e.bytes_in = static_cast<std::uint64_t>(rng_.between(1000, 400000));
      }
      return e;
    }
    if (roll < 82) {
      auto e = base(Category::registry, "read");
      e.subject = {rng_.between(1000, 60000), 640, std::string(kApps[3].image), "", "SYSTEM",
                   true, true};
      if (rng_.chance(0.6)) {
        e.object = "HKLM\\SOFTWARE\\Microsoft\\Windows\\CurrentVersion\\Diagnostics\\DiagTrack";
      } else {
        e.action = "set_value";
        e.subject.user = user;
        e.subject.elevated = false;
        e.object = "HKCU\\Software\\Microsoft\\Office\\16.0\\Word\\Options\\Option" +
                   std::to_string(rng_.below(20));
      }
      return e;
    }
    if (roll < 92) {
      auto e = base(Category::user, rng_.chance(0.7) ? "logon" : "logoff");
      e.subject = {rng_.between(500, 900), 4, "C:\\Windows\\System32\\winlogon.exe", "", user,
                   true, true};
      e.object = user + "@WS0" + std::to_string(rng_.between(1, 4));
      return e;
    }
    auto e = base(Category::service, rng_.chance(0.5) ? "start" : "stop");
    e.subject = {rng_.between(500, 900), 4, "C:\\Windows\\System32\\services.exe", "", "SYSTEM",
                 true, true};
    static constexpr std::array<std::string_view, 3> kServices{"wuauserv", "BITS", "Spooler"};
    e.object = std::string(kServices[rng_.below(kServices.size())]);
    return e;
  }

  /// One complete attack instance; caller truncates the final one.
  std::vector<SystemEvent> attack(std::string_view scenario, std::size_t instance) {
    std::vector<SystemEvent> out;
    const auto user = std::string(kUsers[instance % kUsers.size()]);
    auto step = [&](Category c, std::string action, std::string label) -> SystemEvent& {
      advance(800, 3000);
      auto e = base(c, std::move(action));
      e.label = std::move(label);
      out.push_back(std::move(e));
      return out.back();
    };
    const auto pid = rng_.between(61000, 65000);
    if (scenario == "credential_theft") {
      const auto temp = "C:\\Users\\" + user + "\\AppData\\Local\\Temp\\";
      auto& ps = step(Category::process, "create", "T1059.001");
      ps.subject = {pid, pid - 7, "C:\\Windows\\System32\\WindowsPowerShell\\v1.0\\powershell.exe",
                    "powershell.exe -nop -w hidden -enc SQBFAFgAIAAoAE4AZQB3AC0ATwBiAGoAZQBjAHQAKQA=",
                    user, true, true};
      ps.object = "C:\\Program Files\\Microsoft Office\\root\\Office16\\WINWORD.EXE";
      auto& mk = step(Category::process, "create", "T1003.001");
      mk.subject = {pid + 1, pid, temp + "mimikatz.exe",
                    "mimikatz.exe \"privilege::debug\" \"sekurlsa::logonpasswords\" exit", user,
                    false, true};
      mk.object = ps.subject.image;
      auto& acc = step(Category::process, "access", "T1003.001");
      acc.subject = mk.subject;
      acc.object = "C:\\Windows\\System32\\lsass.exe";
      auto& dump = step(Category::file, "create", "T1003.001");
      dump.subject = mk.subject;
      dump.object = temp + "lsass_" + std::to_string(instance) + ".dmp";
      auto& exfil = step(Category::network, "connect", "T1041");
      exfil.subject = ps.subject;
      exfil.object = "185.220.101." + std::to_string(10 + instance % 200) + ":4444";
      exfil.bytes_out = 2'500'000 + static_cast<std::uint64_t>(rng_.below(500'000));
      exfil.bytes_in = 1200;
    } else if (scenario == "ransomware") {
      const auto docs = "C:\\Users\\" + user + "\\Documents\\";
      auto& vss = step(Category::process, "create", "T1490");
      vss.subject = {pid, pid - 3, "C:\\Windows\\System32\\vssadmin.exe",
                     "vssadmin.exe delete shadows /all /quiet", user, true, true};
      vss.object = docs + "invoice.exe";
      auto& bcd = step(Category::process, "create", "T1490");
      bcd.subject = {pid + 1, pid - 3, "C:\\Windows\\System32\\bcdedit.exe",
                     "bcdedit.exe /set {default} recoveryenabled no", user, true, true};
      bcd.object = docs + "invoice.exe";
      for (int k = 0; k < 4; ++k) {
        auto& ren = step(Category::file, "rename", "T1486");
        ren.subject = {pid - 3, 1200, docs + "invoice.exe", "", user, false, true};
        ren.object = docs + "ledger-" + std::to_string(instance) + "-" + std::to_string(k) +
                     ".xlsx.locked";
      }
    } else if (scenario == "beacon") {
      const auto dst = "203.0.113." + std::to_string(5 + instance % 200) + ":4443";
      for (int k = 0; k < 4; ++k) {
        auto& c = step(Category::network, "connect", "T1071.001");
        if (k > 0) {  // fixed 10 s cadence
          c.ts = out[static_cast<std::size_t>(k) - 1].ts + 10'000;
          ts_ = c.ts;
        }
        c.subject = {pid, 880, "C:\\Users\\Public\\svchost32.exe", "svchost32.exe", user, false,
                     false};
        c.object = dst;
        c.bytes_out = 512;
        c.bytes_in = 256;
      }
    }
    return out;
  }

 private:
  const SynthOptions& opt_;
  Rng rng_;
  TimestampMs ts_;
};

}  // namespace

std::span<const std::string_view> synth_scenarios() noexcept { return kScenarios; }

std::string scenario_technique(std::string_view scenario) {
  if (scenario == "credential_theft") return "T1003";
  if (scenario == "ransomware") return "T1486";
  if (scenario == "beacon") return "T1071";
  return {};
}

std::vector<SystemEvent> synth_source(const SynthOptions& opt) {
  if (std::find(kScenarios.begin(), kScenarios.end(), opt.scenario) == kScenarios.end()) {
    throw Error("unknown scenario '" + opt.scenario + "'");
  }
  if (!(opt.anomaly_frac >= 0.0 && opt.anomaly_frac <= 1.0)) {
    throw Error("anomaly_frac must lie in [0, 1]");
  }
  const auto labeled = static_cast<std::size_t>(std::llround(double(opt.n) * opt.anomaly_frac));
  if (labeled > 0 && opt.scenario == "baseline") {
    throw Error("baseline scenario carries no attack sequences; use anomaly_frac 0");
  }
  Builder builder(opt);
  // Instance size is fixed per scenario; probe it once from a scratch builder.
  std::size_t per_instance = 1;
  if (labeled > 0) {
    SynthOptions probe_opt = opt;
    Builder probe(probe_opt);
    per_instance = probe.attack(opt.scenario, 0).size();
  }
  const std::size_t instances = labeled == 0 ? 0 : (labeled + per_instance - 1) / per_instance;
  const std::size_t benign = opt.n - labeled;

  std::vector<SystemEvent> out;
  out.reserve(opt.n);
  std::size_t emitted_benign = 0, emitted_labeled = 0;
  for (std::size_t i = 0; i < instances; ++i) {
    const std::size_t target = (i + 1) * benign / (instances + 1);
    while (emitted_benign < target) {
      out.push_back(builder.benign());
      ++emitted_benign;
    }
    auto steps = builder.attack(opt.scenario, i);
    for (auto& s : steps) {
      if (emitted_labeled == labeled) break;
      out.push_back(std::move(s));
      ++emitted_labeled;
    }
  }
  while (emitted_benign < benign) {
    out.push_back(builder.benign());
    ++emitted_benign;
  }
  events::sort_events(out);
  return out;
}

}  // namespace edr::ingest
