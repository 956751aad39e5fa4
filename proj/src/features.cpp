#include "edr/features.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace edr::events {

namespace {

constexpr std::array<std::string_view, kFeatureCount> kNames{
    "proc_new_count",         "proc_unique_images",       "proc_suspicious_parent_count",
    "cmdline_len_mean",       "cmdline_entropy_mean",     "proc_elevated_count",
    "proc_unsigned_count",    "proc_from_temp_count",     "proc_short_lived_count",
    "proc_tree_depth_max",    "file_create_count",        "file_modify_count",
    "file_delete_count",      "file_exec_ext_writes",     "file_high_entropy_writes",
    "file_sensitive_path_touches", "file_rename_burst",   "file_unique_dirs",
    "net_conn_count",         "net_unique_dst_ips",       "net_unique_dst_ports",
    "net_bytes_out",          "net_bytes_in",             "net_beacon_regularity",
    "net_dns_count",          "net_rare_port_count",      "net_external_ratio",
    "reg_set_count",          "reg_delete_count",         "reg_run_key_writes",
    "reg_service_key_writes", "reg_unique_keys",          "reg_persistence_path_touches",
    "logon_count",            "failed_logon_count",       "users_created",
    "priv_change_count",      "off_hours_events",         "distinct_src_hosts",
    "events_per_sec_mean",    "events_per_sec_max",       "burstiness",
    "inter_event_time_var",   "active_categories",        "window_span_sec"};

constexpr std::array<std::string_view, 8> kSuspiciousParents{
    "winword.exe", "excel.exe",   "powerpnt.exe", "outlook.exe",
    "mshta.exe",   "wscript.exe", "cscript.exe",  "wmiprvse.exe"};
constexpr std::array<std::string_view, 3> kTempDirs{"\\temp\\", "/tmp/", "\\downloads\\"};
constexpr std::array<std::string_view, 9> kExecExtensions{".exe", ".dll", ".ps1", ".bat", ".cmd",
                                                          ".vbs", ".js",  ".scr", ".hta"};
constexpr std::array<std::string_view, 6> kEncryptedExtensions{
    ".locked", ".encrypted", ".enc", ".crypt", ".crypted", ".crypto"};
constexpr std::array<std::string_view, 9> kSensitivePaths{
    "\\windows\\system32\\config\\", "ntds.dit", "lsass", "/etc/shadow", "/etc/passwd",
    "\\.ssh\\", "/.ssh/", "\\microsoft\\credentials\\", "\\login data"};
constexpr std::array<int, 15> kCommonPorts{80,  443, 53,  22,  25,   110,  143, 993,
                                          995, 3389, 445, 139, 8080, 8443, 123};
constexpr std::array<std::string_view, 7> kPersistenceKeys{
    "\\currentversion\\run",          "\\winlogon", "image file execution options",
    "\\currentcontrolset\\services\\", "appinit_dlls", "\\startup", "\\policies\\explorer\\run"};

template <std::size_t N>
bool contains_any(std::string_view s, const std::array<std::string_view, N>& needles) {
  return std::any_of(needles.begin(), needles.end(),
                     [&](std::string_view n) { return icontains(s, n); });
}

template <std::size_t N>
bool ends_with_any(std::string_view s, const std::array<std::string_view, N>& suffixes) {
  return std::any_of(suffixes.begin(), suffixes.end(),
                     [&](std::string_view n) { return iends_with(s, n); });
}

std::string_view basename(std::string_view path) {
  const auto slash = path.find_last_of("\\/");
  return slash == std::string_view::npos ? path : path.substr(slash + 1);
}

std::string_view dirname(std::string_view path) {
  const auto slash = path.find_last_of("\\/");
  return slash == std::string_view::npos ? std::string_view{} : path.substr(0, slash);
}

double saturate(double value, double cap) {
  if (cap <= 0) return 0.0;
  return std::clamp(value / cap, 0.0, 1.0);
}

}  // namespace

std::string_view feature_name(std::size_t slot) noexcept {
  return slot < kNames.size() ? kNames[slot] : std::string_view{};
}

std::span<const std::string_view> feature_names() noexcept { return kNames; }

double normalized_entropy(std::string_view text) noexcept {
  if (text.empty()) return 0.0;
  std::array<std::size_t, 256> counts{};
  for (unsigned char c : text) ++counts[c];
  double h = 0.0;
  const double n = static_cast<double>(text.size());
  for (auto count : counts) {
    if (count == 0) continue;
    const double p = static_cast<double>(count) / n;
    h -= p * std::log2(p);
  }
  return std::clamp(h / 8.0, 0.0, 1.0);
}

FeatureVector extract_features(std::span<const SystemEvent> input, TimestampMs window_ms,
                               const FeatureConfig& cfg) {
  std::vector<const SystemEvent*> ptrs;
  ptrs.reserve(input.size());
  for (const auto& e : input) ptrs.push_back(&e);
  return extract_features(std::span<const SystemEvent* const>(ptrs), window_ms, cfg);
}

FeatureVector extract_features(std::span<const SystemEvent* const> input, TimestampMs window_ms,
                               const FeatureConfig& cfg) {
  if (window_ms <= 0) throw Error("feature window must be positive");
  FeatureVector fv;
  if (input.empty()) return fv;

  std::vector<const SystemEvent*> events(input.begin(), input.end());
  for (const auto* e : events) {
    if (e->agent_id != input.front()->agent_id) {
      throw Error("feature window mixes agent ids " + input.front()->agent_id + " and " +
                  e->agent_id);
    }
  }
  std::stable_sort(events.begin(), events.end(), [](const SystemEvent* a, const SystemEvent* b) {
    return a->ts != b->ts ? a->ts < b->ts : a->id < b->id;
  });
  fv.agent_id = input.front()->agent_id;
  fv.window_id = fv.agent_id + "@" + format_rfc3339(events.back()->ts);

  const double cap = cfg.count_cap;
  auto& v = fv.values;

  // Process group.
  std::size_t proc_new = 0, suspicious_parent = 0, elevated = 0, unsigned_count = 0,
              from_temp = 0, short_lived = 0;
  double cmd_len_sum = 0, cmd_entropy_sum = 0;
  std::unordered_set<std::string> images;
  std::unordered_map<std::int64_t, std::int64_t> parent_of;
  std::unordered_map<std::int64_t, TimestampMs> created_at;

  // File group.
  std::size_t f_create = 0, f_modify = 0, f_delete = 0, f_exec = 0, f_entropy = 0,
              f_sensitive = 0, f_rename = 0;
  std::unordered_set<std::string> dirs;

  // Network group.
  std::size_t conns = 0, dns = 0, rare_ports = 0, external = 0;
  double bytes_out = 0, bytes_in = 0;
  std::unordered_set<std::string> dst_ips;
  std::unordered_set<int> dst_ports;
  std::map<std::string, std::vector<TimestampMs>> conn_times;

  // Registry group.
  std::size_t r_set = 0, r_delete = 0, r_run = 0, r_service = 0, r_persist = 0;
  std::unordered_set<std::string> keys;

  // User group.
  std::size_t logons = 0, failed = 0, created_users = 0, priv = 0, off_hours = 0;
  std::unordered_set<std::string> src_hosts;

  std::unordered_set<int> categories;
  std::map<TimestampMs, std::size_t> per_second;

  const TimestampMs first_ts = events.front()->ts;
  for (const SystemEvent* e : events) {
    categories.insert(static_cast<int>(e->category));
    ++per_second[(e->ts - first_ts) / 1000];
    {
      const TimestampMs local = e->ts + static_cast<TimestampMs>(cfg.utc_offset_minutes) * 60'000;
      const TimestampMs day_ms = 86'400'000;
      const auto hour = static_cast<int>((((local % day_ms) + day_ms) % day_ms) / 3'600'000);
      if (hour >= cfg.off_hours_start && hour < cfg.off_hours_end) ++off_hours;
    }

    const auto& a = e->action;
    switch (e->category) {
      case Category::process:
        if (a == "create") {
          ++proc_new;
          images.insert(to_lower(e->subject.image));
          const auto parent = basename(e->object);
          if (std::any_of(kSuspiciousParents.begin(), kSuspiciousParents.end(),
                          [&](std::string_view p) { return iequals(parent, p); })) {
            ++suspicious_parent;
          }
          cmd_len_sum += static_cast<double>(e->subject.cmdline.size());
          cmd_entropy_sum += normalized_entropy(e->subject.cmdline);
          if (e->subject.elevated) ++elevated;
          if (!e->subject.is_signed) ++unsigned_count;
          if (contains_any(e->subject.image, kTempDirs)) ++from_temp;
          parent_of[e->subject.pid] = e->subject.ppid;
          created_at[e->subject.pid] = e->ts;
        } else if (a == "terminate") {
          auto it = created_at.find(e->subject.pid);
          if (it != created_at.end() && e->ts - it->second <= cfg.short_lived_ms) {
            ++short_lived;
            created_at.erase(it);
          }
        }
        break;
      case Category::file:
        if (a == "create") ++f_create;
        if (a == "modify") ++f_modify;
        if (a == "delete") ++f_delete;
        if (a == "rename") ++f_rename;
        if ((a == "create" || a == "modify") && ends_with_any(e->object, kExecExtensions)) ++f_exec;
        if ((a == "create" || a == "modify" || a == "rename") &&
            ends_with_any(e->object, kEncryptedExtensions)) {
          ++f_entropy;
        }
        if (contains_any(e->object, kSensitivePaths)) ++f_sensitive;
        dirs.insert(to_lower(dirname(e->object)));
        break;
      case Category::network: {
        bytes_out += static_cast<double>(e->bytes_out);
        bytes_in += static_cast<double>(e->bytes_in);
        if (a == "dns") ++dns;
        if (a == "connect") {
          ++conns;
          const auto ep = split_endpoint(e->object);
          dst_ips.insert(ep.host);
          dst_ports.insert(ep.port);
          if (std::find(kCommonPorts.begin(), kCommonPorts.end(), ep.port) == kCommonPorts.end()) {
            ++rare_ports;
          }
          if (!is_private_ipv4(ep.host)) ++external;
          conn_times[e->object].push_back(e->ts);
        }
        break;
      }
      case Category::registry:
        if (a == "set_value") ++r_set;
        if (a == "delete_value" || a == "delete_key") ++r_delete;
        if (a == "set_value" && icontains(e->object, "\\currentversion\\run")) ++r_run;
        if ((a == "set_value" || a == "create_key") &&
            icontains(e->object, "\\currentcontrolset\\services\\")) {
          ++r_service;
        }
        if (a != "read" && contains_any(e->object, kPersistenceKeys)) ++r_persist;
        keys.insert(to_lower(e->object));
        break;
      case Category::user:
        if (a == "logon") ++logons;
        if (a == "logon_failed") ++failed;
        if (a == "create") ++created_users;
        if (a == "priv_change") ++priv;
        if (a == "logon" || a == "logon_failed") {
          const auto at = e->object.find('@');
          if (at != std::string::npos) src_hosts.insert(to_lower(e->object.substr(at + 1)));
        }
        break;
      case Category::service:
        break;
    }
  }

  // Process ancestry depth over processes created in this window.
  std::size_t max_depth = 0;
  for (const auto& [pid, ppid] : parent_of) {
    std::size_t depth = 1;
    auto cursor = ppid;
    while (depth <= kFeatureCount) {  // bounded walk guards against pid cycles
      auto it = parent_of.find(cursor);
      if (it == parent_of.end() || it->first == it->second) break;
      ++depth;
      cursor = it->second;
    }
    max_depth = std::max(max_depth, depth);
  }

  double beacon = 0.0;
  for (const auto& [dst, times] : conn_times) {
    if (times.size() < 3) continue;
    std::vector<double> gaps;
    for (std::size_t i = 1; i < times.size(); ++i) gaps.push_back(double(times[i] - times[i - 1]));
    double mean = 0;
    for (double g : gaps) mean += g;
    mean /= double(gaps.size());
    double var = 0;
    for (double g : gaps) var += (g - mean) * (g - mean);
    var /= double(gaps.size());
    const double cv = mean > 0 ? std::sqrt(var) / mean : 0.0;
    beacon = std::max(beacon, 1.0 / (1.0 + cv));
  }

  const double n = static_cast<double>(events.size());
  const double window_sec = static_cast<double>(window_ms) / 1000.0;
  std::size_t max_per_second = 0;
  for (const auto& [bucket, count] : per_second) max_per_second = std::max(max_per_second, count);

  double burst = 0.0, gap_var = 0.0;
  if (events.size() >= 3) {
    std::vector<double> gaps;
    for (std::size_t i = 1; i < events.size(); ++i) {
      gaps.push_back(double(events[i]->ts - events[i - 1]->ts) / 1000.0);
    }
    double mean = 0;
    for (double g : gaps) mean += g;
    mean /= double(gaps.size());
    for (double g : gaps) gap_var += (g - mean) * (g - mean);
    gap_var /= double(gaps.size());
    const double sd = std::sqrt(gap_var);
    if (sd + mean > 0) burst = ((sd - mean) / (sd + mean) + 1.0) / 2.0;
  }

  v[index(Feature::proc_new_count)] = saturate(double(proc_new), cap);
  v[index(Feature::proc_unique_images)] = saturate(double(images.size()), cap);
  v[index(Feature::proc_suspicious_parent_count)] = saturate(double(suspicious_parent), cap);
  v[index(Feature::cmdline_len_mean)] =
      proc_new ? saturate(cmd_len_sum / double(proc_new), cfg.cmdline_len_cap) : 0.0;
  v[index(Feature::cmdline_entropy_mean)] = proc_new ? cmd_entropy_sum / double(proc_new) : 0.0;
  v[index(Feature::proc_elevated_count)] = saturate(double(elevated), cap);
  v[index(Feature::proc_unsigned_count)] = saturate(double(unsigned_count), cap);
  v[index(Feature::proc_from_temp_count)] = saturate(double(from_temp), cap);
  v[index(Feature::proc_short_lived_count)] = saturate(double(short_lived), cap);
  v[index(Feature::proc_tree_depth_max)] = saturate(double(max_depth), cfg.tree_depth_cap);

  v[index(Feature::file_create_count)] = saturate(double(f_create), cap);
  v[index(Feature::file_modify_count)] = saturate(double(f_modify), cap);
  v[index(Feature::file_delete_count)] = saturate(double(f_delete), cap);
  v[index(Feature::file_exec_ext_writes)] = saturate(double(f_exec), cap);
  v[index(Feature::file_high_entropy_writes)] = saturate(double(f_entropy), cap);
  v[index(Feature::file_sensitive_path_touches)] = saturate(double(f_sensitive), cap);
  v[index(Feature::file_rename_burst)] = saturate(double(f_rename), cap);
  v[index(Feature::file_unique_dirs)] = saturate(double(dirs.size()), cap);

  v[index(Feature::net_conn_count)] = saturate(double(conns), cap);
  v[index(Feature::net_unique_dst_ips)] = saturate(double(dst_ips.size()), cap);
  v[index(Feature::net_unique_dst_ports)] = saturate(double(dst_ports.size()), cap);
  v[index(Feature::net_bytes_out)] = saturate(bytes_out, cfg.bytes_cap);
  v[index(Feature::net_bytes_in)] = saturate(bytes_in, cfg.bytes_cap);
  v[index(Feature::net_beacon_regularity)] = beacon;
  v[index(Feature::net_dns_count)] = saturate(double(dns), cap);
  v[index(Feature::net_rare_port_count)] = saturate(double(rare_ports), cap);
  v[index(Feature::net_external_ratio)] = conns ? double(external) / double(conns) : 0.0;

  v[index(Feature::reg_set_count)] = saturate(double(r_set), cap);
  v[index(Feature::reg_delete_count)] = saturate(double(r_delete), cap);
  v[index(Feature::reg_run_key_writes)] = saturate(double(r_run), cap);
  v[index(Feature::reg_service_key_writes)] = saturate(double(r_service), cap);
  v[index(Feature::reg_unique_keys)] = saturate(double(keys.size()), cap);
  v[index(Feature::reg_persistence_path_touches)] = saturate(double(r_persist), cap);

  v[index(Feature::logon_count)] = saturate(double(logons), cap);
  v[index(Feature::failed_logon_count)] = saturate(double(failed), cap);
  v[index(Feature::users_created)] = saturate(double(created_users), cap);
  v[index(Feature::priv_change_count)] = saturate(double(priv), cap);
  v[index(Feature::off_hours_events)] = saturate(double(off_hours), cap);
  v[index(Feature::distinct_src_hosts)] = saturate(double(src_hosts.size()), cap);

  v[index(Feature::events_per_sec_mean)] = saturate(n / window_sec, cfg.rate_cap);
  v[index(Feature::events_per_sec_max)] = saturate(double(max_per_second), cfg.rate_cap);
  v[index(Feature::burstiness)] = std::clamp(burst, 0.0, 1.0);
  v[index(Feature::inter_event_time_var)] = saturate(gap_var, window_sec * window_sec / 4.0);
  v[index(Feature::active_categories)] = double(categories.size()) / 6.0;
  v[index(Feature::window_span_sec)] =
      saturate(double(events.back()->ts - first_ts), double(window_ms));
  return fv;
}

}  // namespace edr::events
