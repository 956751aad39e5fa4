#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>

#include "edr/events.hpp"

namespace edr::events {

inline constexpr std::size_t kFeatureCount = 45;

/// Slot order of the feature vector. Groups: process (10), file (8),
/// network (9), registry (6), user/session (6), temporal (6).
enum class Feature : std::size_t {
  proc_new_count,
  proc_unique_images,
  proc_suspicious_parent_count,
  cmdline_len_mean,
  cmdline_entropy_mean,
  proc_elevated_count,
  proc_unsigned_count,
  proc_from_temp_count,
  proc_short_lived_count,
  proc_tree_depth_max,
  file_create_count,
  file_modify_count,
  file_delete_count,
  file_exec_ext_writes,
  file_high_entropy_writes,
  file_sensitive_path_touches,
  file_rename_burst,
  file_unique_dirs,
  net_conn_count,
  net_unique_dst_ips,
  net_unique_dst_ports,
  net_bytes_out,
  net_bytes_in,
  net_beacon_regularity,
  net_dns_count,
  net_rare_port_count,
  net_external_ratio,
  reg_set_count,
  reg_delete_count,
  reg_run_key_writes,
  reg_service_key_writes,
  reg_unique_keys,
  reg_persistence_path_touches,
  logon_count,
  failed_logon_count,
  users_created,
  priv_change_count,
  off_hours_events,
  distinct_src_hosts,
  events_per_sec_mean,
  events_per_sec_max,
  burstiness,
  inter_event_time_var,
  active_categories,
  window_span_sec,
};

constexpr std::size_t index(Feature f) noexcept { return static_cast<std::size_t>(f); }
std::string_view feature_name(std::size_t slot) noexcept;
std::span<const std::string_view> feature_names() noexcept;

/// Normalization table. Count-type slots divide by `count_cap` and saturate.
struct FeatureConfig {
  double count_cap = 100.0;             // per window
  double bytes_cap = 10.0 * 1024 * 1024;
  double cmdline_len_cap = 1024.0;      // characters
  double tree_depth_cap = 10.0;
  double rate_cap = 10.0;               // events per second
  TimestampMs short_lived_ms = 10'000;  // create -> terminate
  int off_hours_start = 0;              // local hour, inclusive
  int off_hours_end = 6;                // local hour, exclusive
  int utc_offset_minutes = 0;           // agent-local time
};

struct FeatureVector {
  std::array<double, kFeatureCount> values{};
  std::string window_id;
  std::string agent_id;

  double operator[](Feature f) const noexcept { return values[index(f)]; }
  double& operator[](Feature f) noexcept { return values[index(f)]; }
};

/// Shannon entropy of the bytes of `text`, divided by log2(256).
double normalized_entropy(std::string_view text) noexcept;

/// Builds the 45-slot vector for one agent window. Input order does not
/// matter; events are ordered by (ts, id) internally. An empty window gives
/// all zeros. Throws Error on mixed agent ids or a non-positive window.
FeatureVector extract_features(std::span<const SystemEvent> events, TimestampMs window_ms,
                               const FeatureConfig& config = {});
FeatureVector extract_features(std::span<const SystemEvent* const> events, TimestampMs window_ms,
                               const FeatureConfig& config = {});

}  // namespace edr::events
