#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/common.hpp"

namespace edr::events {

enum class Category { process, file, network, registry, user, service };

std::string_view to_string(Category c) noexcept;
std::optional<Category> parse_category(std::string_view text) noexcept;

/// Actions accepted for each category.
std::span<const std::string_view> actions_for(Category c) noexcept;
bool valid_action(Category c, std::string_view action) noexcept;

/// The acting process. For process/create events this is the new process and
/// `SystemEvent::object` carries the parent image.
struct ProcessRef {
  std::int64_t pid = 0;
  std::int64_t ppid = 0;
  std::string image;
  std::string cmdline;
  std::string user;
  bool is_signed = true;
  bool elevated = false;

  bool operator==(const ProcessRef&) const = default;
};

struct SystemEvent {
  std::string id;
  TimestampMs ts = 0;
  std::string agent_id;
  Category category = Category::process;
  std::string action;
  ProcessRef subject;
  std::string object;
  std::uint64_t bytes_in = 0;
  std::uint64_t bytes_out = 0;
  std::optional<Level> severity_hint;
  std::optional<std::string> label;  // "benign" or a technique id

  bool is_malicious_label() const noexcept { return label && *label != "benign"; }
  bool operator==(const SystemEvent&) const = default;
};

class EventParseError : public Error {
 public:
  EventParseError(std::string message, std::string field)
      : Error(std::move(message)), field_(std::move(field)) {}
  /// Name of the offending field; empty for malformed JSON.
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

SystemEvent parse_event(std::string_view line);
SystemEvent event_from_json(const nlohmann::json& obj);
nlohmann::json to_json(const SystemEvent& e);
/// Compact single-line JSON.
std::string to_jsonl(const SystemEvent& e);

/// String view of a dotted field ("category", "subject.image", "bytes_out", ...)
/// used by noise and detection predicates. Unknown fields yield nullopt.
std::optional<std::string> field_value(const SystemEvent& e, std::string_view field);
bool known_field(std::string_view field) noexcept;

/// "10.1.2.3:443" -> ("10.1.2.3", 443). Port is 0 when absent or malformed.
struct Endpoint {
  std::string host;
  int port = 0;
};
Endpoint split_endpoint(std::string_view object);
bool is_private_ipv4(std::string_view host) noexcept;
bool is_ipv4_literal(std::string_view host) noexcept;

/// Stable order by (ts, id).
void sort_events(std::vector<SystemEvent>& events);

struct DatasetSplit {
  double train_frac = 0.70;
  double val_frac = 0.15;
  double test_frac = 0.15;

  /// Throws Error unless all fractions are positive and sum to 1 within 1e-9.
  void validate() const;
};

}  // namespace edr::events
