#include "edr/events.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>

namespace edr::events {

namespace {

constexpr std::array<std::string_view, 6> kCategoryNames{
    "process", "file", "network", "registry", "user", "service"};

constexpr std::array<std::string_view, 5> kProcessActions{"create", "terminate", "access",
                                                          "inject", "load_image"};
constexpr std::array<std::string_view, 5> kFileActions{"create", "modify", "delete", "rename",
                                                       "read"};
constexpr std::array<std::string_view, 3> kNetworkActions{"connect", "listen", "dns"};
constexpr std::array<std::string_view, 5> kRegistryActions{"set_value", "delete_value",
                                                           "create_key", "delete_key", "read"};
constexpr std::array<std::string_view, 6> kUserActions{"logon",  "logon_failed", "logoff",
                                                       "create", "delete",       "priv_change"};
constexpr std::array<std::string_view, 4> kServiceActions{"install", "start", "stop", "delete"};

constexpr std::array<std::string_view, 16> kFields{
    "id",           "agent_id",      "category",      "action",         "object",
    "bytes_in",     "bytes_out",     "severity_hint", "label",          "subject.pid",
    "subject.ppid", "subject.image", "subject.cmdline", "subject.user", "subject.signed",
    "subject.elevated"};

template <typename T>
T get_field(const nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) {
    throw EventParseError(std::string("missing required field '") + key + "'", key);
  }
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw EventParseError(std::string("wrong type for field '") + key + "'", key);
  }
}

template <typename T>
T get_optional(const nlohmann::json& obj, const char* key, T fallback, const char* path) {
  auto it = obj.find(key);
  if (it == obj.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw EventParseError(std::string("wrong type for field '") + path + "'", path);
  }
}

}  // namespace

std::string_view to_string(Category c) noexcept {
  return kCategoryNames[static_cast<std::size_t>(c)];
}

std::optional<Category> parse_category(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == text) return static_cast<Category>(i);
  }
  return std::nullopt;
}

std::span<const std::string_view> actions_for(Category c) noexcept {
  switch (c) {
    case Category::process: return kProcessActions;
    case Category::file: return kFileActions;
    case Category::network: return kNetworkActions;
    case Category::registry: return kRegistryActions;
    case Category::user: return kUserActions;
    case Category::service: return kServiceActions;
  }
  return {};
}

bool valid_action(Category c, std::string_view action) noexcept {
  auto actions = actions_for(c);
  return std::find(actions.begin(), actions.end(), action) != actions.end();
}

SystemEvent event_from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw EventParseError("event must be a JSON object", "");
  SystemEvent e;
  e.id = get_field<std::string>(obj, "id");
  const auto ts_text = get_field<std::string>(obj, "ts");
  auto ts = parse_rfc3339(ts_text);
  if (!ts) throw EventParseError("unparseable timestamp '" + ts_text + "'", "ts");
  e.ts = *ts;
  e.agent_id = get_field<std::string>(obj, "agent_id");
  const auto category = get_field<std::string>(obj, "category");
  auto cat = parse_category(category);
  if (!cat) throw EventParseError("invalid category '" + category + "'", "category");
  e.category = *cat;
  e.action = get_field<std::string>(obj, "action");
  if (!valid_action(e.category, e.action)) {
    throw EventParseError("action '" + e.action + "' not valid for category " + category,
                          "action");
  }
  if (auto it = obj.find("subject"); it != obj.end() && !it->is_null()) {
    if (!it->is_object()) throw EventParseError("'subject' must be an object", "subject");
    const auto& s = *it;
    e.subject.pid = get_optional<std::int64_t>(s, "pid", 0, "subject.pid");
    e.subject.ppid = get_optional<std::int64_t>(s, "ppid", 0, "subject.ppid");
    e.subject.image = get_optional<std::string>(s, "image", "", "subject.image");
    e.subject.cmdline = get_optional<std::string>(s, "cmdline", "", "subject.cmdline");
    e.subject.user = get_optional<std::string>(s, "user", "", "subject.user");
    e.subject.is_signed = get_optional<bool>(s, "signed", true, "subject.signed");
    e.subject.elevated = get_optional<bool>(s, "elevated", false, "subject.elevated");
  }
  e.object = get_optional<std::string>(obj, "object", "", "object");
  const auto bytes_in = get_optional<std::int64_t>(obj, "bytes_in", 0, "bytes_in");
  const auto bytes_out = get_optional<std::int64_t>(obj, "bytes_out", 0, "bytes_out");
  if (bytes_in < 0) throw EventParseError("bytes_in must be non-negative", "bytes_in");
  if (bytes_out < 0) throw EventParseError("bytes_out must be non-negative", "bytes_out");
  if (e.category != Category::network && (bytes_in != 0 || bytes_out != 0)) {
    throw EventParseError("byte counters are only valid on network events",
                          bytes_in != 0 ? "bytes_in" : "bytes_out");
  }
  e.bytes_in = static_cast<std::uint64_t>(bytes_in);
  e.bytes_out = static_cast<std::uint64_t>(bytes_out);
  if (auto it = obj.find("severity_hint"); it != obj.end() && !it->is_null()) {
    auto level = it->is_string() ? parse_level(it->get<std::string>()) : std::nullopt;
    if (!level) throw EventParseError("invalid severity_hint", "severity_hint");
    e.severity_hint = level;
  }
  if (auto it = obj.find("label"); it != obj.end() && !it->is_null()) {
    if (!it->is_string()) throw EventParseError("label must be a string", "label");
    e.label = it->get<std::string>();
  }
  return e;
}

SystemEvent parse_event(std::string_view line) {
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& ex) {
    throw EventParseError(std::string("malformed JSON: ") + ex.what(), "");
  }
  return event_from_json(obj);
}

nlohmann::json to_json(const SystemEvent& e) {
  nlohmann::json obj{
      {"id", e.id},
      {"ts", format_rfc3339(e.ts)},
      {"agent_id", e.agent_id},
      {"category", std::string(to_string(e.category))},
      {"action", e.action},
      {"subject",
       {{"pid", e.subject.pid},
        {"ppid", e.subject.ppid},
        {"image", e.subject.image},
        {"cmdline", e.subject.cmdline},
        {"user", e.subject.user},
        {"signed", e.subject.is_signed},
        {"elevated", e.subject.elevated}}},
      {"object", e.object},
      {"bytes_in", e.bytes_in},
      {"bytes_out", e.bytes_out},
  };
  if (e.severity_hint) obj["severity_hint"] = std::string(edr::to_string(*e.severity_hint));
  if (e.label) obj["label"] = *e.label;
  return obj;
}

std::string to_jsonl(const SystemEvent& e) { return to_json(e).dump(); }

bool known_field(std::string_view field) noexcept {
  return std::find(kFields.begin(), kFields.end(), field) != kFields.end();
}

std::optional<std::string> field_value(const SystemEvent& e, std::string_view field) {
  if (field == "id") return e.id;
  if (field == "agent_id") return e.agent_id;
  if (field == "category") return std::string(to_string(e.category));
  if (field == "action") return e.action;
  if (field == "object") return e.object;
  if (field == "bytes_in") return std::to_string(e.bytes_in);
  if (field == "bytes_out") return std::to_string(e.bytes_out);
  if (field == "severity_hint") {
    return e.severity_hint ? std::string(edr::to_string(*e.severity_hint)) : std::string{};
  }
  if (field == "label") return e.label.value_or("");
  if (field == "subject.pid") return std::to_string(e.subject.pid);
  if (field == "subject.ppid") return std::to_string(e.subject.ppid);
  if (field == "subject.image") return e.subject.image;
  if (field == "subject.cmdline") return e.subject.cmdline;
  if (field == "subject.user") return e.subject.user;
  if (field == "subject.signed") return e.subject.is_signed ? "true" : "false";
  if (field == "subject.elevated") return e.subject.elevated ? "true" : "false";
  return std::nullopt;
}

Endpoint split_endpoint(std::string_view object) {
  Endpoint ep;
  const auto colon = object.rfind(':');
  if (colon == std::string_view::npos) {
    ep.host = std::string(object);
    return ep;
  }
  ep.host = std::string(object.substr(0, colon));
  const auto port_text = object.substr(colon + 1);
  int port = 0;
  auto [p, ec] = std::from_chars(port_text.data(), port_text.data() + port_text.size(), port);
  if (ec == std::errc{} && p == port_text.data() + port_text.size() && port >= 0 &&
      port <= 65535) {
    ep.port = port;
  }
  return ep;
}

bool is_ipv4_literal(std::string_view host) noexcept {
  int parts = 0;
  std::size_t pos = 0;
  while (pos <= host.size()) {
    const auto dot = host.find('.', pos);
    const auto part = host.substr(pos, dot == std::string_view::npos ? host.size() - pos : dot - pos);
    if (part.empty() || part.size() > 3) return false;
    int value = 0;
    auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
    if (ec != std::errc{} || p != part.data() + part.size() || value > 255) return false;
    ++parts;
    if (dot == std::string_view::npos) break;
    pos = dot + 1;
  }
  return parts == 4;
}

bool is_private_ipv4(std::string_view host) noexcept {
  if (!is_ipv4_literal(host)) return false;
  int a = 0, b = 0;
  std::from_chars(host.data(), host.data() + host.size(), a);
  const auto dot = host.find('.');
  std::from_chars(host.data() + dot + 1, host.data() + host.size(), b);
  return a == 10 || a == 127 || (a == 172 && b >= 16 && b <= 31) || (a == 192 && b == 168) ||
         (a == 169 && b == 254);
}

void sort_events(std::vector<SystemEvent>& events) {
  std::stable_sort(events.begin(), events.end(), [](const SystemEvent& a, const SystemEvent& b) {
    return a.ts != b.ts ? a.ts < b.ts : a.id < b.id;
  });
}

void DatasetSplit::validate() const {
  if (!(train_frac > 0 && val_frac > 0 && test_frac > 0)) {
    throw Error("dataset split fractions must all be positive");
  }
  if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9) {
    throw Error("dataset split fractions must sum to 1.0");
  }
}

}  // namespace edr::events
