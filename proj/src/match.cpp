#include "edr/match.hpp"

#include <array>
#include <charconv>

namespace edr {

namespace {

constexpr std::array<std::string_view, 7> kOpNames{"equals", "prefix", "suffix", "contains",
                                                   "regex",  "gte",    "lte"};

std::optional<double> to_number(std::string_view s) {
  double out = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return out;
}

}  // namespace

std::string_view to_string(MatchOp op) noexcept { return kOpNames[static_cast<std::size_t>(op)]; }

std::optional<MatchOp> parse_match_op(std::string_view text) noexcept {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == text) return static_cast<MatchOp>(i);
  }
  return std::nullopt;
}

FieldPredicate::FieldPredicate(std::string field, MatchOp op, std::string value, bool negate)
    : field_(std::move(field)), op_(op), value_(std::move(value)), negate_(negate) {
  if (!events::known_field(field_)) throw Error("unknown event field '" + field_ + "'");
  if (op_ == MatchOp::regex) {
    try {
      regex_ = std::make_shared<const std::regex>(
          value_, std::regex::ECMAScript | std::regex::icase | std::regex::optimize);
    } catch (const std::regex_error& e) {
      throw Error("invalid regex for field '" + field_ + "': " + e.what());
    }
  }
  if (op_ == MatchOp::gte || op_ == MatchOp::lte) {
    auto number = to_number(value_);
    if (!number) throw Error("numeric comparison on '" + field_ + "' needs a number");
    number_ = *number;
  }
}

FieldPredicate FieldPredicate::from_json(const nlohmann::json& obj) {
  if (!obj.is_object()) throw Error("predicate must be an object");
  const auto field = obj.value("field", std::string{});
  const auto op_text = obj.value("op", std::string{"equals"});
  auto op = parse_match_op(op_text);
  if (!op) throw Error("unknown predicate op '" + op_text + "' on field '" + field + "'");
  std::string value;
  if (auto it = obj.find("value"); it != obj.end()) {
    value = it->is_string() ? it->get<std::string>() : it->dump();
  }
  return FieldPredicate(field, *op, value, obj.value("negate", false));
}

nlohmann::json FieldPredicate::to_json() const {
  nlohmann::json obj{{"field", field_}, {"op", std::string(edr::to_string(op_))}, {"value", value_}};
  if (negate_) obj["negate"] = true;
  return obj;
}

bool FieldPredicate::matches(const events::SystemEvent& e) const {
  const auto actual = events::field_value(e, field_);
  bool hit = false;
  if (actual) {
    switch (op_) {
      case MatchOp::equals: hit = iequals(*actual, value_); break;
      case MatchOp::prefix: hit = istarts_with(*actual, value_); break;
      case MatchOp::suffix: hit = iends_with(*actual, value_); break;
      case MatchOp::contains: hit = icontains(*actual, value_); break;
      case MatchOp::regex: hit = std::regex_search(*actual, *regex_); break;
      case MatchOp::gte:
      case MatchOp::lte: {
        auto number = to_number(*actual);
        hit = number && (op_ == MatchOp::gte ? *number >= number_ : *number <= number_);
        break;
      }
    }
  }
  return hit != negate_;
}

bool matches_all(std::span<const FieldPredicate> preds, const events::SystemEvent& e) {
  for (const auto& p : preds) {
    if (!p.matches(e)) return false;
  }
  return true;
}

Conjunction conjunction_from_json(const nlohmann::json& arr) {
  if (!arr.is_array()) throw Error("predicate list must be an array");
  Conjunction out;
  for (const auto& p : arr) out.push_back(FieldPredicate::from_json(p));
  return out;
}

nlohmann::json to_json(std::span<const FieldPredicate> preds) {
  auto arr = nlohmann::json::array();
  for (const auto& p : preds) arr.push_back(p.to_json());
  return arr;
}

}  // namespace edr
