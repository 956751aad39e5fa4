#pragma once

#include <memory>
#include <regex>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/events.hpp"

namespace edr {

enum class MatchOp { equals, prefix, suffix, contains, regex, gte, lte };

std::string_view to_string(MatchOp op) noexcept;
std::optional<MatchOp> parse_match_op(std::string_view text) noexcept;

/// One `{field, op, value}` test against a SystemEvent field. String ops are
/// case-insensitive (event paths are Windows-style); gte/lte compare numbers.
class FieldPredicate {
 public:
  FieldPredicate(std::string field, MatchOp op, std::string value, bool negate = false);

  /// Throws Error naming the field or op on invalid input.
  static FieldPredicate from_json(const nlohmann::json& obj);
  nlohmann::json to_json() const;

  bool matches(const events::SystemEvent& e) const;

  const std::string& field() const noexcept { return field_; }
  MatchOp op() const noexcept { return op_; }
  const std::string& value() const noexcept { return value_; }
  bool negated() const noexcept { return negate_; }

 private:
  std::string field_;
  MatchOp op_;
  std::string value_;
  bool negate_ = false;
  double number_ = 0.0;
  std::shared_ptr<const std::regex> regex_;
};

using Conjunction = std::vector<FieldPredicate>;

bool matches_all(std::span<const FieldPredicate> preds, const events::SystemEvent& e);
Conjunction conjunction_from_json(const nlohmann::json& arr);
nlohmann::json to_json(std::span<const FieldPredicate> preds);

}  // namespace edr
