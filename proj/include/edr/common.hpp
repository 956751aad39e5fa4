#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace edr {

/// Four-step ordinal used for event severity hints, rule severities,
/// technique impact and risk tiers.
enum class Level { low, medium, high, critical };

std::string_view to_string(Level level) noexcept;
std::optional<Level> parse_level(std::string_view text) noexcept;

/// Milliseconds since the unix epoch, UTC.
using TimestampMs = std::int64_t;

/// Parses RFC 3339 (`2025-03-01T09:00:00.123Z`, offsets allowed) into UTC ms.
std::optional<TimestampMs> parse_rfc3339(std::string_view text) noexcept;
/// Always emits `YYYY-MM-DDTHH:MM:SS.mmmZ`.
std::string format_rfc3339(TimestampMs ts);

TimestampMs wall_clock_ms() noexcept;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string to_lower(std::string_view s);
bool iequals(std::string_view a, std::string_view b) noexcept;
bool istarts_with(std::string_view s, std::string_view prefix) noexcept;
bool iends_with(std::string_view s, std::string_view suffix) noexcept;
bool icontains(std::string_view s, std::string_view needle) noexcept;

}  // namespace edr
