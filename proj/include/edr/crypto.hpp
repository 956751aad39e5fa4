#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace edr::crypto {

/// Raw 32-byte digests returned as binary strings.
std::string hmac_sha256(std::string_view key, std::string_view message);
std::string sha256(std::string_view data);

std::string random_bytes(std::size_t n);

std::string to_hex(std::string_view bytes);
std::optional<std::string> from_hex(std::string_view hex);

std::string base64_encode(std::string_view bytes);
std::optional<std::string> base64_decode(std::string_view text);
std::string base64url_encode(std::string_view bytes);
std::optional<std::string> base64url_decode(std::string_view text);

/// Length-independent timing for equal-sized inputs.
bool constant_time_equals(std::string_view a, std::string_view b) noexcept;

struct ScryptParams {
  std::uint64_t n = 16384;
  std::uint64_t r = 8;
  std::uint64_t p = 1;
};

/// "scrypt$N$r$p$<salt hex>$<key hex>".
std::string hash_password(std::string_view password, const ScryptParams& params = {});
bool verify_password(std::string_view password, std::string_view encoded);

}  // namespace edr::crypto
