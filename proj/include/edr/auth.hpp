#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "edr/crypto.hpp"

namespace edr::auth {

enum class Role { viewer, analyst, admin };

std::string_view to_string(Role r) noexcept;
std::optional<Role> parse_role(std::string_view text) noexcept;

struct Claims {
  std::string sub;
  Role role = Role::viewer;
  std::int64_t iat = 0;  // unix seconds
  std::int64_t exp = 0;
};

/// HS256 compact serialization.
std::string encode_jwt(const Claims& claims, std::string_view key);

enum class TokenError { malformed, bad_algorithm, bad_signature, expired };
std::string_view to_string(TokenError e) noexcept;

struct TokenCheck {
  std::optional<Claims> claims;
  std::optional<TokenError> error;
};

/// Verifies signature and expiry against `now` (unix seconds).
TokenCheck decode_jwt(std::string_view token, std::string_view key, std::int64_t now);

struct UserRecord {
  std::string name;
  Role role = Role::viewer;
  std::string password_hash;
};

/// Principals with scrypt password hashes. Thread-safe.
class UserStore {
 public:
  explicit UserStore(crypto::ScryptParams params = {}) : params_(params) {}

  /// Returns false when the name is taken.
  bool add(const std::string& name, std::string_view password, Role role);
  bool add_hashed(UserRecord record);
  /// Same cost and same answer whether the user is missing or the password wrong.
  std::optional<Role> authenticate(const std::string& name, std::string_view password) const;
  std::optional<UserRecord> find(const std::string& name) const;
  std::vector<UserRecord> list() const;
  std::size_t size() const;

  nlohmann::json to_json() const;
  void restore(const nlohmann::json& arr);

 private:
  crypto::ScryptParams params_;
  mutable std::mutex mu_;
  std::map<std::string, UserRecord> users_;
  mutable std::string dummy_hash_;  // computed on first miss
};

}  // namespace edr::auth
