#include "edr/auth.hpp"

#include "edr/common.hpp"

namespace edr::auth {

std::string_view to_string(Role r) noexcept {
  switch (r) {
    case Role::viewer: return "viewer";
    case Role::analyst: return "analyst";
    case Role::admin: return "admin";
  }
  return "viewer";
}

std::optional<Role> parse_role(std::string_view text) noexcept {
  if (text == "viewer") return Role::viewer;
  if (text == "analyst") return Role::analyst;
  if (text == "admin") return Role::admin;
  return std::nullopt;
}

std::string encode_jwt(const Claims& claims, std::string_view key) {
  static const std::string header =
      crypto::base64url_encode(R"({"alg":"HS256","typ":"JWT"})");
  const nlohmann::json payload{{"sub", claims.sub},
                               {"role", std::string(to_string(claims.role))},
                               {"iat", claims.iat},
                               {"exp", claims.exp}};
  std::string signing_input = header + "." + crypto::base64url_encode(payload.dump());
  const auto sig = crypto::base64url_encode(crypto::hmac_sha256(key, signing_input));
  return signing_input + "." + sig;
}

std::string_view to_string(TokenError e) noexcept {
  switch (e) {
    case TokenError::malformed: return "malformed";
    case TokenError::bad_algorithm: return "bad_algorithm";
    case TokenError::bad_signature: return "bad_signature";
    case TokenError::expired: return "expired";
  }
  return "malformed";
}

TokenCheck decode_jwt(std::string_view token, std::string_view key, std::int64_t now) {
  const auto first = token.find('.');
  const auto second = first == std::string_view::npos ? first : token.find('.', first + 1);
  if (second == std::string_view::npos || token.find('.', second + 1) != std::string_view::npos) {
    return {std::nullopt, TokenError::malformed};
  }
  const auto header_raw = crypto::base64url_decode(token.substr(0, first));
  const auto payload_raw = crypto::base64url_decode(token.substr(first + 1, second - first - 1));
  const auto sig = crypto::base64url_decode(token.substr(second + 1));
  if (!header_raw || !payload_raw || !sig) return {std::nullopt, TokenError::malformed};

  nlohmann::json header, payload;
  try {
    header = nlohmann::json::parse(*header_raw);
    payload = nlohmann::json::parse(*payload_raw);
  } catch (const nlohmann::json::parse_error&) {
    return {std::nullopt, TokenError::malformed};
  }
  if (!header.is_object() || header.value("alg", std::string{}) != "HS256") {
    return {std::nullopt, TokenError::bad_algorithm};
  }
  const auto expected = crypto::hmac_sha256(key, token.substr(0, second));
  if (!crypto::constant_time_equals(expected, *sig)) return {std::nullopt, TokenError::bad_signature};

  Claims c;
  try {
    c.sub = payload.at("sub").get<std::string>();
    auto role = parse_role(payload.at("role").get<std::string>());
    if (!role) return {std::nullopt, TokenError::malformed};
    c.role = *role;
    c.iat = payload.value("iat", std::int64_t{0});
    c.exp = payload.at("exp").get<std::int64_t>();
  } catch (const nlohmann::json::exception&) {
    return {std::nullopt, TokenError::malformed};
  }
  if (now >= c.exp) return {std::nullopt, TokenError::expired};
  return {c, std::nullopt};
}

bool UserStore::add(const std::string& name, std::string_view password, Role role) {
  if (name.empty()) throw Error("user name must not be empty");
  if (password.size() < 8) throw Error("password must be at least 8 characters");
  auto hash = crypto::hash_password(password, params_);
  std::lock_guard lock(mu_);
  return users_.emplace(name, UserRecord{name, role, std::move(hash)}).second;
}

bool UserStore::add_hashed(UserRecord record) {
  std::lock_guard lock(mu_);
  const auto name = record.name;
  return users_.emplace(name, std::move(record)).second;
}

std::optional<Role> UserStore::authenticate(const std::string& name,
                                            std::string_view password) const {
  std::string hash;
  std::optional<Role> role;
  {
    std::lock_guard lock(mu_);
    if (auto it = users_.find(name); it != users_.end()) {
      hash = it->second.password_hash;
      role = it->second.role;
    } else {
      if (dummy_hash_.empty()) {
        dummy_hash_ = crypto::hash_password("not-a-password", params_);
      }
      hash = dummy_hash_;
    }
  }
  const bool ok = crypto::verify_password(password, hash);
  if (!ok || !role) return std::nullopt;
  return role;
}

std::optional<UserRecord> UserStore::find(const std::string& name) const {
  std::lock_guard lock(mu_);
  auto it = users_.find(name);
  if (it == users_.end()) return std::nullopt;
  return it->second;
}

std::vector<UserRecord> UserStore::list() const {
  std::lock_guard lock(mu_);
  std::vector<UserRecord> out;
  for (const auto& [n, u] : users_) out.push_back(u);
  return out;
}

std::size_t UserStore::size() const {
  std::lock_guard lock(mu_);
  return users_.size();
}

nlohmann::json UserStore::to_json() const {
  std::lock_guard lock(mu_);
  auto arr = nlohmann::json::array();
  for (const auto& [n, u] : users_) {
    arr.push_back({{"name", u.name}, {"role", std::string(to_string(u.role))},
                   {"password_hash", u.password_hash}});
  }
  return arr;
}

void UserStore::restore(const nlohmann::json& arr) {
  std::lock_guard lock(mu_);
  users_.clear();
  for (const auto& u : arr) {
    auto role = parse_role(u.at("role").get<std::string>());
    if (!role) throw Error("stored user has unknown role");
    const auto name = u.at("name").get<std::string>();
    users_[name] = {name, *role, u.at("password_hash").get<std::string>()};
  }
}

}  // namespace edr::auth
