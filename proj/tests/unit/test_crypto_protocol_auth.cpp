#include <gtest/gtest.h>

#include <set>

#include "edr/auth.hpp"
#include "edr/crypto.hpp"
#include "edr/protocol.hpp"
#include "edr/rng.hpp"
#include "test_util.hpp"

using namespace edr;
using protocol::Rejection;
using testutil::kT0;

namespace {

protocol::AgentCredentials creds(const std::string& id = "agent-001") {
  return protocol::mint_credentials(id, kT0);
}

std::string batch_body(std::size_t n = 3) {
  protocol::Payload p;
  for (std::size_t i = 0; i < n; ++i) {
    p.events.push_back(testutil::make_event("e" + std::to_string(i), kT0 + static_cast<TimestampMs>(i),
                                            events::Category::file, "create", "C:\\x.exe", "C:\\f.txt"));
  }
  // sign_envelope encodes the body itself, so hand it plain JSON.
  return *crypto::base64_decode(protocol::encode_payload(p));
}

}  // namespace

// ---- crypto -----------------------------------------------------------------

TEST(Crypto, HmacKnownAnswers) {
  EXPECT_EQ(crypto::to_hex(crypto::hmac_sha256("Jefe", "what do ya want for nothing?")),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843");
  // RFC 4231 case 1
  EXPECT_EQ(crypto::to_hex(crypto::hmac_sha256(std::string(20, '\x0b'), "Hi There")),
            "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7");
  EXPECT_EQ(crypto::to_hex(crypto::sha256("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Crypto, EncodingsRoundTrip) {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    std::string bytes(rng.below(64), '\0');
    for (auto& c : bytes) c = static_cast<char>(rng.below(256));
    EXPECT_EQ(crypto::from_hex(crypto::to_hex(bytes)), bytes);
    EXPECT_EQ(crypto::base64_decode(crypto::base64_encode(bytes)), bytes);
    const auto url = crypto::base64url_encode(bytes);
    EXPECT_EQ(url.find_first_of("+/="), std::string::npos);
    EXPECT_EQ(crypto::base64url_decode(url), bytes);
  }
  EXPECT_EQ(crypto::base64_encode("foobar"), "Zm9vYmFy");
  EXPECT_EQ(crypto::base64_encode("fo"), "Zm8=");
  EXPECT_FALSE(crypto::from_hex("abc"));
  EXPECT_FALSE(crypto::from_hex("zz"));
  EXPECT_FALSE(crypto::base64_decode("Zm9v!"));
  EXPECT_EQ(crypto::random_bytes(32).size(), 32u);
  EXPECT_NE(crypto::random_bytes(16), crypto::random_bytes(16));
}

TEST(Crypto, ConstantTimeEquals) {
  EXPECT_TRUE(crypto::constant_time_equals("abc", "abc"));
  EXPECT_FALSE(crypto::constant_time_equals("abc", "abd"));
  EXPECT_FALSE(crypto::constant_time_equals("abc", "abcd"));
}

TEST(Crypto, ScryptHashVerify) {
  const crypto::ScryptParams fast{1024, 8, 1};
  const auto h = crypto::hash_password("hunter2", fast);
  EXPECT_EQ(h.rfind("scrypt$1024$8$1$", 0), 0u);
  EXPECT_TRUE(crypto::verify_password("hunter2", h));
  EXPECT_FALSE(crypto::verify_password("hunter3", h));
  EXPECT_NE(crypto::hash_password("hunter2", fast), h);  // salted
  EXPECT_FALSE(crypto::verify_password("hunter2", "scrypt$bogus"));
  EXPECT_FALSE(crypto::verify_password("hunter2", ""));
}

// ---- envelopes --------------------------------------------------------------

TEST(Envelope, SignVerifyAndJsonRoundTrip) {
  const auto c = creds();
  EXPECT_GE(c.shared_secret.size(), 32u);
  const auto env = protocol::sign_envelope(batch_body(), c, 1, kT0, protocol::make_nonce());
  EXPECT_EQ(env.nonce.size(), 32u);
  EXPECT_EQ(env.mac.size(), 64u);
  EXPECT_EQ(protocol::envelope_from_json(protocol::to_json(env)), env);
  protocol::VerifyState st;
  EXPECT_TRUE(protocol::verify_envelope(env, c, st, kT0).accepted());
  EXPECT_EQ(st.last_seq, 1u);
  const auto p = protocol::decode_payload(env.body);
  EXPECT_EQ(p.events.size(), 3u);
  EXPECT_EQ(p.kind, "batch");
  EXPECT_THROW(protocol::envelope_from_json({{"v", 1}}), Error);
  EXPECT_EQ(protocol::canonical_string(env),
            "1|agent-001|1|" + std::to_string(kT0) + "|" + env.nonce + "|" + env.body);
}

TEST(Envelope, EverySingleBitFlipIsRejected) {
  const auto c = creds();
  const auto body = batch_body(5);
  Rng rng(77);
  std::size_t rejected = 0;
  constexpr int kTrials = 10'000;
  for (int i = 0; i < kTrials; ++i) {
    auto env = protocol::sign_envelope(body, c, 10, kT0, protocol::make_nonce());
    // Flip one bit in one of the authenticated fields or the MAC.
    std::string* fields[] = {&env.agent_id, &env.nonce, &env.body, &env.mac};
    const auto pick = rng.below(6);
    if (pick < 4) {
      auto& s = *fields[pick];
      const auto pos = rng.below(s.size());
      s[pos] = static_cast<char>(s[pos] ^ (1 << rng.below(8)));
    } else if (pick == 4) {
      env.seq ^= 1ULL << rng.below(64);
    } else {
      env.ts ^= 1LL << rng.below(40);
    }
    protocol::VerifyState st;
    st.last_seq = 0;
    if (!protocol::verify_envelope(env, c, st, kT0).accepted()) ++rejected;
  }
  EXPECT_EQ(rejected, static_cast<std::size_t>(kTrials));
}

TEST(Envelope, RejectionReasonsAreDistinct) {
  const auto c = creds();
  protocol::VerifyState st;
  const auto nonce = protocol::make_nonce();
  ASSERT_TRUE(protocol::verify_envelope(protocol::sign_envelope(batch_body(), c, 5, kT0, nonce), c, st, kT0).accepted());

  auto reason = [&](const protocol::Envelope& e, TimestampMs now = kT0) {
    auto copy = st;
    return protocol::verify_envelope(e, c, copy, now).rejection;
  };
  auto replay = protocol::sign_envelope(batch_body(), c, 6, kT0, nonce);
  EXPECT_EQ(reason(replay), Rejection::replayed_nonce);
  auto stale = protocol::sign_envelope(batch_body(), c, 5, kT0, protocol::make_nonce());
  EXPECT_EQ(reason(stale), Rejection::stale_seq);
  auto older = protocol::sign_envelope(batch_body(), c, 4, kT0, protocol::make_nonce());
  EXPECT_EQ(reason(older), Rejection::stale_seq);
  auto skewed = protocol::sign_envelope(batch_body(), c, 7, kT0 + protocol::kDefaultSkewMs + 1, protocol::make_nonce());
  EXPECT_EQ(reason(skewed), Rejection::clock_skew);
  auto edge = protocol::sign_envelope(batch_body(), c, 7, kT0 + protocol::kDefaultSkewMs, protocol::make_nonce());
  EXPECT_FALSE(reason(edge));
  auto forged = protocol::sign_envelope(batch_body(), creds(), 7, kT0, protocol::make_nonce());
  EXPECT_EQ(reason(forged), Rejection::bad_mac);
  auto version = protocol::sign_envelope(batch_body(), c, 7, kT0, protocol::make_nonce());
  version.v = 2;
  EXPECT_EQ(reason(version), Rejection::bad_version);
  auto other = protocol::sign_envelope(batch_body(), creds("agent-002"), 7, kT0, protocol::make_nonce());
  EXPECT_EQ(reason(other), Rejection::unknown_agent);

  std::set<std::string> names;
  for (auto r : {Rejection::bad_version, Rejection::unknown_agent, Rejection::bad_mac, Rejection::stale_seq,
                 Rejection::clock_skew, Rejection::replayed_nonce}) {
    names.insert(std::string(protocol::to_string(r)));
  }
  EXPECT_EQ(names.size(), 6u);
  // Rejections leave the state alone.
  EXPECT_EQ(st.last_seq, 5u);
  EXPECT_EQ(st.nonces.size(), 1u);
}

TEST(Envelope, NonceMemoryExpires) {
  const auto c = creds();
  protocol::VerifyState st;
  const auto nonce = protocol::make_nonce();
  ASSERT_TRUE(protocol::verify_envelope(protocol::sign_envelope("", c, 1, kT0, nonce), c, st, kT0).accepted());
  const TimestampMs later = kT0 + 2 * protocol::kDefaultSkewMs + 1;
  ASSERT_TRUE(protocol::verify_envelope(protocol::sign_envelope("", c, 2, later, protocol::make_nonce()), c, st, later)
                  .accepted());
  EXPECT_FALSE(st.nonces.contains(nonce));
  EXPECT_TRUE(protocol::verify_envelope(protocol::sign_envelope("", c, 3, later, nonce), c, st, later).accepted());
}

TEST(Registry, EnrollVerifyAndHooks) {
  protocol::AgentRegistry reg("boot-token");
  EXPECT_EQ(reg.enroll("agent-001", "wrong", kT0).error, protocol::EnrollError::bad_token);
  EXPECT_EQ(reg.enroll("bad id!", "boot-token", kT0).error, protocol::EnrollError::invalid_agent_id);
  const auto r = reg.enroll("agent-001", "boot-token", kT0);
  ASSERT_TRUE(r.credentials);
  EXPECT_EQ(reg.enroll("agent-001", "boot-token", kT0).error, protocol::EnrollError::duplicate_agent);
  EXPECT_TRUE(reg.known("agent-001"));

  auto env = protocol::sign_envelope(batch_body(), *r.credentials, 1, kT0, protocol::make_nonce());
  EXPECT_THROW(reg.verify(env, kT0, [] { throw Error("store failed"); }), Error);
  EXPECT_EQ(reg.last_seq("agent-001"), 0u);  // untouched
  bool ran = false;
  EXPECT_TRUE(reg.verify(env, kT0, [&] { ran = true; }).accepted());
  EXPECT_TRUE(ran);
  EXPECT_EQ(reg.last_seq("agent-001"), 1u);
  reg.observe_seq("agent-001", 9);
  EXPECT_EQ(reg.last_seq("agent-001"), 9u);

  auto stranger = protocol::sign_envelope(batch_body(), creds("agent-xyz"), 1, kT0, protocol::make_nonce());
  EXPECT_EQ(reg.verify(stranger, kT0).rejection, Rejection::unknown_agent);
  EXPECT_TRUE(reg.revoke("agent-001"));
  EXPECT_FALSE(reg.known("agent-001"));
  EXPECT_FALSE(reg.last_seq("agent-001"));
  EXPECT_EQ(protocol::AgentRegistry().enroll("a", "", kT0).error, protocol::EnrollError::bad_token);
}

TEST(Credentials, SecretRedactedUnlessRequested) {
  const auto c = creds();
  const auto redacted = protocol::to_json(c);
  EXPECT_EQ(redacted.dump().find(crypto::to_hex(c.shared_secret)), std::string::npos);
  const auto full = protocol::to_json(c, true);
  const auto back = protocol::credentials_from_json(full);
  EXPECT_EQ(back.shared_secret, c.shared_secret);
  EXPECT_EQ(back.agent_id, c.agent_id);
}

TEST(Payload, DecodeErrors) {
  EXPECT_THROW(protocol::decode_payload("!!!"), Error);
  EXPECT_THROW(protocol::decode_payload(crypto::base64_encode("{nope")), Error);
  EXPECT_THROW(protocol::decode_payload(crypto::base64_encode("[]")), Error);
  EXPECT_THROW(protocol::decode_payload(crypto::base64_encode(R"({"kind":"poke"})")), Error);
  EXPECT_THROW(protocol::decode_payload(crypto::base64_encode(R"({"mode":"relay"})")), Error);
  EXPECT_THROW(protocol::decode_payload(crypto::base64_encode(R"({"events":[{"id":"x"}]})")), Error);
  protocol::Payload hb;
  hb.kind = "heartbeat";
  hb.status = {{"queue", 4}};
  const auto back = protocol::decode_payload(protocol::encode_payload(hb));
  EXPECT_EQ(back.kind, "heartbeat");
  EXPECT_EQ(back.status["queue"], 4);
}

// ---- tokens and users -------------------------------------------------------

TEST(Jwt, RoundTripExpiryAndTampering) {
  const std::string key = "k3y-material-for-tests-0123456789";
  const auth::Claims c{"anna", auth::Role::analyst, 1000, 1000 + 3600};
  const auto tok = auth::encode_jwt(c, key);
  auto ok = auth::decode_jwt(tok, key, 1500);
  ASSERT_TRUE(ok.claims);
  EXPECT_EQ(ok.claims->sub, "anna");
  EXPECT_EQ(ok.claims->role, auth::Role::analyst);
  EXPECT_EQ(ok.claims->exp, 4600);
  EXPECT_EQ(auth::decode_jwt(tok, key, 4601).error, auth::TokenError::expired);
  EXPECT_EQ(auth::decode_jwt(tok, "other-key", 1500).error, auth::TokenError::bad_signature);
  EXPECT_EQ(auth::decode_jwt("a.b", key, 1500).error, auth::TokenError::malformed);
  EXPECT_EQ(auth::decode_jwt("", key, 1500).error, auth::TokenError::malformed);

  // Swap the payload for an admin claim, keeping the old signature.
  const auto p1 = tok.find('.'), p2 = tok.rfind('.');
  const auto forged_payload = crypto::base64url_encode(R"({"sub":"anna","role":"admin","iat":1000,"exp":4600})");
  const auto forged = tok.substr(0, p1 + 1) + forged_payload + tok.substr(p2);
  EXPECT_EQ(auth::decode_jwt(forged, key, 1500).error, auth::TokenError::bad_signature);

  // alg=none with an empty signature.
  const auto none = crypto::base64url_encode(R"({"alg":"none","typ":"JWT"})") + "." +
                    crypto::base64url_encode(R"({"sub":"eve","role":"admin","iat":1000,"exp":9999999999})") + ".";
  EXPECT_EQ(auth::decode_jwt(none, key, 1500).error, auth::TokenError::bad_algorithm);
}

TEST(Users, AuthenticateAndPersist) {
  auth::UserStore store({1024, 8, 1});
  EXPECT_TRUE(store.add("anna", "pw-anna-123", auth::Role::analyst));
  EXPECT_FALSE(store.add("anna", "other-password", auth::Role::admin));
  EXPECT_EQ(store.authenticate("anna", "pw-anna-123"), auth::Role::analyst);
  EXPECT_FALSE(store.authenticate("anna", "wrong"));
  EXPECT_FALSE(store.authenticate("nobody", "pw-anna-123"));
  EXPECT_EQ(store.size(), 1u);
  const auto dump = store.to_json().dump();
  EXPECT_EQ(dump.find("pw-anna-123"), std::string::npos);
  auth::UserStore copy({1024, 8, 1});
  copy.restore(store.to_json());
  EXPECT_EQ(copy.authenticate("anna", "pw-anna-123"), auth::Role::analyst);
  EXPECT_EQ(auth::parse_role("admin"), auth::Role::admin);
  EXPECT_FALSE(auth::parse_role("root"));
}
