#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace edr {

/// Seeded generator with platform-independent draws. The standard
/// distributions are implementation-defined, so draws that feed persisted
/// or compared output go through these helpers instead.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) {
    // Lemire's nearly-divisionless rejection.
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * bound;
    auto low = static_cast<std::uint64_t>(m);
    if (low < bound) {
      const std::uint64_t threshold = (0 - bound) % bound;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * bound;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Uniform in [lo, hi] inclusive.
  std::int64_t between(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(below(static_cast<std::uint64_t>(hi - lo) + 1));
  }

  /// Uniform in [0, 1) with 53 bits of precision.
  double unit() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  /// Uniform in (0, 1).
  double open_unit() {
    double u;
    do {
      u = unit();
    } while (u == 0.0);
    return u;
  }

  bool chance(double p) { return unit() < p; }

  /// Random RFC 4122 version-4 UUID text.
  std::string uuid() {
    static constexpr char kHex[] = "0123456789abcdef";
    std::uint64_t hi = next();
    std::uint64_t lo = next();
    hi = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;
    lo = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;
    std::string out;
    out.reserve(36);
    for (int i = 0; i < 32; ++i) {
      const std::uint64_t word = i < 16 ? hi : lo;
      const int shift = 60 - 4 * (i % 16);
      out.push_back(kHex[(word >> shift) & 0xf]);
      if (i == 7 || i == 11 || i == 15 || i == 19) out.push_back('-');
    }
    return out;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace edr
