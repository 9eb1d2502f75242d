#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace unitddpm {

struct RngState {
  std::uint64_t key = 0;
  std::uint64_t counter = 0;

  friend bool operator==(const RngState&, const RngState&) = default;
};

// Philox4x32-10 block function (Salmon et al., Random123).
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
  constexpr std::uint32_t kMul0 = 0xD2511F53u;
  constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
  constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
  constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kWeyl0;
    key[1] += kWeyl1;
  }
  return ctr;
}

// Counter-based generator: every draw is philox(counter++, key). Splitting
// derives an independent key, so streams can be addressed by (seed, id, ...)
// without consuming from the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix_seed(seed)) {}

  static Rng from_state(RngState s) {
    Rng r(0);
    r.key_ = s.key;
    r.counter_ = s.counter;
    return r;
  }

  RngState state() const { return {key_, counter_}; }

  Rng split(std::uint64_t stream) const {
    const auto out = philox4x32({lo(stream), hi(stream), 0x5eed5eedu, 0x0b5e55edu},
                                {lo(key_), hi(key_)});
    Rng child(0);
    child.key_ = join(out[0], out[1]);
    child.counter_ = 0;
    return child;
  }

  std::uint64_t next_u64() {
    const auto out = block();
    return join(out[0], out[1]);
  }

  // Uniform on the open interval (0, 1).
  double uniform() { return to_unit(next_u64()); }

  // Uniform integer in [0, n), unbiased (rejection on the short tail).
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      const std::uint64_t x = next_u64();
      if (x < limit) return x % n;
    }
  }

  double normal() {
    const auto out = block();
    const double u1 = to_unit(join(out[0], out[1]));
    const double u2 = to_unit(join(out[2], out[3]));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  void fill_normal(std::span<double> out) {
    for (double& v : out) v = normal();
  }

 private:
  std::array<std::uint32_t, 4> block() {
    const std::uint64_t c = counter_++;
    return philox4x32({lo(c), hi(c), 0u, 0u}, {lo(key_), hi(key_)});
  }

  static std::uint32_t lo(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
  static std::uint32_t hi(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }
  static std::uint64_t join(std::uint32_t a, std::uint32_t b) {
    return (static_cast<std::uint64_t>(b) << 32) | a;
  }
  static double to_unit(std::uint64_t x) {
    return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53;
  }
  static std::uint64_t mix_seed(std::uint64_t z) {
    z += 0x9E3779B97F4A7C15ull;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace unitddpm
