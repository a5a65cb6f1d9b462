#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>

namespace aescomp {

/// xorshift64* (Vigna). Fully specified so seeded behaviour is identical on
/// every platform, unlike the standard distributions.
class Xorshift64Star {
 public:
  /// A zero seed would lock the generator at zero; it is remapped to a fixed
  /// nonzero constant.
  explicit Xorshift64Star(std::uint64_t seed)
      : state_(seed == 0 ? 0x9E3779B97F4A7C15ull : seed) {}

  std::uint64_t next() {
    state_ ^= state_ >> 12;
    state_ ^= state_ << 25;
    state_ ^= state_ >> 27;
    return state_ * 0x2545F4914F6CDD1Dull;
  }

  /// Uniform integer in [0, bound) by rejection; bound must be nonzero.
  std::uint64_t below(std::uint64_t bound) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t draw = next();
    while (draw >= limit) draw = next();
    return draw % bound;
  }

  /// Uniform double in [0, 1) from the top 53 bits.
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

 private:
  std::uint64_t state_;
};

/// Fisher-Yates shuffle driven by Xorshift64Star.
template <typename T>
void seeded_shuffle(std::span<T> items, Xorshift64Star& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    using std::swap;
    swap(items[i - 1], items[j]);
  }
}

}  // namespace aescomp
