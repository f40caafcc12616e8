#pragma once

// Counter-based random streams. Every draw is a pure function of
// (key, counter), so results never depend on thread scheduling.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>

namespace csl {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Identifies an independent random stream. Child keys derive new streams
// deterministically, e.g. key.child(replicate).child(learner).
class StreamKey {
 public:
  constexpr StreamKey() = default;
  constexpr explicit StreamKey(std::uint64_t seed) : value_(splitmix64(seed ^ 0x5851f42d4c957f2dULL)) {}

  constexpr StreamKey child(std::uint64_t tag) const noexcept {
    return from_raw(splitmix64(value_ ^ splitmix64(tag + 0x632be59bd9b4e019ULL)));
  }

  constexpr StreamKey child(std::initializer_list<std::uint64_t> tags) const noexcept {
    StreamKey k = *this;
    for (auto t : tags) k = k.child(t);
    return k;
  }

  constexpr std::uint64_t value() const noexcept { return value_; }

  constexpr bool operator==(const StreamKey&) const = default;

 private:
  static constexpr StreamKey from_raw(std::uint64_t v) noexcept {
    StreamKey k;
    k.value_ = v;
    return k;
  }

  std::uint64_t value_ = 0;
};

inline std::uint64_t random_bits(StreamKey key, std::uint64_t counter) noexcept {
  return splitmix64(key.value() ^ splitmix64(counter ^ 0xd1b54a32d192ed03ULL));
}

// Uniform on the open interval (0, 1).
inline double uniform01(StreamKey key, std::uint64_t counter) noexcept {
  return (static_cast<double>(random_bits(key, counter) >> 11) + 0.5) * 0x1.0p-53;
}

// Standard normal draw via Box-Muller on counters (2c, 2c+1).
inline double standard_normal(StreamKey key, std::uint64_t counter) noexcept {
  const double u1 = uniform01(key, 2 * counter);
  const double u2 = uniform01(key, 2 * counter + 1);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Sequential view of a stream; satisfies UniformRandomBitGenerator.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(StreamKey key) : key_(key) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept { return random_bits(key_, counter_++); }

  double uniform() noexcept { return uniform01(key_, counter_++); }

  double normal() noexcept { return standard_normal(key_, counter_++); }

  // Unbiased integer in [0, bound).
  std::uint64_t index(std::uint64_t bound) noexcept {
    const std::uint64_t threshold = (0 - bound) % bound;
    for (;;) {
      const std::uint64_t r = (*this)();
      if (r >= threshold) return r % bound;
    }
  }

  std::uint64_t draws() const noexcept { return counter_; }

 private:
  StreamKey key_;
  std::uint64_t counter_ = 0;
};

// Fisher-Yates shuffle driven by a CounterRng.
template <class RandomIt>
void shuffle(RandomIt first, RandomIt last, CounterRng& rng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = rng.index(i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace csl
