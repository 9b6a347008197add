#ifndef SAFELABEL_RNG_HPP
#define SAFELABEL_RNG_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

namespace safelabel {

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derives an independent stream key from a root seed and a path of indices,
/// e.g. (seed, replication, purpose). Order of the path matters.
template <typename... Ints>
constexpr std::uint64_t derive_key(std::uint64_t seed, Ints... path) noexcept {
  std::uint64_t key = splitmix64_mix(seed + 0x9E3779B97F4A7C15ULL);
  ((key = splitmix64_mix(key ^ splitmix64_mix(static_cast<std::uint64_t>(path) +
                                              0xD1B54A32D192ED03ULL))),
   ...);
  return key;
}

/// Counter-based generator: output i is SplitMix64 evaluated at key + (i+1)*gamma.
/// Any stream can be reproduced from (key, counter) alone, so results do not
/// depend on how work is scheduled across threads.
///
/// Satisfies UniformRandomBitGenerator. Real-valued draws use the member
/// helpers below rather than <random> distributions so that outputs are
/// identical across standard library implementations.
class CounterRng {
public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key, std::uint64_t counter = 0) noexcept
      : key_(key), counter_(counter) {}

  template <typename... Ints>
  static constexpr CounterRng stream(std::uint64_t seed, Ints... path) noexcept {
    return CounterRng(derive_key(seed, path...));
  }

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() noexcept {
    ++counter_;
    return splitmix64_mix(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform01() noexcept { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform on (0, 1].
  double uniform01_open_low() noexcept {
    return static_cast<double>(((*this)() >> 11) + 1) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform01(); }

  /// Standard normal via Box-Muller (one of the pair is discarded).
  double normal() noexcept {
    const double u1 = uniform01_open_low();
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) noexcept { return uniform01() < p; }

  /// Unbiased integer in [0, n) by rejection (Lemire's method). n must be > 0.
  std::uint64_t below(std::uint64_t n) noexcept {
    unsigned __int128 m = static_cast<unsigned __int128>((*this)()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>((*this)()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  constexpr std::uint64_t key() const noexcept { return key_; }
  constexpr std::uint64_t counter() const noexcept { return counter_; }

private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

/// Partial Fisher-Yates: after the call, the first m entries of `items` are a
/// uniform random m-subset (in random order) of the original contents.
template <typename T>
void partial_shuffle(std::span<T> items, std::size_t m, CounterRng& rng) {
  const std::size_t n = items.size();
  if (m > n) m = n;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    using std::swap;
    swap(items[i], items[j]);
  }
}

/// Draws m distinct indices from [0, n) uniformly without replacement.
inline std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t m,
                                                           CounterRng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  partial_shuffle(std::span<std::size_t>(idx), m, rng);
  idx.resize(m < n ? m : n);
  return idx;
}

}  // namespace safelabel

#endif
