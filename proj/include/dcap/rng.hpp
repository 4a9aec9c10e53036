#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace dcap {

/// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Counter-based generator: draw i of a stream is mix64(key + i * phi), so
/// the state is just (key, counter). child(i) derives an independent stream
/// keyed by (key, i); sampling work split across threads by child index
/// reproduces the serial result exactly.
///
/// All derived distributions are computed here rather than through
/// <random>, whose distributions are not bit-identical across platforms.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key = 0, std::uint64_t counter = 0) noexcept : key_(key), counter_(counter) {}

  std::uint64_t next_u64() noexcept { return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) without modulo bias. n must be positive.
  std::size_t below(std::size_t n) noexcept;
  /// Standard normal via Box-Muller (consumes two draws).
  double normal() noexcept;
  bool bernoulli(double p) noexcept { return uniform() < p; }

  CounterRng child(std::uint64_t index) const noexcept { return CounterRng(mix64(key_ ^ mix64(index + 0x632be59bd9b4e019ULL))); }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  template <typename It>
  void shuffle(It first, It last) noexcept {
    const auto n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = below(i);
      using std::swap;
      swap(first[i - 1], first[j]);
    }
  }

  /// k distinct values from [0, n) in draw order (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace dcap
