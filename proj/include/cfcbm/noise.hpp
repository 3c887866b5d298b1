#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "cfcbm/numerics.hpp"

namespace cfcbm {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Stream identifiers so that independent consumers of one seed never share draws.
enum class StreamId : std::uint64_t {
  kHighGate = 1,
  kLowGate = 2,
  kShuffle = 3,
  kInitHighClassifier = 4,
  kInitLowClassifier = 5,
  kSynthetic = 6,
};

/// Counter-based generator: value i of the stream is a pure function of (key, i).
/// Draws are reproducible regardless of the order in which they are requested.
class CounterStream {
 public:
  CounterStream(std::uint64_t seed, std::initializer_list<std::uint64_t> coordinates) noexcept {
    key_ = mix64(seed);
    for (auto c : coordinates) key_ = mix64(key_ ^ mix64(c + 0x632be59bd9b4e019ULL));
  }

  std::uint64_t bits(std::uint64_t index) const noexcept {
    return mix64(key_ ^ mix64(index ^ 0xd6e8feb86659fd93ULL));
  }

  /// Uniform draw strictly inside (0, 1).
  double uniform(std::uint64_t index) const noexcept {
    return (static_cast<double>(bits(index) >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t index, std::uint64_t bound) const noexcept {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(bits(index)) * bound) >> 64);
  }

  /// Standard normal via Box-Muller on two consecutive counters.
  double normal(std::uint64_t index) const noexcept {
    const double u1 = uniform(2 * index);
    const double u2 = uniform(2 * index + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  Matrix uniform_matrix(std::size_t rows, std::size_t cols) const {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = uniform(i);
    return m;
  }

  /// Fisher-Yates permutation of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n) const {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i, i));
      std::swap(order[i - 1], order[j]);
    }
    return order;
  }

 private:
  std::uint64_t key_ = 0;
};

}  // namespace cfcbm
