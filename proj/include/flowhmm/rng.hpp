#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace flowhmm {

namespace detail {
inline std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based generator: draw i is a pure function of (seed, i), so the
/// full state is two integers and any position can be saved, restored, or
/// skipped to in O(1). The output function is the splitmix64 finalizer over
/// a Weyl sequence.
///
/// normal() runs Box-Muller without caching the second variate, so state
/// never hides outside (seed, counter). Bit reproducibility of normal() and
/// other transcendental-based draws holds for a fixed build and libm.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

  std::uint64_t next_u64() {
    ++counter_;
    return detail::mix64(seed_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Independent child stream; deterministic in (seed, key). Used to hand one
  /// stream per class/worker so parallel training stays reproducible.
  RngStream split(std::uint64_t key) const {
    return RngStream(detail::mix64(seed_ ^ detail::mix64(key * 0xD1342543DE82EF95ULL + 0x632BE59BD9B4E019ULL)));
  }

  /// Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform on [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("uniform_index: empty range");
    // Rejection-free modulo is biased for huge n; all uses here have n far
    // below 2^32 where the bias is unobservable, but reject anyway.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
    std::uint64_t r = next_u64();
    while (r > limit) r = next_u64();
    return r % n;
  }

  /// Standard normal via Box-Muller; two uniforms per draw, nothing cached.
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  std::vector<double> normal_vector(std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal();
    return v;
  }

  /// Sample an index from unnormalized non-negative weights.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw std::invalid_argument("categorical: negative weight");
      total += w;
    }
    if (total <= 0.0) throw std::invalid_argument("categorical: zero total weight");
    double u = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      u -= weights[i];
      if (u < 0.0) return i;
    }
    return weights.size() - 1;
  }

  /// Fisher-Yates over the index set [0, n).
  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(p[i - 1], p[j]);
    }
    return p;
  }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

}  // namespace flowhmm
