#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <variant>

#include "hatstory/errors.hpp"
#include "hatstory/tensor.hpp"

HATSTORY_BEGIN

/// Seeded random source. The engine is std::mt19937_64, whose output sequence
/// is fixed by the standard; the conversions to real numbers and bounded
/// integers are done here rather than through <random> distributions, whose
/// algorithms differ between standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random mantissa bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double a, double b) {
    if (!(a < b)) throw ContractError("uniform(a, b) requires a < b");
    return a + (b - a) * uniform();
  }

  /// Box-Muller; consumes two draws per call.
  double normal(double mean = 0.0, double sd = 1.0) {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return mean + sd * std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw ContractError("below(0) has no valid outcome");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  /// Fisher-Yates shuffle.
  template <class T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      using std::swap;
      swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

struct UniformInit {
  double lo = -0.1;
  double hi = 0.1;
};

/// Glorot uniform: bound sqrt(6 / (fan_in + fan_out)). Matrices use their two
/// extents; vectors count as fan_in = 1, fan_out = extent.
struct XavierInit {};

using InitScheme = std::variant<UniformInit, XavierInit>;

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline Tensor seeded_init(Rng& rng, const Shape& shape, const InitScheme& scheme) {
  double lo = 0.0;
  double hi = 0.0;
  if (const auto* u = std::get_if<UniformInit>(&scheme)) {
    if (!(u->lo < u->hi)) throw ContractError("uniform init requires a < b");
    lo = u->lo;
    hi = u->hi;
  } else {
    const std::size_t fan_in = shape.size() >= 2 ? shape[0] : 1;
    const std::size_t fan_out = shape.empty() ? 1 : shape.back();
    hi = xavier_bound(fan_in, fan_out);
    lo = -hi;
  }
  std::vector<Real> values(shape_numel(shape));
  for (Real& v : values) v = rng.uniform(lo, hi);
  return Tensor(shape, std::move(values));
}

HATSTORY_END
