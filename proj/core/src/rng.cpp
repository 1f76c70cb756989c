#include "wsc/rng.hpp"

#include <cmath>

#include "wsc/errors.hpp"

namespace wsc::rng {

namespace {

constexpr std::uint32_t kWeylA = 0x9E3779B9u;
constexpr std::uint32_t kWeylB = 0xBB67AE85u;
constexpr std::uint32_t kMulA = 0xD2511F53u;
constexpr std::uint32_t kMulB = 0xCD9E8D57u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
  const std::uint64_t product = static_cast<std::uint64_t>(a) * b;
  hi = static_cast<std::uint32_t>(product >> 32);
  lo = static_cast<std::uint32_t>(product);
}

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

Block philox4x32(std::uint64_t block_index, std::uint32_t c2, std::uint32_t c3,
                 std::uint64_t key) {
  std::uint32_t c0 = static_cast<std::uint32_t>(block_index);
  std::uint32_t c1 = static_cast<std::uint32_t>(block_index >> 32);
  std::uint32_t k0 = static_cast<std::uint32_t>(key);
  std::uint32_t k1 = static_cast<std::uint32_t>(key >> 32);

  for (int round = 0; round < 10; ++round) {
    if (round != 0) {
      k0 += kWeylA;
      k1 += kWeylB;
    }
    std::uint32_t hi0, lo0, hi1, lo1;
    mulhilo(kMulA, c0, hi0, lo0);
    mulhilo(kMulB, c2, hi1, lo1);
    const std::uint32_t n0 = hi1 ^ c1 ^ k0;
    const std::uint32_t n1 = lo1;
    const std::uint32_t n2 = hi0 ^ c3 ^ k1;
    const std::uint32_t n3 = lo0;
    c0 = n0;
    c1 = n1;
    c2 = n2;
    c3 = n3;
  }
  return Block{{c0, c1, c2, c3}};
}

Substream::Substream(std::uint64_t seed, Tag tag, std::uint64_t unit)
    : key_(seed),
      c2_(static_cast<std::uint32_t>(unit)),
      c3_(static_cast<std::uint32_t>(unit >> 32) ^ (static_cast<std::uint32_t>(tag) << 16)) {}

void Substream::refill() {
  buffer_ = philox4x32(block_index_++, c2_, c3_, key_);
  buffer_pos_ = 0;
}

std::uint32_t Substream::next_u32() {
  if (buffer_pos_ >= 4) refill();
  return buffer_.w[static_cast<std::size_t>(buffer_pos_++)];
}

std::uint64_t Substream::next_u64() {
  const std::uint64_t hi = next_u32();
  return (hi << 32) | next_u32();
}

double Substream::next_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Substream::next_open_double() {
  return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double Substream::next_normal() {
  if (have_cached_normal_) {
    have_cached_normal_ = false;
    return cached_normal_;
  }
  const double u1 = next_open_double();
  const double u2 = next_double();
  const double radius = std::sqrt(-2.0 * std::log(u1));
  const double angle = kTwoPi * u2;
  cached_normal_ = radius * std::sin(angle);
  have_cached_normal_ = true;
  return radius * std::cos(angle);
}

std::uint64_t Substream::next_below(std::uint64_t bound) {
  if (bound == 0) throw ArgumentError("next_below: bound must be positive");
  // Rejection from the top keeps the draw exactly uniform.
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound) - 1;
  std::uint64_t draw = next_u64();
  while (draw > limit) draw = next_u64();
  return draw % bound;
}

std::int64_t Substream::next_poisson(double mean) {
  if (!(mean >= 0.0)) throw ArgumentError("next_poisson: mean must be nonnegative");
  if (mean == 0.0) return 0;
  if (mean < 40.0) {
    // Multiplication of uniforms; loop length is mean + O(sqrt(mean)).
    const double threshold = std::exp(-mean);
    double product = 1.0;
    std::int64_t count = -1;
    do {
      product *= next_open_double();
      ++count;
    } while (product > threshold);
    return count;
  }
  // Hormann (1993) PTRS transformed rejection.
  const double b = 0.931 + 2.53 * std::sqrt(mean);
  const double a = -0.059 + 0.02483 * b;
  const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
  const double v_r = 0.9277 - 3.6224 / (b - 2.0);
  const double log_mean = std::log(mean);
  for (;;) {
    double u = next_double() - 0.5;
    const double v = next_open_double();
    const double us = 0.5 - std::fabs(u);
    const double k = std::floor((2.0 * a / us + b) * u + mean + 0.43);
    if (us >= 0.07 && v <= v_r) return static_cast<std::int64_t>(k);
    if (k < 0.0 || (us < 0.013 && v > us)) continue;
    if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
        k * log_mean - mean - std::lgamma(k + 1.0)) {
      return static_cast<std::int64_t>(k);
    }
  }
}

double Substream::next_gamma(double shape) {
  if (!(shape > 0.0)) throw ArgumentError("next_gamma: shape must be positive");
  if (shape < 1.0) {
    // Boost to shape+1 and correct with a power of a uniform.
    const double g = next_gamma(shape + 1.0);
    return g * std::pow(next_open_double(), 1.0 / shape);
  }
  // Marsaglia-Tsang squeeze.
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x;
    double v;
    do {
      x = next_normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = next_open_double();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

std::vector<std::size_t> Substream::sample_without_replacement(std::size_t n, std::size_t count) {
  if (count > n) throw ArgumentError("sample_without_replacement: count exceeds population");
  std::vector<std::size_t> index(n);
  for (std::size_t i = 0; i < n; ++i) index[i] = i;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(next_below(n - i));
    std::swap(index[i], index[j]);
  }
  index.resize(count);
  return index;
}

}  // namespace wsc::rng
