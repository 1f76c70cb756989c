// Counter-based random number substreams (Philox4x32-10, Salmon et al. 2011).
// A substream is fully identified by (seed, tag, unit); draws walk a 64-bit
// block counter, so any unit can be generated in isolation and parallel
// generation is independent of scheduling order.
#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace wsc::rng {

struct Block {
  std::array<std::uint32_t, 4> w;
};

// One 128-bit Philox4x32-10 block. The 128-bit counter is laid out as
// (block_index lo, block_index hi, c2, c3); the 64-bit key as (lo, hi).
Block philox4x32(std::uint64_t block_index, std::uint32_t c2, std::uint32_t c3,
                 std::uint64_t key);

// Substream purposes. Values are part of the on-disk reproducibility
// contract: changing them changes every generated population.
enum class Tag : std::uint32_t {
  school = 1,
  student = 2,
  selection = 3,
  outcome = 4,
  history = 5,
  trial_draw = 6,
  match_order = 7,
  null_replicate = 8,
  meta_ci = 9,
  test_only = 250,
};

class Substream {
public:
  Substream(std::uint64_t seed, Tag tag, std::uint64_t unit = 0);

  std::uint32_t next_u32();
  std::uint64_t next_u64();

  // Uniform on [0,1), 53-bit resolution.
  double next_double();
  // Uniform on (0,1]; safe as a log() argument.
  double next_open_double();
  // Standard normal via Box-Muller; the second deviate of each pair is cached.
  double next_normal();
  // Unbiased integer on [0, bound) by rejection. bound must be positive.
  std::uint64_t next_below(std::uint64_t bound);
  // Poisson by inversion for small means, PTRS-style rejection otherwise.
  std::int64_t next_poisson(double mean);
  // Gamma(shape, 1) via Marsaglia-Tsang; shape must be positive.
  double next_gamma(double shape);

  // First `count` elements of a seeded permutation of {0,...,n-1}
  // (partial Fisher-Yates). count must not exceed n.
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count);

private:
  void refill();

  std::uint64_t key_;
  std::uint32_t c2_;
  std::uint32_t c3_;
  std::uint64_t block_index_ = 0;
  Block buffer_{};
  int buffer_pos_ = 4;
  bool have_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace wsc::rng
