#pragma once

#include <array>
#include <cstdint>

namespace pfsmc::rng {

// Counter-based generator: every draw is a pure function of
// (seed, time index, particle index, purpose, draw counter), so the same
// configuration produces the same numbers regardless of thread count,
// backend, or call interleaving. The block function is Philox4x64-10; the
// known-answer vectors in tests/data/philox_vectors.csv pin the exact
// contract so other implementations can reproduce the streams.

enum class Purpose : std::uint64_t {
  init = 0,
  proliferate = 1,
  innovate = 2,
  resample = 3,
};

/// Philox4x64, 10 rounds. ctr/key in, four 64-bit words out.
std::array<std::uint64_t, 4> philox4x64(std::array<std::uint64_t, 4> ctr,
                                        std::array<std::uint64_t, 2> key);

class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t time_index,
            std::uint64_t particle_index, Purpose purpose);

  std::uint64_t next_u64();

  /// Uniform on [0, 1) with 53 random bits.
  double next_uniform();

  /// Standard normal via Box-Muller (pairs; the spare is cached).
  double next_normal();

 private:
  std::array<std::uint64_t, 2> key_;
  std::array<std::uint64_t, 4> ctr_;
  std::array<std::uint64_t, 4> block_{};
  std::uint64_t block_index_ = 0;
  int lane_ = 4;  // forces generation on first draw
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace pfsmc::rng
