#pragma once

#include <atomic>
#include <cstdint>

namespace pfsmc::instrumentation {

// Cheap global counters used by tests to assert structural properties of the
// execution paths (e.g. the batched backend never takes the per-particle
// implicit-step entry point, explicit batched stepping assembles no
// block-diagonal matrices).
struct Counters {
  std::atomic<std::uint64_t> implicit_step_calls{0};
  std::atomic<std::uint64_t> block_diag_assemblies{0};
  std::atomic<std::uint64_t> kron_calls{0};

  void reset() {
    implicit_step_calls = 0;
    block_diag_assemblies = 0;
    kron_calls = 0;
  }
};

Counters& counters();

}  // namespace pfsmc::instrumentation
