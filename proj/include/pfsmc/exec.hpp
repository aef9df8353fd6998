#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pfsmc/linalg.hpp"
#include "pfsmc/lmm.hpp"
#include "pfsmc/models.hpp"

namespace pfsmc::exec {

/// Contiguous static partition of [0, n) into `workers` chunks whose sizes
/// differ by at most one, larger chunks first.
std::vector<std::pair<std::size_t, std::size_t>> static_partition(
    std::size_t n, std::size_t workers);

/// Fixed-size worker pool, created once per run and reused across steps.
/// Dispatches one contiguous chunk per worker and barriers; task exceptions
/// are captured and rethrown on the calling thread.
class ThreadPool : public ParallelRunner {
 public:
  explicit ThreadPool(std::size_t workers);
  ~ThreadPool() override;

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  [[nodiscard]] std::size_t workers() const { return workers_; }

  void for_chunks(std::size_t n_items,
                  void (*body)(void*, std::size_t, std::size_t),
                  void* ctx) override;

  /// Seconds each worker has spent executing chunks since construction.
  [[nodiscard]] std::vector<double> busy_seconds() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::size_t workers_;
};

struct Backend {
  enum class Kind { sequential, parallel, batched };

  Kind kind = Kind::sequential;
  std::size_t workers = 1;
  std::shared_ptr<ThreadPool> pool;  // parallel/batched, created by start()

  static Backend sequential();
  static Backend parallel(std::size_t workers);
  static Backend batched(std::size_t workers);

  /// Creates the worker pool (idempotent). Called once at run start.
  void start();

  [[nodiscard]] std::string name() const;
};

/// Resolve a worker-count setting: explicit value, else the PFSMC_WORKERS
/// environment variable, else hardware concurrency.
std::size_t resolve_workers(std::size_t requested);

/// Runs task(n) for n in [0, N). Results must depend only on n, read-only
/// shared state and keyed random streams, so every backend produces the
/// sequential result. A worker failure is rethrown with the particle index.
void map_particles(Backend& backend, std::size_t n_particles,
                   const std::function<void(std::size_t)>& task);

/// Interval propagation for a whole ensemble through the aggregate
/// block-diagonal path (implicit schemes) or stacked explicit stepping.
/// theta_natural is N x p row-major, x0 N x d row-major. Results match
/// per-particle propagate_interval bitwise.
void run_batched_propagation(Backend& backend, const models::OdeModel& model,
                             const double* theta_natural, const double* x0,
                             std::size_t n_particles, double t0, double t1,
                             double h, const lmm::LmmScheme& scheme,
                             const lmm::NewtonOpts& opts,
                             lmm::PropagationResult* results);

}  // namespace pfsmc::exec
