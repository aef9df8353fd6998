#include "pfsmc/exec.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <thread>

#include "pfsmc/errors.hpp"

namespace pfsmc::exec {

std::vector<std::pair<std::size_t, std::size_t>> static_partition(
    std::size_t n, std::size_t workers) {
  if (workers == 0) {
    throw std::invalid_argument("static_partition: workers must be >= 1");
  }
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  chunks.reserve(workers);
  const std::size_t base = n / workers;
  const std::size_t rem = n % workers;
  std::size_t begin = 0;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t len = base + (w < rem ? 1 : 0);
    chunks.emplace_back(begin, begin + len);
    begin += len;
  }
  return chunks;
}

struct ThreadPool::Impl {
  std::mutex mutex;
  std::condition_variable cv_work;
  std::condition_variable cv_done;
  std::vector<std::thread> threads;
  std::vector<double> busy;  // per-worker seconds

  // Current dispatch.
  void (*body)(void*, std::size_t, std::size_t) = nullptr;
  void* ctx = nullptr;
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  std::uint64_t epoch = 0;
  std::size_t pending = 0;
  bool stop = false;
  std::exception_ptr error;

  void worker(std::size_t id) {
    std::uint64_t seen = 0;
    for (;;) {
      void (*fn)(void*, std::size_t, std::size_t) = nullptr;
      void* c = nullptr;
      std::pair<std::size_t, std::size_t> range{0, 0};
      {
        std::unique_lock<std::mutex> lock(mutex);
        cv_work.wait(lock, [&] { return stop || epoch != seen; });
        if (stop) return;
        seen = epoch;
        fn = body;
        c = ctx;
        range = chunks[id];
      }
      const auto start = std::chrono::steady_clock::now();
      if (range.second > range.first) {
        try {
          fn(c, range.first, range.second);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mutex);
          if (!error) error = std::current_exception();
        }
      }
      const auto end = std::chrono::steady_clock::now();
      {
        std::lock_guard<std::mutex> lock(mutex);
        busy[id] += std::chrono::duration<double>(end - start).count();
        if (--pending == 0) cv_done.notify_one();
      }
    }
  }
};

ThreadPool::ThreadPool(std::size_t workers)
    : impl_(std::make_unique<Impl>()), workers_(workers) {
  if (workers_ == 0) {
    throw std::invalid_argument("ThreadPool: workers must be >= 1");
  }
  impl_->busy.assign(workers_, 0.0);
  impl_->threads.reserve(workers_);
  for (std::size_t w = 0; w < workers_; ++w) {
    impl_->threads.emplace_back([this, w] { impl_->worker(w); });
  }
}

ThreadPool::~ThreadPool() {
  {
    std::lock_guard<std::mutex> lock(impl_->mutex);
    impl_->stop = true;
  }
  impl_->cv_work.notify_all();
  for (auto& t : impl_->threads) t.join();
}

void ThreadPool::for_chunks(std::size_t n_items,
                            void (*body)(void*, std::size_t, std::size_t),
                            void* ctx) {
  if (n_items == 0) return;
  std::unique_lock<std::mutex> lock(impl_->mutex);
  impl_->body = body;
  impl_->ctx = ctx;
  impl_->chunks = static_partition(n_items, workers_);
  impl_->pending = workers_;
  impl_->error = nullptr;
  ++impl_->epoch;
  impl_->cv_work.notify_all();
  impl_->cv_done.wait(lock, [&] { return impl_->pending == 0; });
  if (impl_->error) {
    std::exception_ptr e = impl_->error;
    impl_->error = nullptr;
    std::rethrow_exception(e);
  }
}

std::vector<double> ThreadPool::busy_seconds() const {
  std::lock_guard<std::mutex> lock(impl_->mutex);
  return impl_->busy;
}

Backend Backend::sequential() { return Backend{Kind::sequential, 1, nullptr}; }

Backend Backend::parallel(std::size_t workers) {
  if (workers == 0) {
    throw ConfigError("parallel backend: workers must be >= 1");
  }
  return Backend{Kind::parallel, workers, nullptr};
}

Backend Backend::batched(std::size_t workers) {
  if (workers == 0) {
    throw ConfigError("batched backend: workers must be >= 1");
  }
  return Backend{Kind::batched, workers, nullptr};
}

void Backend::start() {
  if (kind != Kind::sequential && !pool) {
    pool = std::make_shared<ThreadPool>(workers);
  }
}

std::string Backend::name() const {
  switch (kind) {
    case Kind::sequential:
      return "seq";
    case Kind::parallel:
      return "par" + std::to_string(workers);
    case Kind::batched:
      return "batch" + std::to_string(workers);
  }
  return "?";
}

std::size_t resolve_workers(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PFSMC_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? hw : 1;
}

namespace {

struct ParticleError {
  std::size_t index;
  std::exception_ptr error;
};

}  // namespace

void map_particles(Backend& backend, std::size_t n_particles,
                   const std::function<void(std::size_t)>& task) {
  if (backend.kind == Backend::Kind::sequential || !backend.pool) {
    for (std::size_t n = 0; n < n_particles; ++n) task(n);
    return;
  }
  std::mutex err_mutex;
  std::vector<ParticleError> errors;
  auto body = [&](std::size_t begin, std::size_t end) {
    for (std::size_t n = begin; n < end; ++n) {
      try {
        task(n);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        errors.push_back({n, std::current_exception()});
        return;
      }
    }
  };
  backend.pool->run(n_particles, body);
  if (!errors.empty()) {
    try {
      std::rethrow_exception(errors.front().error);
    } catch (const std::exception& e) {
      throw std::runtime_error("particle " +
                               std::to_string(errors.front().index) +
                               " failed: " + e.what());
    }
  }
}

void run_batched_propagation(Backend& backend, const models::OdeModel& model,
                             const double* theta_natural, const double* x0,
                             std::size_t n_particles, double t0, double t1,
                             double h, const lmm::LmmScheme& scheme,
                             const lmm::NewtonOpts& opts,
                             lmm::PropagationResult* results) {
  ParallelRunner* runner = backend.pool ? backend.pool.get() : nullptr;
  lmm::propagate_interval_batched(model, theta_natural, x0, n_particles, t0,
                                  t1, h, scheme, opts, results, runner);
}

}  // namespace pfsmc::exec
