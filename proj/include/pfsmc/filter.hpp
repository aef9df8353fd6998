#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "pfsmc/exec.hpp"
#include "pfsmc/linalg.hpp"
#include "pfsmc/lmm.hpp"
#include "pfsmc/models.hpp"
#include "pfsmc/rng.hpp"

namespace pfsmc::filter {

/// Weighted particle ensemble. Parameters are stored in the unconstrained
/// parametrization (log space for positive parameters) so the Gaussian
/// shrink/proliferate machinery never leaves the feasible set.
struct Ensemble {
  std::size_t n = 0;  // particles
  std::size_t d = 0;  // state dimension
  std::size_t p = 0;  // parameter dimension
  std::vector<double> states;    // N x d row-major
  std::vector<double> params_u;  // N x p row-major, unconstrained
  std::vector<double> logw;      // normalized: logsumexp == 0
  std::vector<double> mean_u;    // current weighted parameter mean
  linalg::DenseMatrix cov_u;     // current weighted parameter covariance
};

struct ObservationModel {
  std::vector<std::size_t> indices;  // observed state components
  double sigma = 0.0;                // Gaussian noise standard deviation
};

struct PriorSpec {
  double mu = 0.0;
  double sigma = 1.0;
};

struct X0Spec {
  double mean = 0.0;
  double std = 0.0;
  bool clamp_nonneg = false;
};

struct IntegratorSpec {
  bool adaptive = false;       // variable-step BDF(1,2)
  lmm::Family family = lmm::Family::bdf;
  int order = 2;
  double rtol = 1e-3;          // adaptive only
};

struct PfConfig {
  std::size_t particles = 1000;
  double shrink_a = 0.98;
  double h = 0.05;
  IntegratorSpec integrator;
  std::uint64_t seed = 0;
  std::vector<PriorSpec> theta_prior;  // unconstrained space
  std::vector<X0Spec> x0_prior;
  lmm::NewtonOpts newton;

  void validate(const models::OdeModel& model,
                const ObservationModel& obs) const;
};

struct TraceRow {
  std::size_t j = 0;
  double t = 0.0;
  std::vector<double> theta_mean;     // natural space
  std::vector<double> theta_var;      // unconstrained-space cov diagonal
  std::vector<double> state_mean;
  double ess = 0.0;
  bool degeneracy_warning = false;
};

struct PosteriorTrace {
  std::vector<TraceRow> rows;
};

struct ObservationData {
  double t0 = 0.0;
  std::vector<double> times;   // length T
  std::vector<double> values;  // T x m row-major
  std::size_t m = 0;

  [[nodiscard]] std::size_t steps() const { return times.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t j) const {
    return {values.data() + j * m, m};
  }
};

struct PhaseTimings {
  double propagate = 0.0;
  double resample = 0.0;
  double proliferate = 0.0;
  double repropagate = 0.0;
  double weights = 0.0;
};

// --- Algorithm building blocks (unit-testable in isolation) ----------------

Ensemble initialize(const PfConfig& cfg, const models::OdeModel& model);

/// theta_bar_n = a theta_n + (1-a) theta_bar, in the unconstrained space.
std::vector<double> shrink(std::span<const double> params_u, std::size_t n,
                           std::size_t p, std::span<const double> logw,
                           double a);

/// log N(y; x[indices], sigma^2 I).
double log_likelihood(std::span<const double> y, std::span<const double> x,
                      const ObservationModel& obs);

/// g proportional to exp(logw + loglik), normalized. Throws NumericalError
/// when every particle carries zero likelihood.
std::vector<double> fitness_weights(std::span<const double> logw,
                                    std::span<const double> loglik);

/// N categorical draws; draw n consumes stream (j, n, resample).
std::vector<std::size_t> resample_multinomial(std::span<const double> g,
                                              std::uint64_t seed,
                                              std::uint64_t time_index);

/// theta_n + s L z_n with s^2 = 1 - a^2, L the jittered Cholesky factor of
/// cov_u, z_n from stream (j, n, proliferate).
std::vector<double> proliferate(std::span<const double> params_u,
                                std::size_t n, std::size_t p,
                                const linalg::DenseMatrix& cov_u, double a,
                                std::uint64_t seed, std::uint64_t time_index);

/// x + sqrt(gamma) .* z with z from stream (j, n, innovate).
void innovate(std::span<double> x, std::span<const double> gamma_diag,
              std::uint64_t seed, std::uint64_t time_index,
              std::uint64_t particle);

/// logw proportional to loglik_new - loglik_old, normalized.
std::vector<double> update_weights(std::span<const double> loglik_new,
                                   std::span<const double> loglik_old);

[[nodiscard]] double effective_sample_size(std::span<const double> logw);

// --- Full sampler -----------------------------------------------------------

struct StepResult {
  TraceRow trace;
};

/// One full assimilation step: shrink, predict, survival-of-the-fittest
/// resampling, proliferation, repropagation with innovation, weight update,
/// moment refresh. j is 1-based; the interval is [t_prev, t_obs].
StepResult pf_step(Ensemble& ens, std::span<const double> y, std::size_t j,
                   double t_prev, double t_obs, const PfConfig& cfg,
                   exec::Backend& backend, const models::OdeModel& model,
                   const ObservationModel& obs,
                   PhaseTimings* timings = nullptr);

PosteriorTrace run(const ObservationData& data, const PfConfig& cfg,
                   exec::Backend& backend, const models::OdeModel& model,
                   const ObservationModel& obs,
                   PhaseTimings* timings = nullptr);

}  // namespace pfsmc::filter
