#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "pfsmc/linalg.hpp"
#include "pfsmc/models.hpp"

namespace pfsmc::lmm {

enum class Family { ab, am, bdf };

/// Fixed-step linear multistep scheme
///   x_{n+1} = sum_i alpha[i] x_{n-i}
///           + h * (beta[0] f_{n+1} + sum_{i>=1} beta[i] f_{n+1-i}).
/// error_const is the leading local-truncation-error coefficient in
///   x(t_{n+1}) - x_{n+1} = error_const * h^{p+1} x^{(p+1)} + O(h^{p+2}).
struct LmmScheme {
  Family family{};
  int order = 1;
  std::vector<double> alpha;
  std::vector<double> beta;
  double error_const = 0.0;

  [[nodiscard]] bool implicit() const { return beta[0] != 0.0; }
  [[nodiscard]] std::size_t states_needed() const { return alpha.size(); }
  [[nodiscard]] std::size_t fvals_needed() const { return beta.size() - 1; }
};

/// Textbook coefficients for AB/AM/BDF at orders 1..3.
LmmScheme scheme_coefficients(Family family, int order);

/// Time-aligned (state, f) pairs, newest first. Depth 4 so the AB3 error
/// estimator has the one extra f entry its order-4 comparison step needs.
class StepHistory {
 public:
  StepHistory() = default;
  explicit StepHistory(std::size_t dim);

  void reset(std::span<const double> x0, std::span<const double> f0);
  void push(std::span<const double> x, std::span<const double> f);

  [[nodiscard]] std::size_t filled() const { return filled_; }
  [[nodiscard]] std::size_t dim() const { return dim_; }
  [[nodiscard]] std::span<const double> state(std::size_t age) const;
  [[nodiscard]] std::span<const double> fval(std::size_t age) const;

  static constexpr std::size_t kDepth = 4;

 private:
  [[nodiscard]] std::size_t slot(std::size_t age) const;
  std::size_t dim_ = 0;
  std::size_t filled_ = 0;
  std::size_t head_ = 0;
  std::vector<double> states_;
  std::vector<double> fvals_;
};

enum class ParticleStatus : std::uint8_t {
  ok = 0,
  invalid_rhs,
  newton_divergence,
  singular_matrix,
  stiffness_failure,
};

struct NewtonOpts {
  double tol = 1e-9;
  int max_iter = 20;
};

struct StepOutcome {
  ParticleStatus status = ParticleStatus::ok;
  int newton_iterations = 0;
};

/// Per-particle scratch for implicit stepping. For linear models the
/// factored iteration matrix I - h*beta0*L is cached and reused while
/// h*beta0 is unchanged.
class NewtonWorkspace {
 public:
  NewtonWorkspace() = default;
  explicit NewtonWorkspace(std::size_t dim);
  void resize(std::size_t dim);
  void resize_if_needed(std::size_t dim) {
    if (fval.size() != dim) resize(dim);
  }

  std::vector<double> fval, residual, delta, guess;
  linalg::DenseMatrix jac, iter_matrix;
  linalg::DenseLu dense_lu;
  linalg::SparseLu sparse_lu;
  double cached_hb0 = 0.0;
  bool cache_valid = false;
};

/// Adams-Bashforth combination from recorded history; no model evaluation.
/// Requires hist.filled() >= scheme.fvals_needed().
void explicit_step(const StepHistory& hist, double h, const LmmScheme& scheme,
                   std::span<double> out);

/// Polynomial extrapolation of order q through the q+1 newest states,
/// evaluated one uniform step ahead.
void extrapolate_predictor(const StepHistory& hist, int order_q,
                           std::span<double> out);

/// One implicit (AM/BDF) step solved with Newton iteration on
/// G(x) = x - h beta0 f(t_next, x) - c, iteration matrix I - h beta0 J,
/// initial guess `guess`, convergence when |dx|_inf <= tol (1 + |x|_inf).
/// `out` carries the last iterate even on divergence.
StepOutcome implicit_step_from_guess(const models::ModelEval& eval,
                                     double t_next, double h,
                                     const LmmScheme& scheme,
                                     std::span<const double> c,
                                     std::span<const double> guess,
                                     const NewtonOpts& opts,
                                     std::span<double> out,
                                     NewtonWorkspace& ws);

/// Contract entry point: builds the history terms and the explicit
/// same-order predictor internally. Counted by instrumentation so tests can
/// assert the batched backend never takes this path.
StepOutcome implicit_step(const models::ModelEval& eval,
                          const StepHistory& hist, double t_next, double h,
                          const LmmScheme& scheme, const NewtonOpts& opts,
                          std::span<double> out, NewtonWorkspace& ws);

/// Known history terms c of the implicit step equation.
void implicit_history_terms(const StepHistory& hist, double h,
                            const LmmScheme& scheme, std::span<double> c);

/// Local-truncation-error estimate of `corrector`, componentwise >= 0.
/// AM: Milne device against the same-order AB predictor. BDF: error-constant
/// scaling of the distance to the extrapolation predictor. AB: difference
/// against the order-(p+1) step carried in `aux`.
void lte_estimate(const LmmScheme& scheme, std::span<const double> predictor,
                  std::span<const double> corrector,
                  std::span<const double> aux, std::span<double> out);

/// |C_corr| / |C_pred - C_corr| for a corrector paired with a predictor of
/// leading error constant `predictor_error_const`.
double lte_scale_factor(const LmmScheme& scheme, double predictor_error_const);

struct PropagationResult {
  std::vector<double> state;
  std::vector<double> gamma_diag;
  std::size_t steps_taken = 0;
  std::size_t newton_failures = 0;
  ParticleStatus status = ParticleStatus::ok;
  int total_newton_iterations = 0;
};

/// Fixed-step interval propagation with a fresh order ramp (order 1, then 2,
/// then the nominal order) at t0. gamma_diag accumulates the squared
/// per-step LTE estimates. (t1 - t0)/h must be an integer up to round-off.
PropagationResult propagate_interval(const models::OdeModel& model,
                                     std::span<const double> theta_natural,
                                     std::span<const double> x0, double t0,
                                     double t1, double h,
                                     const LmmScheme& scheme,
                                     const NewtonOpts& opts = {});

/// One implicit step for N particles at once: residuals stacked, iteration
/// matrices aggregated into a block-diagonal system, converged particles
/// masked out of later iterations. Results are bitwise identical to running
/// implicit_step per particle with the same guesses. `workspaces` (optional,
/// size N) enables factor reuse for linear models; `runner` parallelizes the
/// per-block work.
void batched_implicit_step(const models::OdeModel& model,
                           const std::vector<const models::ModelEval*>& evals,
                           const std::vector<StepHistory>& hists,
                           double t_next, double h, const LmmScheme& scheme,
                           const NewtonOpts& opts, double* states_out,
                           StepOutcome* outcomes,
                           std::span<NewtonWorkspace> workspaces = {},
                           ParallelRunner* runner = nullptr);

/// Batched fixed-step interval propagation over a shared step schedule;
/// per-particle results are bitwise identical to propagate_interval.
/// theta_natural is N x p row-major, x0 is N x d row-major.
void propagate_interval_batched(const models::OdeModel& model,
                                const double* theta_natural, const double* x0,
                                std::size_t n_particles, double t0, double t1,
                                double h, const LmmScheme& scheme,
                                const NewtonOpts& opts,
                                PropagationResult* results,
                                ParallelRunner* runner = nullptr);

/// Variable-step BDF(1,2) with a conventional controller: accept when the
/// scaled error estimate is at or below rtol, next step
/// 0.9 h (rtol/est)^(1/(p+1)) clipped to [h/4, 4h]. gamma_diag is the same
/// scalar rtol * steps_taken in every component.
PropagationResult adaptive_bdf_interval(const models::OdeModel& model,
                                        std::span<const double> theta_natural,
                                        std::span<const double> x0, double t0,
                                        double t1, double rtol,
                                        const NewtonOpts& opts = {});

}  // namespace pfsmc::lmm
