#include "pfsmc/lmm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>

#include "pfsmc/errors.hpp"
#include "pfsmc/instrumentation.hpp"

namespace pfsmc::lmm {

namespace {

// Adams-Bashforth table extended one order past the public surface: the
// order-3 error estimator compares against an internal AB4 step.
const LmmScheme& ab_table(int order) {
  static const LmmScheme tbl[4] = {
      {Family::ab, 1, {1.0}, {0.0, 1.0}, 1.0 / 2.0},
      {Family::ab, 2, {1.0}, {0.0, 3.0 / 2.0, -1.0 / 2.0}, 5.0 / 12.0},
      {Family::ab,
       3,
       {1.0},
       {0.0, 23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0},
       3.0 / 8.0},
      {Family::ab,
       4,
       {1.0},
       {0.0, 55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0},
       251.0 / 720.0},
  };
  return tbl[order - 1];
}

const LmmScheme& am_table(int order) {
  static const LmmScheme tbl[3] = {
      {Family::am, 1, {1.0}, {1.0}, -1.0 / 2.0},
      {Family::am, 2, {1.0}, {1.0 / 2.0, 1.0 / 2.0}, -1.0 / 12.0},
      {Family::am,
       3,
       {1.0},
       {5.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0},
       -1.0 / 24.0},
  };
  return tbl[order - 1];
}

const LmmScheme& bdf_table(int order) {
  static const LmmScheme tbl[3] = {
      {Family::bdf, 1, {1.0}, {1.0}, -1.0 / 2.0},
      {Family::bdf, 2, {4.0 / 3.0, -1.0 / 3.0}, {2.0 / 3.0}, -2.0 / 9.0},
      {Family::bdf,
       3,
       {18.0 / 11.0, -9.0 / 11.0, 2.0 / 11.0},
       {6.0 / 11.0},
       -3.0 / 22.0},
  };
  return tbl[order - 1];
}

}  // namespace

LmmScheme scheme_coefficients(Family family, int order) {
  if (order < 1 || order > 3) {
    throw ConfigError("scheme_coefficients: order must be 1, 2 or 3");
  }
  switch (family) {
    case Family::ab:
      return ab_table(order);
    case Family::am:
      return am_table(order);
    case Family::bdf:
      return bdf_table(order);
  }
  throw ConfigError("scheme_coefficients: unknown family");
}

StepHistory::StepHistory(std::size_t dim)
    : dim_(dim), states_(kDepth * dim), fvals_(kDepth * dim) {}

void StepHistory::reset(std::span<const double> x0,
                        std::span<const double> f0) {
  filled_ = 0;
  head_ = 0;
  push(x0, f0);
}

void StepHistory::push(std::span<const double> x, std::span<const double> f) {
  head_ = (head_ + 1) % kDepth;
  std::copy(x.begin(), x.end(), states_.begin() + head_ * dim_);
  std::copy(f.begin(), f.end(), fvals_.begin() + head_ * dim_);
  if (filled_ < kDepth) ++filled_;
}

std::size_t StepHistory::slot(std::size_t age) const {
  return (head_ + kDepth - age) % kDepth;
}

std::span<const double> StepHistory::state(std::size_t age) const {
  return {states_.data() + slot(age) * dim_, dim_};
}

std::span<const double> StepHistory::fval(std::size_t age) const {
  return {fvals_.data() + slot(age) * dim_, dim_};
}

void explicit_step(const StepHistory& hist, double h, const LmmScheme& scheme,
                   std::span<double> out) {
  const std::size_t d = hist.dim();
  if (out.size() != d) {
    throw std::invalid_argument("explicit_step: output dimension mismatch");
  }
  if (hist.filled() < std::max(scheme.states_needed(), scheme.fvals_needed())) {
    throw std::logic_error("explicit_step: insufficient history");
  }
  for (std::size_t j = 0; j < d; ++j) out[j] = 0.0;
  for (std::size_t i = 0; i < scheme.alpha.size(); ++i) {
    const auto xs = hist.state(i);
    const double a = scheme.alpha[i];
    for (std::size_t j = 0; j < d; ++j) out[j] += a * xs[j];
  }
  for (std::size_t i = 1; i < scheme.beta.size(); ++i) {
    const auto fs = hist.fval(i - 1);
    const double hb = h * scheme.beta[i];
    for (std::size_t j = 0; j < d; ++j) out[j] += hb * fs[j];
  }
}

void implicit_history_terms(const StepHistory& hist, double h,
                            const LmmScheme& scheme, std::span<double> c) {
  const std::size_t d = hist.dim();
  for (std::size_t j = 0; j < d; ++j) c[j] = 0.0;
  for (std::size_t i = 0; i < scheme.alpha.size(); ++i) {
    const auto xs = hist.state(i);
    const double a = scheme.alpha[i];
    for (std::size_t j = 0; j < d; ++j) c[j] += a * xs[j];
  }
  for (std::size_t i = 1; i < scheme.beta.size(); ++i) {
    const auto fs = hist.fval(i - 1);
    const double hb = h * scheme.beta[i];
    for (std::size_t j = 0; j < d; ++j) c[j] += hb * fs[j];
  }
}

void extrapolate_predictor(const StepHistory& hist, int order_q,
                           std::span<double> out) {
  const std::size_t d = hist.dim();
  if (hist.filled() < static_cast<std::size_t>(order_q) + 1) {
    throw std::logic_error("extrapolate_predictor: insufficient history");
  }
  // Uniform-grid extrapolation one step ahead:
  //   P(t_{n+1}) = sum_{i=0}^{q} (-1)^i binom(q+1, i+1) x_{n-i}.
  for (std::size_t j = 0; j < d; ++j) out[j] = 0.0;
  double binom = static_cast<double>(order_q) + 1.0;  // binom(q+1, 1)
  double sign = 1.0;
  for (int i = 0; i <= order_q; ++i) {
    const auto xs = hist.state(static_cast<std::size_t>(i));
    const double coef = sign * binom;
    for (std::size_t j = 0; j < d; ++j) out[j] += coef * xs[j];
    sign = -sign;
    binom = binom * static_cast<double>(order_q + 1 - (i + 1)) /
            static_cast<double>(i + 2);
  }
}

NewtonWorkspace::NewtonWorkspace(std::size_t dim) { resize(dim); }

void NewtonWorkspace::resize(std::size_t dim) {
  fval.resize(dim);
  residual.resize(dim);
  delta.resize(dim);
  guess.resize(dim);
  cache_valid = false;
}

namespace {

inline void newton_residual(std::span<const double> x,
                            std::span<const double> f, double hb0,
                            std::span<const double> c, std::span<double> r) {
  for (std::size_t j = 0; j < x.size(); ++j) {
    r[j] = x[j] - hb0 * f[j] - c[j];
  }
}

inline void build_dense_iteration_matrix(const linalg::DenseMatrix& jac,
                                         double hb0,
                                         linalg::DenseMatrix& out) {
  const std::size_t d = jac.nrows;
  if (out.nrows != d || out.ncols != d) out = linalg::DenseMatrix(d, d);
  for (std::size_t i = 0; i < d * d; ++i) out.values[i] = -hb0 * jac.values[i];
  for (std::size_t i = 0; i < d; ++i) out.at(i, i) += 1.0;
}

inline linalg::CsrMatrix build_sparse_iteration_matrix(
    const linalg::CsrMatrix& jac, double hb0) {
  return linalg::csr_add(1.0, linalg::CsrMatrix::identity(jac.nrows), -hb0,
                         jac);
}

// Update x -= delta and test |delta|_inf <= tol (1 + |x|_inf). Returns
// 1 converged, 0 continue, -1 non-finite iterate.
inline int newton_update_and_test(std::span<double> x,
                                  std::span<const double> delta, double tol) {
  double dn = 0.0;
  double xn = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    x[j] -= delta[j];
    dn = std::max(dn, std::abs(delta[j]));
    xn = std::max(xn, std::abs(x[j]));
  }
  if (!std::isfinite(xn) || !std::isfinite(dn)) return -1;
  return dn <= tol * (1.0 + xn) ? 1 : 0;
}

// Full Newton solve for one particle: shared by the per-particle and the
// batched paths so their per-particle arithmetic is identical.
StepOutcome newton_solve(const models::ModelEval& eval, double t_next,
                         double hb0, std::span<const double> c,
                         std::span<const double> guess, const NewtonOpts& opts,
                         std::span<double> out, NewtonWorkspace& ws) {
  const std::size_t d = c.size();
  ws.resize_if_needed(d);
  std::copy(guess.begin(), guess.end(), out.begin());
  const bool sparse = eval.sparse_jacobian() != nullptr;
  const bool linear = eval.linear();
  for (int iter = 1; iter <= opts.max_iter; ++iter) {
    if (!eval.rhs(t_next, out, ws.fval)) {
      return {ParticleStatus::invalid_rhs, iter};
    }
    newton_residual(out, ws.fval, hb0, c, ws.residual);
    if (sparse) {
      if (!ws.cache_valid || ws.cached_hb0 != hb0) {
        const linalg::CsrMatrix m =
            build_sparse_iteration_matrix(*eval.sparse_jacobian(), hb0);
        if (!ws.sparse_lu.factor(m)) {
          return {ParticleStatus::singular_matrix, iter};
        }
        ws.cached_hb0 = hb0;
        ws.cache_valid = true;
      }
      ws.sparse_lu.solve(ws.residual, ws.delta);
    } else {
      const bool reuse = linear && ws.cache_valid && ws.cached_hb0 == hb0;
      if (!reuse) {
        if (!eval.jacobian(t_next, out, ws.jac)) {
          return {ParticleStatus::invalid_rhs, iter};
        }
        build_dense_iteration_matrix(ws.jac, hb0, ws.iter_matrix);
        if (!ws.dense_lu.factor(ws.iter_matrix)) {
          return {ParticleStatus::singular_matrix, iter};
        }
        if (linear) {
          ws.cached_hb0 = hb0;
          ws.cache_valid = true;
        }
      }
      ws.dense_lu.solve(ws.residual, ws.delta);
    }
    const int verdict = newton_update_and_test(out, ws.delta, opts.tol);
    if (verdict < 0) return {ParticleStatus::invalid_rhs, iter};
    if (verdict > 0) return {ParticleStatus::ok, iter};
  }
  return {ParticleStatus::newton_divergence, opts.max_iter};
}

}  // namespace

StepOutcome implicit_step_from_guess(const models::ModelEval& eval,
                                     double t_next, double h,
                                     const LmmScheme& scheme,
                                     std::span<const double> c,
                                     std::span<const double> guess,
                                     const NewtonOpts& opts,
                                     std::span<double> out,
                                     NewtonWorkspace& ws) {
  if (!scheme.implicit()) {
    throw std::invalid_argument("implicit step with an explicit scheme");
  }
  return newton_solve(eval, t_next, h * scheme.beta[0], c, guess, opts, out,
                      ws);
}

StepOutcome implicit_step(const models::ModelEval& eval,
                          const StepHistory& hist, double t_next, double h,
                          const LmmScheme& scheme, const NewtonOpts& opts,
                          std::span<double> out, NewtonWorkspace& ws) {
  instrumentation::counters().implicit_step_calls.fetch_add(
      1, std::memory_order_relaxed);
  if (hist.filled() <
      std::max(scheme.states_needed(), scheme.fvals_needed())) {
    throw std::logic_error("implicit_step: insufficient history");
  }
  const std::size_t d = hist.dim();
  ws.resize_if_needed(d);
  std::vector<double> c(d);
  implicit_history_terms(hist, h, scheme, c);
  // Same-order explicit predictor (forward Euler when the ramp has less).
  const int q = static_cast<int>(
      std::min<std::size_t>(scheme.order, hist.filled()));
  explicit_step(hist, h, ab_table(q), ws.guess);
  return implicit_step_from_guess(eval, t_next, h, scheme, c, ws.guess, opts,
                                  out, ws);
}

double lte_scale_factor(const LmmScheme& scheme,
                        double predictor_error_const) {
  return std::abs(scheme.error_const) /
         std::abs(predictor_error_const - scheme.error_const);
}

namespace {

inline void scaled_absdiff(std::span<const double> a,
                           std::span<const double> b, double factor,
                           std::span<double> out) {
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = factor * std::abs(a[j] - b[j]);
  }
}

}  // namespace

void lte_estimate(const LmmScheme& scheme, std::span<const double> predictor,
                  std::span<const double> corrector,
                  std::span<const double> aux, std::span<double> out) {
  switch (scheme.family) {
    case Family::ab:
      scaled_absdiff(corrector, aux, 1.0, out);
      return;
    case Family::am:
      scaled_absdiff(
          corrector, predictor,
          lte_scale_factor(scheme, ab_table(scheme.order).error_const), out);
      return;
    case Family::bdf:
      // Extrapolation predictor has unit leading error constant.
      scaled_absdiff(corrector, predictor, lte_scale_factor(scheme, 1.0), out);
      return;
  }
}

// ---------------------------------------------------------------------------
// Interval propagation
// ---------------------------------------------------------------------------

namespace {

std::size_t interval_step_count(double t0, double t1, double h) {
  if (!(t1 > t0) || !(h > 0.0)) {
    throw ConfigError("propagate_interval: need t1 > t0 and h > 0");
  }
  const double ratio = (t1 - t0) / h;
  const auto m = static_cast<std::size_t>(std::llround(ratio));
  if (m < 1 || std::abs(ratio - static_cast<double>(m)) >
                   1e-9 * std::max(1.0, ratio)) {
    throw ConfigError(
        "propagate_interval: (t1 - t0)/h must be an integer step count");
  }
  return m;
}

// Everything the ramped fixed-step loop needs per particle.
struct ParticleRun {
  std::unique_ptr<models::ModelEval> eval;
  StepHistory hist;
  std::vector<double> x, gamma, guess, pred, aux, xnew, fnew, c, est;
  NewtonWorkspace ws;
  ParticleStatus status = ParticleStatus::ok;
  std::size_t steps_done = 0;
  std::size_t newton_failures = 0;
  int newton_iters = 0;

  bool init(const models::OdeModel& model, std::span<const double> theta,
            std::span<const double> x0, double t0) {
    const std::size_t d = model.dim();
    eval = model.bind(theta);
    hist = StepHistory(d);
    x.assign(x0.begin(), x0.end());
    gamma.assign(d, 0.0);
    guess.resize(d);
    pred.resize(d);
    aux.resize(d);
    xnew.resize(d);
    fnew.resize(d);
    c.resize(d);
    est.resize(d);
    if (!eval->rhs(t0, x, fnew)) {
      status = ParticleStatus::invalid_rhs;
      return false;
    }
    hist.reset(x, fnew);
    return true;
  }

  // Predictor bookkeeping for step k (1-based) at active order p. For
  // explicit families xnew is fully computed here; for implicit ones `c`,
  // `guess` and the LTE reference (`pred`, lte_factor) are prepared.
  double prepare_step(std::size_t k, const LmmScheme& active, double h) {
    const std::size_t avail = hist.filled();
    if (active.family == Family::ab) {
      explicit_step(hist, h, active, xnew);
      if (avail >= static_cast<std::size_t>(active.order) + 1) {
        explicit_step(hist, h, ab_table(active.order + 1), aux);
      } else if (active.order >= 2) {
        explicit_step(hist, h, ab_table(active.order - 1), aux);
      } else {
        const auto xs = hist.state(0);
        std::copy(xs.begin(), xs.end(), aux.begin());
      }
      return 1.0;
    }
    implicit_history_terms(hist, h, active, c);
    const int q =
        static_cast<int>(std::min<std::size_t>(active.order, avail));
    explicit_step(hist, h, ab_table(q), guess);
    if (active.family == Family::am) {
      std::copy(guess.begin(), guess.end(), pred.begin());
      return lte_scale_factor(active, ab_table(active.order).error_const);
    }
    // BDF: extrapolation predictor when enough states, else the explicit
    // guess (forward Euler on the first step).
    if (avail >= static_cast<std::size_t>(active.order) + 1) {
      extrapolate_predictor(hist, active.order, pred);
      return lte_scale_factor(active, 1.0);
    }
    if (k == 1 || avail < 2) {
      std::copy(guess.begin(), guess.end(), pred.begin());
      return lte_scale_factor(active, ab_table(q).error_const);
    }
    extrapolate_predictor(hist, static_cast<int>(avail) - 1, pred);
    return lte_scale_factor(active, 1.0);
  }

  // After xnew holds the accepted step value: accumulate gamma, evaluate f
  // and push. Returns false when the particle dies.
  bool finish_step(double t_next, double lte_factor,
                   std::span<const double> reference) {
    scaled_absdiff(xnew, reference, lte_factor, est);
    for (std::size_t j = 0; j < gamma.size(); ++j) {
      gamma[j] += est[j] * est[j];
    }
    if (!eval->rhs(t_next, xnew, fnew)) {
      status = ParticleStatus::invalid_rhs;
      return false;
    }
    hist.push(xnew, fnew);
    x = xnew;
    ++steps_done;
    return true;
  }

  PropagationResult take_result() {
    PropagationResult r;
    r.state = std::move(x);
    r.gamma_diag = std::move(gamma);
    r.steps_taken = steps_done;
    r.newton_failures = newton_failures;
    r.status = status;
    r.total_newton_iterations = newton_iters;
    return r;
  }
};

}  // namespace

PropagationResult propagate_interval(const models::OdeModel& model,
                                     std::span<const double> theta_natural,
                                     std::span<const double> x0, double t0,
                                     double t1, double h,
                                     const LmmScheme& scheme,
                                     const NewtonOpts& opts) {
  const std::size_t m = interval_step_count(t0, t1, h);
  ParticleRun run;
  if (!run.init(model, theta_natural, x0, t0)) return run.take_result();

  for (std::size_t k = 1; k <= m; ++k) {
    const int p = static_cast<int>(
        std::min<std::size_t>(k, static_cast<std::size_t>(scheme.order)));
    const LmmScheme& active = scheme_coefficients(scheme.family, p);
    const double t_next = t0 + static_cast<double>(k) * h;
    const double factor = run.prepare_step(k, active, h);
    if (active.implicit()) {
      const StepOutcome outcome =
          implicit_step_from_guess(*run.eval, t_next, h, active, run.c,
                                   run.guess, opts, run.xnew, run.ws);
      run.newton_iters += outcome.newton_iterations;
      if (outcome.status != ParticleStatus::ok) {
        run.status = outcome.status;
        if (outcome.status == ParticleStatus::newton_divergence) {
          ++run.newton_failures;
        }
        break;
      }
    }
    const std::span<const double> ref =
        active.family == Family::ab ? std::span<const double>(run.aux)
                                    : std::span<const double>(run.pred);
    if (!run.finish_step(t_next, factor, ref)) break;
  }
  return run.take_result();
}

// ---------------------------------------------------------------------------
// Batched stepping
// ---------------------------------------------------------------------------

namespace {

struct BatchedParticleRef {
  const models::ModelEval* eval;
  const double* c;
  double* x;
  NewtonWorkspace* ws;
  StepOutcome* outcome;
};

// Newton iterations over a set of particles, one iteration level at a time;
// each particle's arithmetic matches newton_solve() bit for bit.
void batched_newton(std::vector<BatchedParticleRef>& parts, std::size_t d,
                    bool model_sparse, double t_next, double hb0,
                    const NewtonOpts& opts, ParallelRunner* runner) {
  const std::size_t n = parts.size();
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) {
    active[i] = i;
    *parts[i].outcome = {ParticleStatus::ok, 0};
  }
  std::vector<double> residuals;
  std::vector<double> fbuf(n * d);
  std::vector<signed char> verdicts(n, 0);

  const bool cached_linear =
      !parts.empty() && parts[0].eval->linear() && parts[0].ws != nullptr;

  for (int iter = 1; iter <= opts.max_iter && !active.empty(); ++iter) {
    const std::size_t na = active.size();
    residuals.assign(na * d, 0.0);
    std::vector<signed char> eval_fail(na, 0);

    auto phase_residual = [&](std::size_t begin, std::size_t end) {
      for (std::size_t a = begin; a < end; ++a) {
        const BatchedParticleRef& pr = parts[active[a]];
        double* f = fbuf.data() + active[a] * d;
        if (!pr.eval->rhs(t_next, {pr.x, d}, {f, d})) {
          eval_fail[a] = 1;
          continue;
        }
        newton_residual({pr.x, d}, {f, d}, hb0, {pr.c, d},
                        {residuals.data() + a * d, d});
      }
    };
    if (runner) {
      runner->run(na, phase_residual);
    } else {
      phase_residual(0, na);
    }

    // Drop particles whose rhs failed before assembling the system.
    {
      std::vector<std::size_t> still;
      still.reserve(na);
      std::vector<double> kept;
      kept.reserve(na * d);
      for (std::size_t a = 0; a < na; ++a) {
        const std::size_t i = active[a];
        if (eval_fail[a]) {
          *parts[i].outcome = {ParticleStatus::invalid_rhs, iter};
        } else {
          still.push_back(i);
          kept.insert(kept.end(), residuals.begin() + a * d,
                      residuals.begin() + (a + 1) * d);
        }
      }
      active = std::move(still);
      residuals = std::move(kept);
    }
    if (active.empty()) break;
    const std::size_t nk = active.size();

    std::vector<double> delta(nk * d, 0.0);
    std::vector<std::size_t> singular;

    if (cached_linear) {
      // Per-particle cached factors; factor on first use, reuse afterwards.
      std::vector<signed char> factor_fail(nk, 0);
      auto phase_solve = [&](std::size_t begin, std::size_t end) {
        for (std::size_t a = begin; a < end; ++a) {
          const BatchedParticleRef& pr = parts[active[a]];
          NewtonWorkspace& ws = *pr.ws;
          ws.resize_if_needed(d);
          if (pr.eval->sparse_jacobian() != nullptr) {
            if (!ws.cache_valid || ws.cached_hb0 != hb0) {
              const linalg::CsrMatrix m = build_sparse_iteration_matrix(
                  *pr.eval->sparse_jacobian(), hb0);
              if (!ws.sparse_lu.factor(m)) {
                factor_fail[a] = 1;
                continue;
              }
              ws.cached_hb0 = hb0;
              ws.cache_valid = true;
            }
            ws.sparse_lu.solve({residuals.data() + a * d, d},
                               {delta.data() + a * d, d});
          } else {
            if (!ws.cache_valid || ws.cached_hb0 != hb0) {
              if (!pr.eval->jacobian(t_next, {pr.x, d}, ws.jac)) {
                factor_fail[a] = 1;
                continue;
              }
              build_dense_iteration_matrix(ws.jac, hb0, ws.iter_matrix);
              if (!ws.dense_lu.factor(ws.iter_matrix)) {
                factor_fail[a] = 1;
                continue;
              }
              ws.cached_hb0 = hb0;
              ws.cache_valid = true;
            }
            ws.dense_lu.solve({residuals.data() + a * d, d},
                              {delta.data() + a * d, d});
          }
        }
      };
      if (runner) {
        runner->run(nk, phase_solve);
      } else {
        phase_solve(0, nk);
      }
      for (std::size_t a = 0; a < nk; ++a) {
        if (factor_fail[a]) singular.push_back(a);
      }
    } else if (model_sparse) {
      std::vector<linalg::CsrMatrix> blocks(nk);
      auto phase_build = [&](std::size_t begin, std::size_t end) {
        for (std::size_t a = begin; a < end; ++a) {
          const BatchedParticleRef& pr = parts[active[a]];
          blocks[a] = build_sparse_iteration_matrix(
              *pr.eval->sparse_jacobian(), hb0);
        }
      };
      if (runner) {
        runner->run(nk, phase_build);
      } else {
        phase_build(0, nk);
      }
      const linalg::BlockDiag bd =
          linalg::block_diag_assemble_sparse(std::move(blocks));
      linalg::BlockDiagSolveResult sol =
          linalg::block_diag_solve(bd, residuals, runner);
      delta = std::move(sol.x);
      singular = std::move(sol.singular_blocks);
    } else {
      std::vector<linalg::DenseMatrix> blocks(nk);
      std::vector<signed char> jac_fail(nk, 0);
      auto phase_build = [&](std::size_t begin, std::size_t end) {
        for (std::size_t a = begin; a < end; ++a) {
          const BatchedParticleRef& pr = parts[active[a]];
          NewtonWorkspace& ws = *pr.ws;
          if (!pr.eval->jacobian(t_next, {pr.x, d}, ws.jac)) {
            jac_fail[a] = 1;
            blocks[a] = linalg::DenseMatrix::identity(d);
            continue;
          }
          build_dense_iteration_matrix(ws.jac, hb0, blocks[a]);
        }
      };
      if (runner) {
        runner->run(nk, phase_build);
      } else {
        phase_build(0, nk);
      }
      const linalg::BlockDiag bd =
          linalg::block_diag_assemble(std::move(blocks));
      linalg::BlockDiagSolveResult sol =
          linalg::block_diag_solve(bd, residuals, runner);
      delta = std::move(sol.x);
      singular = std::move(sol.singular_blocks);
      for (std::size_t a = 0; a < nk; ++a) {
        if (jac_fail[a]) {
          *parts[active[a]].outcome = {ParticleStatus::invalid_rhs, iter};
          verdicts[active[a]] = -2;
        }
      }
    }

    for (std::size_t s : singular) {
      *parts[active[s]].outcome = {ParticleStatus::singular_matrix, iter};
      verdicts[active[s]] = -2;
    }

    auto phase_update = [&](std::size_t begin, std::size_t end) {
      for (std::size_t a = begin; a < end; ++a) {
        const std::size_t i = active[a];
        if (verdicts[i] == -2) continue;  // already failed this iteration
        verdicts[i] = static_cast<signed char>(newton_update_and_test(
            {parts[i].x, d}, {delta.data() + a * d, d}, opts.tol));
      }
    };
    if (runner) {
      runner->run(nk, phase_update);
    } else {
      phase_update(0, nk);
    }

    std::vector<std::size_t> next;
    next.reserve(nk);
    for (std::size_t a = 0; a < nk; ++a) {
      const std::size_t i = active[a];
      switch (verdicts[i]) {
        case 1:
          *parts[i].outcome = {ParticleStatus::ok, iter};
          break;
        case 0:
          if (iter == opts.max_iter) {
            *parts[i].outcome = {ParticleStatus::newton_divergence, iter};
          } else {
            next.push_back(i);
          }
          break;
        case -1:
          *parts[i].outcome = {ParticleStatus::invalid_rhs, iter};
          break;
        default:
          break;  // failure already recorded
      }
      verdicts[i] = 0;
    }
    active = std::move(next);
  }
}

}  // namespace

void batched_implicit_step(const models::OdeModel& model,
                           const std::vector<const models::ModelEval*>& evals,
                           const std::vector<StepHistory>& hists,
                           double t_next, double h, const LmmScheme& scheme,
                           const NewtonOpts& opts, double* states_out,
                           StepOutcome* outcomes,
                           std::span<NewtonWorkspace> workspaces,
                           ParallelRunner* runner) {
  if (!scheme.implicit()) {
    throw std::invalid_argument("batched_implicit_step: explicit scheme");
  }
  const std::size_t n = evals.size();
  const std::size_t d = model.dim();
  if (hists.size() != n || (!workspaces.empty() && workspaces.size() != n)) {
    throw std::invalid_argument("batched_implicit_step: size mismatch");
  }
  for (const StepHistory& hist : hists) {
    if (hist.filled() <
        std::max(scheme.states_needed(), scheme.fvals_needed())) {
      throw std::logic_error("batched_implicit_step: insufficient history");
    }
  }
  std::vector<double> cterms(n * d);
  auto phase_prepare = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      implicit_history_terms(hists[i], h, scheme,
                             {cterms.data() + i * d, d});
      const int q = static_cast<int>(
          std::min<std::size_t>(scheme.order, hists[i].filled()));
      explicit_step(hists[i], h, ab_table(q), {states_out + i * d, d});
    }
  };
  if (runner) {
    runner->run(n, phase_prepare);
  } else {
    phase_prepare(0, n);
  }

  std::vector<NewtonWorkspace> local_ws;
  if (workspaces.empty()) {
    local_ws.resize(n);
    workspaces = local_ws;
  }
  std::vector<BatchedParticleRef> parts(n);
  for (std::size_t i = 0; i < n; ++i) {
    workspaces[i].resize_if_needed(d);
    parts[i] = {evals[i], cterms.data() + i * d, states_out + i * d,
                &workspaces[i], outcomes + i};
  }
  batched_newton(parts, d, model.sparse(), t_next, h * scheme.beta[0], opts,
                 runner);
}

void propagate_interval_batched(const models::OdeModel& model,
                                const double* theta_natural, const double* x0,
                                std::size_t n_particles, double t0, double t1,
                                double h, const LmmScheme& scheme,
                                const NewtonOpts& opts,
                                PropagationResult* results,
                                ParallelRunner* runner) {
  const std::size_t m = interval_step_count(t0, t1, h);
  const std::size_t d = model.dim();
  const std::size_t p = model.param_dim();

  std::vector<ParticleRun> runs(n_particles);
  auto phase_init = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      runs[i].init(model, {theta_natural + i * p, p}, {x0 + i * d, d}, t0);
    }
  };
  if (runner) {
    runner->run(n_particles, phase_init);
  } else {
    phase_init(0, n_particles);
  }

  std::vector<std::size_t> live;
  live.reserve(n_particles);
  for (std::size_t i = 0; i < n_particles; ++i) {
    if (runs[i].status == ParticleStatus::ok) live.push_back(i);
  }

  std::vector<double> factors(n_particles, 1.0);
  std::vector<StepOutcome> outcomes(n_particles);
  std::vector<BatchedParticleRef> parts;

  for (std::size_t k = 1; k <= m && !live.empty(); ++k) {
    const int order = static_cast<int>(
        std::min<std::size_t>(k, static_cast<std::size_t>(scheme.order)));
    const LmmScheme& active = scheme_coefficients(scheme.family, order);
    const double t_next = t0 + static_cast<double>(k) * h;

    auto phase_prepare = [&](std::size_t begin, std::size_t end) {
      for (std::size_t a = begin; a < end; ++a) {
        const std::size_t i = live[a];
        factors[i] = runs[i].prepare_step(k, active, h);
      }
    };
    if (runner) {
      runner->run(live.size(), phase_prepare);
    } else {
      phase_prepare(0, live.size());
    }

    if (active.implicit()) {
      parts.clear();
      parts.reserve(live.size());
      for (std::size_t i : live) {
        std::copy(runs[i].guess.begin(), runs[i].guess.end(),
                  runs[i].xnew.begin());
        parts.push_back({runs[i].eval.get(), runs[i].c.data(),
                         runs[i].xnew.data(), &runs[i].ws, &outcomes[i]});
      }
      batched_newton(parts, d, model.sparse(), t_next, h * active.beta[0],
                     opts, runner);
      for (std::size_t i : live) {
        runs[i].newton_iters += outcomes[i].newton_iterations;
        if (outcomes[i].status != ParticleStatus::ok) {
          runs[i].status = outcomes[i].status;
          if (outcomes[i].status == ParticleStatus::newton_divergence) {
            ++runs[i].newton_failures;
          }
        }
      }
    }

    auto phase_finish = [&](std::size_t begin, std::size_t end) {
      for (std::size_t a = begin; a < end; ++a) {
        const std::size_t i = live[a];
        if (runs[i].status != ParticleStatus::ok) continue;
        const std::span<const double> ref =
            active.family == Family::ab
                ? std::span<const double>(runs[i].aux)
                : std::span<const double>(runs[i].pred);
        runs[i].finish_step(t_next, factors[i], ref);
      }
    };
    if (runner) {
      runner->run(live.size(), phase_finish);
    } else {
      phase_finish(0, live.size());
    }

    std::vector<std::size_t> next;
    next.reserve(live.size());
    for (std::size_t i : live) {
      if (runs[i].status == ParticleStatus::ok) next.push_back(i);
    }
    live = std::move(next);
  }

  for (std::size_t i = 0; i < n_particles; ++i) {
    results[i] = runs[i].take_result();
  }
}

// ---------------------------------------------------------------------------
// Adaptive BDF(1,2)
// ---------------------------------------------------------------------------

PropagationResult adaptive_bdf_interval(const models::OdeModel& model,
                                        std::span<const double> theta_natural,
                                        std::span<const double> x0, double t0,
                                        double t1, double rtol,
                                        const NewtonOpts& opts) {
  if (!(rtol > 0.0)) {
    throw ConfigError("adaptive_bdf_interval: rtol must be positive");
  }
  if (!(t1 > t0)) {
    throw ConfigError("adaptive_bdf_interval: need t1 > t0");
  }
  const std::size_t d = model.dim();
  const double total = t1 - t0;
  const double h_min = total * 1e-10;

  PropagationResult res;
  res.state.assign(x0.begin(), x0.end());
  res.gamma_diag.assign(d, 0.0);

  auto eval = model.bind(theta_natural);
  NewtonWorkspace ws(d);
  std::vector<double> fcur(d), c(d), pred(d), xnew(d);
  // Previous accepted points for the variable-step order-2 formula.
  std::vector<double> xm1(d), xm2(d);
  double tm1 = 0.0, tm2 = 0.0;
  int npoints = 1;

  if (!eval->rhs(t0, res.state, fcur)) {
    res.status = ParticleStatus::invalid_rhs;
    return res;
  }

  double t = t0;
  double h = total * 1e-2;
  while (t < t1 - total * 1e-12) {
    h = std::min(h, t1 - t);
    if (h < h_min) {
      res.status = ParticleStatus::stiffness_failure;
      return res;
    }
    const int p = npoints >= 2 ? 2 : 1;
    const double t_next = t + h;
    double hb0;
    double factor;
    if (p == 1) {
      // Backward Euler, forward-Euler predictor.
      for (std::size_t j = 0; j < d; ++j) {
        c[j] = res.state[j];
        pred[j] = res.state[j] + h * fcur[j];
      }
      hb0 = h;
      factor = 0.5;  // |C_be| / |C_fe - C_be|
    } else {
      const double h_prev = t - tm1;
      const double omega = h / h_prev;
      // c = a1 x_n + a2 x_{n-1} with a1 + a2 = 1, written in difference form
      // so a constant state passes through exactly.
      const double a2 = -(omega * omega) / (1.0 + 2.0 * omega);
      hb0 = h * (1.0 + omega) / (1.0 + 2.0 * omega);
      for (std::size_t j = 0; j < d; ++j) {
        c[j] = res.state[j] + a2 * (xm1[j] - res.state[j]);
      }
      if (npoints >= 3) {
        // Quadratic extrapolation through the last three accepted points.
        const double dt1 = t - tm1;
        const double dt2 = tm1 - tm2;
        for (std::size_t j = 0; j < d; ++j) {
          const double dd1 = (res.state[j] - xm1[j]) / dt1;
          const double dd1p = (xm1[j] - xm2[j]) / dt2;
          const double dd2 = (dd1 - dd1p) / (t - tm2);
          pred[j] = res.state[j] + h * dd1 + h * (h + dt1) * dd2;
        }
      } else {
        for (std::size_t j = 0; j < d; ++j) {
          pred[j] = res.state[j] + omega * (res.state[j] - xm1[j]);
        }
      }
      factor = 2.0 / 11.0;
    }

    const StepOutcome outcome =
        newton_solve(*eval, t_next, hb0, c, pred, opts, xnew, ws);
    res.total_newton_iterations += outcome.newton_iterations;
    if (outcome.status != ParticleStatus::ok) {
      ++res.newton_failures;
      h *= 0.25;
      continue;
    }

    double err = 0.0;
    double xn = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      err = std::max(err, factor * std::abs(xnew[j] - pred[j]));
      xn = std::max(xn, std::abs(xnew[j]));
    }
    const double est_rel = err / (1.0 + xn);
    double growth;
    if (est_rel == 0.0) {
      growth = 4.0;
    } else {
      growth = 0.9 * std::pow(rtol / est_rel,
                              1.0 / (static_cast<double>(p) + 1.0));
      growth = std::clamp(growth, 0.25, 4.0);
    }
    if (est_rel <= rtol) {
      if (!eval->rhs(t_next, xnew, fcur)) {
        res.status = ParticleStatus::invalid_rhs;
        return res;
      }
      xm2 = xm1;
      tm2 = tm1;
      xm1 = res.state;
      tm1 = t;
      res.state = xnew;
      t = t_next;
      npoints = std::min(npoints + 1, 3);
      ++res.steps_taken;
    }
    h *= growth;
  }

  const double gamma = rtol * static_cast<double>(res.steps_taken);
  std::fill(res.gamma_diag.begin(), res.gamma_diag.end(), gamma);
  return res;
}

}  // namespace pfsmc::lmm
