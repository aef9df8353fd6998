#include "pfsmc/filter.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include "pfsmc/errors.hpp"

namespace pfsmc::filter {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logsumexp(std::span<const double> v) {
  double mx = kNegInf;
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return kNegInf;
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

class PhaseClock {
 public:
  explicit PhaseClock(double* slot) : slot_(slot) {
    start_ = std::chrono::steady_clock::now();
  }
  ~PhaseClock() {
    if (slot_ != nullptr) {
      *slot_ += std::chrono::duration<double>(
                    std::chrono::steady_clock::now() - start_)
                    .count();
    }
  }

 private:
  double* slot_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

void PfConfig::validate(const models::OdeModel& model,
                        const ObservationModel& obs) const {
  if (particles == 0) throw ConfigError("config: particles must be >= 1");
  if (!(shrink_a > 0.0 && shrink_a < 1.0)) {
    throw ConfigError("config: shrink factor a must lie in (0, 1)");
  }
  if (!integrator.adaptive && !(h > 0.0)) {
    throw ConfigError("config: step size h must be positive");
  }
  if (integrator.adaptive && !(integrator.rtol > 0.0)) {
    throw ConfigError("config: rtol must be positive");
  }
  if (!(obs.sigma > 0.0)) {
    throw ConfigError("config: observation noise sigma must be positive");
  }
  if (theta_prior.size() != model.param_dim()) {
    throw ConfigError("config: prior count does not match parameter count");
  }
  if (x0_prior.size() != model.dim()) {
    throw ConfigError("config: x0 prior count does not match state dimension");
  }
  std::vector<bool> seen(model.dim(), false);
  for (std::size_t idx : obs.indices) {
    if (idx >= model.dim() || seen[idx]) {
      throw ConfigError("config: observation indices must be distinct and in "
                        "range");
    }
    seen[idx] = true;
  }
}

Ensemble initialize(const PfConfig& cfg, const models::OdeModel& model) {
  const std::size_t n = cfg.particles;
  const std::size_t d = model.dim();
  const std::size_t p = model.param_dim();
  Ensemble ens;
  ens.n = n;
  ens.d = d;
  ens.p = p;
  ens.states.resize(n * d);
  ens.params_u.resize(n * p);
  ens.logw.assign(n, -std::log(static_cast<double>(n)));
  for (std::size_t i = 0; i < n; ++i) {
    rng::RngStream stream(cfg.seed, 0, i, rng::Purpose::init);
    for (std::size_t j = 0; j < p; ++j) {
      ens.params_u[i * p + j] =
          cfg.theta_prior[j].mu + cfg.theta_prior[j].sigma *
                                      stream.next_normal();
    }
    for (std::size_t j = 0; j < d; ++j) {
      double v = cfg.x0_prior[j].mean +
                 cfg.x0_prior[j].std * stream.next_normal();
      if (cfg.x0_prior[j].clamp_nonneg && v < 0.0) v = 0.0;
      ens.states[i * d + j] = v;
    }
  }
  ens.mean_u.resize(p);
  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  linalg::weighted_mean_cov(ens.params_u, n, p, w, ens.mean_u, ens.cov_u);
  return ens;
}

std::vector<double> shrink(std::span<const double> params_u, std::size_t n,
                           std::size_t p, std::span<const double> logw,
                           double a) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(logw[i]);
  std::vector<double> mean(p);
  linalg::DenseMatrix cov;
  linalg::weighted_mean_cov(params_u, n, p, w, mean, cov);
  std::vector<double> out(n * p);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      out[i * p + j] = a * params_u[i * p + j] + (1.0 - a) * mean[j];
    }
  }
  return out;
}

double log_likelihood(std::span<const double> y, std::span<const double> x,
                      const ObservationModel& obs) {
  if (!(obs.sigma > 0.0)) {
    throw ConfigError("log_likelihood: sigma must be positive");
  }
  if (y.size() != obs.indices.size()) {
    throw std::invalid_argument("log_likelihood: observation size mismatch");
  }
  const double m = static_cast<double>(y.size());
  const double s2 = obs.sigma * obs.sigma;
  double ss = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) {
    const double r = y[k] - x[obs.indices[k]];
    ss += r * r;
  }
  constexpr double kLog2Pi = 1.8378770664093453;
  return -0.5 * m * (kLog2Pi + std::log(s2)) - ss / (2.0 * s2);
}

std::vector<double> fitness_weights(std::span<const double> logw,
                                    std::span<const double> loglik) {
  const std::size_t n = logw.size();
  std::vector<double> lg(n);
  for (std::size_t i = 0; i < n; ++i) lg[i] = logw[i] + loglik[i];
  const double lse = logsumexp(lg);
  if (!std::isfinite(lse)) {
    throw NumericalError(
        "total degeneracy: every particle has zero predictive likelihood");
  }
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = std::exp(lg[i] - lse);
  return g;
}

std::vector<std::size_t> resample_multinomial(std::span<const double> g,
                                              std::uint64_t seed,
                                              std::uint64_t time_index) {
  const std::size_t n = g.size();
  std::vector<double> cdf(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += g[i];
    cdf[i] = acc;
  }
  cdf[n - 1] = std::max(cdf[n - 1], 1.0);  // guard the last bin
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    rng::RngStream stream(seed, time_index, i, rng::Purpose::resample);
    const double u = stream.next_uniform();
    const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    idx[i] = static_cast<std::size_t>(it - cdf.begin());
    if (idx[i] >= n) idx[i] = n - 1;
  }
  return idx;
}

std::vector<double> proliferate(std::span<const double> params_u,
                                std::size_t n, std::size_t p,
                                const linalg::DenseMatrix& cov_u, double a,
                                std::uint64_t seed,
                                std::uint64_t time_index) {
  const double s = std::sqrt(1.0 - a * a);
  const linalg::CholResult chol = linalg::chol_psd(cov_u);
  std::vector<double> out(params_u.begin(), params_u.end());
  std::vector<double> z(p);
  for (std::size_t i = 0; i < n; ++i) {
    rng::RngStream stream(seed, time_index, i, rng::Purpose::proliferate);
    for (std::size_t j = 0; j < p; ++j) z[j] = stream.next_normal();
    for (std::size_t r = 0; r < p; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c <= r; ++c) dot += chol.lower.at(r, c) * z[c];
      out[i * p + r] += s * dot;
    }
  }
  return out;
}

void innovate(std::span<double> x, std::span<const double> gamma_diag,
              std::uint64_t seed, std::uint64_t time_index,
              std::uint64_t particle) {
  rng::RngStream stream(seed, time_index, particle, rng::Purpose::innovate);
  for (std::size_t j = 0; j < x.size(); ++j) {
    x[j] += std::sqrt(gamma_diag[j]) * stream.next_normal();
  }
}

std::vector<double> update_weights(std::span<const double> loglik_new,
                                   std::span<const double> loglik_old) {
  const std::size_t n = loglik_new.size();
  std::vector<double> lw(n);
  for (std::size_t i = 0; i < n; ++i) lw[i] = loglik_new[i] - loglik_old[i];
  const double lse = logsumexp(lw);
  if (!std::isfinite(lse)) {
    throw NumericalError(
        "total degeneracy: every repropagated particle has zero likelihood");
  }
  for (std::size_t i = 0; i < n; ++i) lw[i] -= lse;
  return lw;
}

double effective_sample_size(std::span<const double> logw) {
  double sum = 0.0;
  for (double lw : logw) sum += std::exp(2.0 * lw);
  return 1.0 / sum;
}

namespace {

// Dispatches one interval propagation for every particle through the
// configured backend; per-particle results land in `results`.
void propagate_ensemble(exec::Backend& backend, const models::OdeModel& model,
                        const std::vector<double>& theta_nat,
                        const std::vector<double>& states, std::size_t n,
                        double t_prev, double t_obs, const PfConfig& cfg,
                        std::vector<lmm::PropagationResult>& results) {
  const std::size_t p = model.param_dim();
  const std::size_t d = model.dim();
  results.resize(n);
  if (cfg.integrator.adaptive) {
    // No shared step grid exists across particles, so the batched backend
    // falls back to pool dispatch over whole particles.
    exec::map_particles(backend, n, [&](std::size_t i) {
      results[i] = lmm::adaptive_bdf_interval(
          model, {theta_nat.data() + i * p, p}, {states.data() + i * d, d},
          t_prev, t_obs, cfg.integrator.rtol, cfg.newton);
    });
    return;
  }
  const lmm::LmmScheme scheme =
      lmm::scheme_coefficients(cfg.integrator.family, cfg.integrator.order);
  if (backend.kind == exec::Backend::Kind::batched) {
    exec::run_batched_propagation(backend, model, theta_nat.data(),
                                  states.data(), n, t_prev, t_obs, cfg.h,
                                  scheme, cfg.newton, results.data());
    return;
  }
  exec::map_particles(backend, n, [&](std::size_t i) {
    results[i] = lmm::propagate_interval(
        model, {theta_nat.data() + i * p, p}, {states.data() + i * d, d},
        t_prev, t_obs, cfg.h, scheme, cfg.newton);
  });
}

std::vector<double> natural_params(const models::OdeModel& model,
                                   const std::vector<double>& params_u,
                                   std::size_t n, std::size_t p) {
  std::vector<double> nat(n * p);
  for (std::size_t i = 0; i < n; ++i) {
    models::to_natural(model, {params_u.data() + i * p, p},
                       {nat.data() + i * p, p});
  }
  return nat;
}

template <typename T>
std::vector<T> gather_rows(const std::vector<T>& src, std::size_t stride,
                           const std::vector<std::size_t>& idx) {
  std::vector<T> out(idx.size() * stride);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(src.begin() + idx[i] * stride,
              src.begin() + (idx[i] + 1) * stride,
              out.begin() + i * stride);
  }
  return out;
}

}  // namespace

StepResult pf_step(Ensemble& ens, std::span<const double> y, std::size_t j,
                   double t_prev, double t_obs, const PfConfig& cfg,
                   exec::Backend& backend, const models::OdeModel& model,
                   const ObservationModel& obs, PhaseTimings* timings) {
  const std::size_t n = ens.n;
  const std::size_t d = ens.d;
  const std::size_t p = ens.p;

  // Shrink and predict with the shrunk parameters.
  std::vector<double> theta_bar_u =
      shrink(ens.params_u, n, p, ens.logw, cfg.shrink_a);
  std::vector<lmm::PropagationResult> predicted;
  {
    PhaseClock clock(timings ? &timings->propagate : nullptr);
    const std::vector<double> theta_bar_nat =
        natural_params(model, theta_bar_u, n, p);
    propagate_ensemble(backend, model, theta_bar_nat, ens.states, n, t_prev,
                       t_obs, cfg, predicted);
  }

  std::vector<double> xbar(n * d);
  std::vector<double> loglik_bar(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (predicted[i].status == lmm::ParticleStatus::ok) {
      std::copy(predicted[i].state.begin(), predicted[i].state.end(),
                xbar.begin() + i * d);
      loglik_bar[i] = log_likelihood(y, {xbar.data() + i * d, d}, obs);
    } else {
      std::copy(ens.states.begin() + i * d, ens.states.begin() + (i + 1) * d,
                xbar.begin() + i * d);
      loglik_bar[i] = kNegInf;
    }
  }

  // Survival of the fittest: fitness weights, ancestor draws, reshuffle.
  std::vector<std::size_t> ancestors;
  {
    PhaseClock clock(timings ? &timings->resample : nullptr);
    const std::vector<double> g = fitness_weights(ens.logw, loglik_bar);
    ancestors = resample_multinomial(g, cfg.seed, j);
    ens.states = gather_rows(ens.states, d, ancestors);
    xbar = gather_rows(xbar, d, ancestors);
    theta_bar_u = gather_rows(theta_bar_u, p, ancestors);
    loglik_bar = gather_rows(loglik_bar, 1, ancestors);
  }

  // Proliferation around the reshuffled shrunk parameters.
  std::vector<double> theta_new_u;
  {
    PhaseClock clock(timings ? &timings->proliferate : nullptr);
    theta_new_u =
        proliferate(theta_bar_u, n, p, ens.cov_u, cfg.shrink_a, cfg.seed, j);
  }

  // Repropagate from the reshuffled states with the proliferated
  // parameters, then add the LMM-error innovation.
  std::vector<double> loglik_new(n, kNegInf);
  {
    PhaseClock clock(timings ? &timings->repropagate : nullptr);
    const std::vector<double> theta_new_nat =
        natural_params(model, theta_new_u, n, p);
    std::vector<lmm::PropagationResult> repropagated;
    propagate_ensemble(backend, model, theta_new_nat, ens.states, n, t_prev,
                       t_obs, cfg, repropagated);
    for (std::size_t i = 0; i < n; ++i) {
      if (repropagated[i].status != lmm::ParticleStatus::ok) {
        continue;  // keep the pre-step state; weight becomes zero
      }
      std::span<double> xi(ens.states.data() + i * d, d);
      std::copy(repropagated[i].state.begin(), repropagated[i].state.end(),
                xi.begin());
      innovate(xi, repropagated[i].gamma_diag, cfg.seed, j, i);
      loglik_new[i] = log_likelihood(y, xi, obs);
    }
  }

  // Weight update against the reshuffled predictor likelihoods, then the
  // moment refresh.
  TraceRow row;
  {
    PhaseClock clock(timings ? &timings->weights : nullptr);
    ens.params_u = std::move(theta_new_u);
    ens.logw = update_weights(loglik_new, loglik_bar);
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = std::exp(ens.logw[i]);
    linalg::weighted_mean_cov(ens.params_u, n, p, w, ens.mean_u, ens.cov_u);

    row.j = j;
    row.t = t_obs;
    row.theta_mean.resize(p);
    models::to_natural(model, ens.mean_u, row.theta_mean);
    row.theta_var.resize(p);
    for (std::size_t k = 0; k < p; ++k) row.theta_var[k] = ens.cov_u.at(k, k);
    row.state_mean.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        row.state_mean[k] += w[i] * ens.states[i * d + k];
      }
    }
    row.ess = effective_sample_size(ens.logw);
  }
  return {std::move(row)};
}

PosteriorTrace run(const ObservationData& data, const PfConfig& cfg,
                   exec::Backend& backend, const models::OdeModel& model,
                   const ObservationModel& obs, PhaseTimings* timings) {
  cfg.validate(model, obs);
  if (data.m != obs.indices.size()) {
    throw ConfigError("run: data width does not match observation model");
  }
  backend.start();

  Ensemble ens = initialize(cfg, model);
  PosteriorTrace trace;
  trace.rows.reserve(data.steps() + 1);

  TraceRow initial;
  initial.j = 0;
  initial.t = data.t0;
  initial.theta_mean.resize(ens.p);
  models::to_natural(model, ens.mean_u, initial.theta_mean);
  initial.theta_var.resize(ens.p);
  for (std::size_t k = 0; k < ens.p; ++k) {
    initial.theta_var[k] = ens.cov_u.at(k, k);
  }
  initial.state_mean.assign(ens.d, 0.0);
  for (std::size_t i = 0; i < ens.n; ++i) {
    for (std::size_t k = 0; k < ens.d; ++k) {
      initial.state_mean[k] +=
          std::exp(ens.logw[i]) * ens.states[i * ens.d + k];
    }
  }
  initial.ess = effective_sample_size(ens.logw);
  trace.rows.push_back(std::move(initial));

  int low_ess_streak = 0;
  double t_prev = data.t0;
  for (std::size_t j = 1; j <= data.steps(); ++j) {
    const double t_obs = data.times[j - 1];
    StepResult step = pf_step(ens, data.row(j - 1), j, t_prev, t_obs, cfg,
                              backend, model, obs, timings);
    if (step.trace.ess < 1.0 + 1e-6) {
      if (++low_ess_streak >= 3) step.trace.degeneracy_warning = true;
    } else {
      low_ess_streak = 0;
    }
    trace.rows.push_back(std::move(step.trace));
    t_prev = t_obs;
  }
  return trace;
}

}  // namespace pfsmc::filter
