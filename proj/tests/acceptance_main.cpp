// Acceptance suite: one pass/fail line per criterion, nonzero exit when any
// criterion fails. Criterion 8 is hardware-gated (needs >= 4 cores) and
// reports SKIP with measured numbers when the machine cannot satisfy the
// premise.
#include <cstdarg>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "pfsmc/bench.hpp"
#include "pfsmc/errors.hpp"
#include "pfsmc/exec.hpp"
#include "pfsmc/filter.hpp"
#include "pfsmc/linalg.hpp"
#include "pfsmc/lmm.hpp"
#include "pfsmc/models.hpp"
#include "pfsmc/rng.hpp"

namespace fs = std::filesystem;
using namespace pfsmc;

namespace {

enum class Verdict { pass, fail, skip };

struct Outcome {
  Verdict verdict;
  std::string detail;
};

__attribute__((format(printf, 1, 2))) std::string format(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof buf, fmt, args);
  va_end(args);
  return buf;
}

fs::path g_workdir;

// --- C1: backend equivalence ------------------------------------------------

Outcome criterion_backend_equivalence() {
  bench::ExperimentConfig gen;
  gen.problem = "metabolic";
  gen.seed = 1;
  const std::string csv = (g_workdir / "c1_data.csv").string();
  bench::generate_data(gen, csv);
  const bench::LoadedData loaded = bench::load_data(csv);

  bench::ExperimentConfig cfg = gen;
  cfg.particles = 200;
  cfg.integrator = "bdf2";
  cfg.step = 0.05;
  cfg.seed = 7;
  bench::ProblemSetup setup = bench::build_problem(cfg);
  filter::ObservationModel obs{loaded.obs_indices, loaded.sigma};

  std::vector<exec::Backend> backends = {
      exec::Backend::sequential(), exec::Backend::parallel(2),
      exec::Backend::parallel(4), exec::Backend::batched(2)};
  std::vector<filter::PosteriorTrace> traces;
  for (auto& backend : backends) {
    traces.push_back(
        filter::run(loaded.data, setup.pf, backend, *setup.model, obs));
  }
  if (traces[0].rows.size() != 51) {
    return {Verdict::fail, format("expected 51 trace rows, got %zu",
                                  traces[0].rows.size())};
  }
  double worst = 0.0;
  auto rel = [](double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
  };
  for (std::size_t b = 1; b < traces.size(); ++b) {
    if (traces[b].rows.size() != traces[0].rows.size()) {
      return {Verdict::fail, "trace length mismatch"};
    }
    for (std::size_t r = 0; r < traces[0].rows.size(); ++r) {
      const auto& x = traces[0].rows[r];
      const auto& y = traces[b].rows[r];
      for (std::size_t k = 0; k < x.theta_mean.size(); ++k) {
        worst = std::max(worst, rel(x.theta_mean[k], y.theta_mean[k]));
        worst = std::max(worst, rel(x.theta_var[k], y.theta_var[k]));
      }
      for (std::size_t k = 0; k < x.state_mean.size(); ++k) {
        worst = std::max(worst, rel(x.state_mean[k], y.state_mean[k]));
      }
      worst = std::max(worst, rel(x.ess, y.ess));
    }
  }
  if (worst > 1e-9) {
    return {Verdict::fail,
            format("max relative trace deviation %.3e > 1e-9", worst)};
  }
  return {Verdict::pass,
          format("seq/par2/par4/batch traces agree to %.3e over 51 rows",
                 worst)};
}

// --- C2: integrator orders ---------------------------------------------------

double order_global_error(lmm::Family family, int order, double h) {
  const lmm::LmmScheme scheme = lmm::scheme_coefficients(family, order);
  // x' = -x, exact-solution history seeding.
  class Decay : public models::OdeModel {
   public:
    [[nodiscard]] std::size_t dim() const override { return 1; }
    [[nodiscard]] const std::vector<models::ParamSpec>& params()
        const override {
      static const std::vector<models::ParamSpec> none;
      return none;
    }
    [[nodiscard]] std::unique_ptr<models::ModelEval> bind(
        std::span<const double>) const override {
      class Eval : public models::ModelEval {
       public:
        bool rhs(double, std::span<const double> x,
                 std::span<double> out) const override {
          out[0] = -x[0];
          return true;
        }
        bool jacobian(double, std::span<const double>,
                      linalg::DenseMatrix& out) const override {
          out = linalg::DenseMatrix(1, 1);
          out.at(0, 0) = -1.0;
          return true;
        }
      };
      return std::make_unique<Eval>();
    }
  };
  static const Decay model;
  const auto eval = model.bind({});
  lmm::StepHistory hist(1);
  std::vector<double> x(1), f(1);
  const std::size_t seed_points =
      std::max(scheme.states_needed(), scheme.fvals_needed());
  for (std::size_t i = 0; i < seed_points; ++i) {
    const double t = static_cast<double>(i) * h;
    x[0] = std::exp(-t);
    eval->rhs(t, x, f);
    if (i == 0) {
      hist.reset(x, f);
    } else {
      hist.push(x, f);
    }
  }
  const auto total = static_cast<std::size_t>(std::llround(1.0 / h));
  lmm::NewtonWorkspace ws(1);
  std::vector<double> out(1);
  for (std::size_t k = seed_points; k <= total; ++k) {
    const double t_next = static_cast<double>(k) * h;
    if (scheme.implicit()) {
      const lmm::StepOutcome o =
          lmm::implicit_step(*eval, hist, t_next, h, scheme, {}, out, ws);
      if (o.status != lmm::ParticleStatus::ok) return -1.0;
    } else {
      lmm::explicit_step(hist, h, scheme, out);
    }
    eval->rhs(t_next, out, f);
    hist.push(out, f);
  }
  return std::abs(out[0] - std::exp(-1.0));
}

Outcome criterion_orders() {
  const std::vector<double> hs{0.1, 0.05, 0.025, 0.0125};
  std::string detail;
  for (lmm::Family family :
       {lmm::Family::ab, lmm::Family::am, lmm::Family::bdf}) {
    for (int order = 1; order <= 3; ++order) {
      double sx = 0, sy = 0, sxx = 0, sxy = 0;
      for (double h : hs) {
        const double err = order_global_error(family, order, h);
        if (err <= 0.0) return {Verdict::fail, "integration failed"};
        sx += std::log(h);
        sy += std::log(err);
        sxx += std::log(h) * std::log(h);
        sxy += std::log(h) * std::log(err);
      }
      const double n = static_cast<double>(hs.size());
      const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
      const char* fam = family == lmm::Family::ab   ? "ab"
                        : family == lmm::Family::am ? "am"
                                                    : "bdf";
      if (std::abs(slope - order) > 0.25) {
        return {Verdict::fail,
                format("%s%d measured slope %.3f outside %d +- 0.25", fam,
                       order, slope, order)};
      }
      detail += format("%s%d:%.2f ", fam, order, slope);
    }
  }
  return {Verdict::pass, "slopes " + detail};
}

// --- C3: stiffness dichotomy -------------------------------------------------

Outcome criterion_stiffness() {
  const double lambda = -1e4, h = 0.05;
  class Stiff : public models::OdeModel {
   public:
    [[nodiscard]] std::size_t dim() const override { return 1; }
    [[nodiscard]] const std::vector<models::ParamSpec>& params()
        const override {
      static const std::vector<models::ParamSpec> none;
      return none;
    }
    [[nodiscard]] std::unique_ptr<models::ModelEval> bind(
        std::span<const double>) const override {
      class Eval : public models::ModelEval {
       public:
        bool rhs(double, std::span<const double> x,
                 std::span<double> out) const override {
          out[0] = -1e4 * x[0];
          return true;
        }
        bool jacobian(double, std::span<const double>,
                      linalg::DenseMatrix& out) const override {
          out = linalg::DenseMatrix(1, 1);
          out.at(0, 0) = -1e4;
          return true;
        }
      };
      return std::make_unique<Eval>();
    }
  };
  static const Stiff model;
  const auto eval = model.bind({});
  (void)lambda;

  struct Scheme {
    lmm::Family family;
    int order;
    const char* name;
  };
  // Implicit schemes: magnitudes decay monotonically down to 1e-140 (below
  // that floor BDF2's complex root pair only measures phase, not stability).
  for (const Scheme s : {Scheme{lmm::Family::bdf, 1, "bdf1"},
                         Scheme{lmm::Family::bdf, 2, "bdf2"},
                         Scheme{lmm::Family::am, 1, "am1"}}) {
    lmm::StepHistory hist(1);
    std::vector<double> x{1.0}, f(1);
    eval->rhs(0.0, x, f);
    hist.reset(x, f);
    lmm::NewtonWorkspace ws(1);
    double mag = 1.0;
    for (int k = 1; k <= 100 && mag > 1e-140; ++k) {
      const int p = std::min(k, s.order);
      std::vector<double> out(1);
      const lmm::StepOutcome o = lmm::implicit_step(
          *eval, hist, k * h, h, lmm::scheme_coefficients(s.family, p), {},
          out, ws);
      if (o.status != lmm::ParticleStatus::ok) {
        return {Verdict::fail, format("%s: newton failed at step %d", s.name,
                                      k)};
      }
      if (std::abs(out[0]) > mag * (1.0 + 1e-12)) {
        return {Verdict::fail,
                format("%s: |x| grew at step %d (%.3e -> %.3e)", s.name, k,
                       mag, std::abs(out[0]))};
      }
      mag = std::abs(out[0]);
      eval->rhs(k * h, out, f);
      hist.push(out, f);
    }
    if (mag > 1e-140) {
      return {Verdict::fail, format("%s: no decay (final %.3e)", s.name, mag)};
    }
  }

  // AB2 must exceed 1e6 within 100 steps.
  lmm::StepHistory hist(1);
  std::vector<double> x{1.0}, f(1);
  eval->rhs(0.0, x, f);
  hist.reset(x, f);
  double peak = 0.0;
  int blow_step = -1;
  for (int k = 1; k <= 100; ++k) {
    const int p = std::min(k, 2);
    std::vector<double> out(1);
    lmm::explicit_step(hist, h, lmm::scheme_coefficients(lmm::Family::ab, p),
                       out);
    eval->rhs(k * h, out, f);
    hist.push(out, f);
    peak = std::max(peak, std::abs(out[0]));
    if (peak > 1e6) {
      blow_step = k;
      break;
    }
  }
  if (blow_step < 0) {
    return {Verdict::fail, format("ab2 peaked at only %.3e", peak)};
  }
  return {Verdict::pass,
          format("bdf1/bdf2/am1 decay monotonically; ab2 passed 1e6 at step "
                 "%d",
                 blow_step)};
}

// --- C4: batched Newton bitwise ----------------------------------------------

Outcome criterion_batched_newton() {
  const models::MetabolicModel model;
  rng::RngStream rand(2024, 0, 0, rng::Purpose::init);
  std::size_t checked = 0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n =
        1 + static_cast<std::size_t>(rand.next_uniform() * 16.0) % 16;
    const double h = 0.01 + 0.09 * rand.next_uniform();
    const lmm::Family family =
        rep % 2 == 0 ? lmm::Family::bdf : lmm::Family::am;
    const lmm::LmmScheme scheme =
        lmm::scheme_coefficients(family, 1 + rep % 3);

    std::vector<std::unique_ptr<models::ModelEval>> evals;
    std::vector<const models::ModelEval*> eval_ptrs;
    std::vector<lmm::StepHistory> hists;
    for (std::size_t i = 0; i < n; ++i) {
      const std::vector<double> theta{0.5 + 3.0 * rand.next_uniform(),
                                      0.2 + rand.next_uniform(),
                                      0.5 + 2.0 * rand.next_uniform(),
                                      0.2 + rand.next_uniform()};
      auto eval = model.bind(theta);
      std::vector<double> xv{0.2 + 2.0 * rand.next_uniform(),
                             0.2 + 2.0 * rand.next_uniform(),
                             0.2 + 2.0 * rand.next_uniform()};
      std::vector<double> fv(3);
      eval->rhs(0.0, xv, fv);
      lmm::StepHistory hist(3);
      hist.reset(xv, fv);
      for (int step = 1; step <= 2; ++step) {
        std::vector<double> x1(3);
        for (int j = 0; j < 3; ++j) x1[j] = xv[j] + h * fv[j];
        eval->rhs(step * h, x1, fv);
        hist.push(x1, fv);
        xv = x1;
      }
      hists.push_back(std::move(hist));
      eval_ptrs.push_back(eval.get());
      evals.push_back(std::move(eval));
    }
    std::vector<double> batched(n * 3);
    std::vector<lmm::StepOutcome> outcomes(n);
    lmm::batched_implicit_step(model, eval_ptrs, hists, 3 * h, h, scheme, {},
                               batched.data(), outcomes.data());
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> solo(3);
      lmm::NewtonWorkspace ws(3);
      const lmm::StepOutcome o = lmm::implicit_step(
          *eval_ptrs[i], hists[i], 3 * h, h, scheme, {}, solo, ws);
      if (o.status != outcomes[i].status ||
          o.newton_iterations != outcomes[i].newton_iterations ||
          std::memcmp(solo.data(), batched.data() + i * 3,
                      3 * sizeof(double)) != 0) {
        return {Verdict::fail,
                format("instance %d particle %zu differs", rep, i)};
      }
      ++checked;
    }
  }
  return {Verdict::pass,
          format("50 randomized instances, %zu particles bitwise equal",
                 checked)};
}

// --- C5: operator structure and conservation ----------------------------------

Outcome criterion_operator_structure() {
  std::string detail;
  for (std::size_t m : {4ul, 19ul}) {
    const models::AdvDiffModel model(m + 1);
    const std::vector<double> theta{9.0, 4.0, 6.0, 2.5, -1.5};
    const linalg::CsrMatrix l = model.assemble_operator(theta);
    const std::size_t d = m * m;
    const std::vector<double> ones(d, 1.0);
    double worst = 0.0;
    for (double v : linalg::spmv(l, ones)) worst = std::max(worst, std::abs(v));
    std::vector<double> col_sums(d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = l.row_offsets[i]; k < l.row_offsets[i + 1]; ++k) {
        col_sums[l.col_indices[k]] += l.values[k];
      }
    }
    for (double v : col_sums) worst = std::max(worst, std::abs(v));
    if (worst > 1e-10) {
      return {Verdict::fail,
              format("grid %zu: operator null-space violation %.3e", m,
                     worst)};
    }

    const std::vector<double> u0 = models::gaussian_plume_ic(m + 1);
    double sum0 = 0.0;
    for (double v : u0) sum0 += v;
    const lmm::PropagationResult res = lmm::propagate_interval(
        model, theta, u0, 0.0, 30.0, 0.1,
        lmm::scheme_coefficients(lmm::Family::bdf, 2));
    if (res.status != lmm::ParticleStatus::ok) {
      return {Verdict::fail, format("grid %zu: propagation failed", m)};
    }
    double sum1 = 0.0;
    for (double v : res.state) sum1 += v;
    const double drift = std::abs(sum1 - sum0) / std::abs(sum0);
    if (drift > 1e-8) {
      return {Verdict::fail,
              format("grid %zu: sum drifted by %.3e relative", m, drift)};
    }
    detail += format("grid %zu: nullspace %.1e, mass drift %.1e; ", m, worst,
                     drift);
  }
  return {Verdict::pass, detail};
}

// --- C6: diffusion parametrization --------------------------------------------

Outcome criterion_diffusion() {
  const models::DiffusionCoeffs d = models::cholesky_to_diffusion(9, 4, 6);
  if (d.d11 == 81.0 && d.d12 == 54.0 && d.d22 == 52.0) {
    return {Verdict::pass, "(9,4,6) -> (81, 54, 52) exactly"};
  }
  return {Verdict::fail, format("got (%g, %g, %g)", d.d11, d.d12, d.d22)};
}

// --- C7: parameter recovery ----------------------------------------------------

Outcome criterion_recovery() {
  std::string detail;
  {
    bench::ExperimentConfig gen;
    gen.problem = "metabolic";
    gen.seed = 1;
    const std::string csv = (g_workdir / "c7_met.csv").string();
    bench::generate_data(gen, csv);

    bench::ExperimentConfig cfg = gen;
    cfg.particles = 1000;
    cfg.integrator = "bdf2";
    cfg.step = 0.05;
    cfg.seed = 42;
    cfg.backend = "par";
    cfg.workers = 2;
    const bench::BenchReport report =
        bench::run_experiment(cfg, csv, (g_workdir / "c7_met_out").string());
    double worst = 0.0;
    for (std::size_t k = 0; k < report.truth.size(); ++k) {
      worst = std::max(worst,
                       std::abs(report.final_estimate[k] - report.truth[k]) /
                           std::abs(report.truth[k]));
    }
    if (worst > 0.25) {
      std::string est;
      for (double v : report.final_estimate) est += format("%.3f ", v);
      return {Verdict::fail,
              format("metabolic recovery off by %.1f%% (est: %s)",
                     100.0 * worst, est.c_str())};
    }
    detail += format("metabolic worst error %.1f%%; ", 100.0 * worst);
  }
  {
    bench::ExperimentConfig gen;
    gen.problem = "advdiff";
    gen.n = 10;
    gen.seed = 1;
    const std::string csv = (g_workdir / "c7_adv.csv").string();
    bench::generate_data(gen, csv);

    bench::ExperimentConfig cfg = gen;
    cfg.particles = 500;
    cfg.integrator = "adaptive-bdf2";
    cfg.rtol = 1e-3;
    cfg.seed = 42;
    cfg.backend = "par";
    cfg.workers = 2;
    const bench::BenchReport report =
        bench::run_experiment(cfg, csv, (g_workdir / "c7_adv_out").string());
    double worst = 0.0;
    for (std::size_t k = 0; k < report.truth.size(); ++k) {
      worst = std::max(worst,
                       std::abs(report.final_estimate[k] - report.truth[k]) /
                           std::abs(report.truth[k]));
    }
    if (worst > 0.30) {
      std::string est;
      for (double v : report.final_estimate) est += format("%.3f ", v);
      return {Verdict::fail,
              format("advdiff recovery off by %.1f%% (est: %s)",
                     100.0 * worst, est.c_str())};
    }
    detail += format("advdiff worst error %.1f%%", 100.0 * worst);
  }
  return {Verdict::pass, detail};
}

// --- C8: speedup trend ----------------------------------------------------------

Outcome criterion_speedup() {
  const unsigned cores = std::thread::hardware_concurrency();

  bench::ExperimentConfig gen;
  gen.problem = "metabolic";
  gen.seed = 1;
  const std::string csv = (g_workdir / "c8_data.csv").string();
  bench::generate_data(gen, csv);

  bench::ExperimentConfig cfg = gen;
  cfg.particles = 5000;
  cfg.integrator = "am1";
  cfg.step = 0.05;
  cfg.seed = 42;
  cfg.warmup = true;
  const std::size_t workers = cores >= 4 ? 4 : (cores >= 2 ? cores : 1);

  cfg.backend = "seq";
  const bench::BenchReport seq =
      bench::run_experiment(cfg, csv, (g_workdir / "c8_out").string());
  cfg.backend = "par";
  cfg.workers = workers;
  const bench::BenchReport par =
      bench::run_experiment(cfg, csv, (g_workdir / "c8_out").string());
  cfg.backend = "batch";
  const bench::BenchReport bat =
      bench::run_experiment(cfg, csv, (g_workdir / "c8_out").string());

  const double s_par = seq.wall_time_s / par.wall_time_s;
  const double s_bat = seq.wall_time_s / bat.wall_time_s;
  const std::string measured =
      format("T_seq %.2fs, par%zu S=%.2f, batch S=%.2f", seq.wall_time_s,
             workers, s_par, s_bat);
  if (cores < 4) {
    return {Verdict::skip,
            format("needs >= 4 cores, machine has %u; measured %s", cores,
                   measured.c_str())};
  }
  if (s_par < 2.0) {
    return {Verdict::fail, "parallel(4) speedup below 2.0: " + measured};
  }
  if (s_bat < 2.0) {
    return {Verdict::fail, "batched speedup below 2.0: " + measured};
  }
  return {Verdict::pass, measured};
}

// --- C9: adaptive innovation rule -----------------------------------------------

Outcome criterion_adaptive_rule() {
  const models::MetabolicModel model;
  const std::vector<double> theta{2.0, 0.5, 1.0, 0.8};
  const std::vector<double> x0{1.0, 1.0, 1.0};
  for (double rtol : {1e-2, 1e-3, 1e-5}) {
    const lmm::PropagationResult res =
        lmm::adaptive_bdf_interval(model, theta, x0, 0.0, 1.0, rtol);
    if (res.status != lmm::ParticleStatus::ok) {
      return {Verdict::fail, "adaptive integration failed"};
    }
    const double expect = rtol * static_cast<double>(res.steps_taken);
    for (double g : res.gamma_diag) {
      if (g != expect) {
        return {Verdict::fail,
                format("gamma %.17g != rtol*steps %.17g", g, expect)};
      }
    }
  }
  return {Verdict::pass, "gamma == rtol * steps_taken exactly at three rtols"};
}

// --- C10: statistical unit properties --------------------------------------------

Outcome criterion_statistics() {
  // resampling chi-square on 10 aggregate bins, significance 1e-3 (df 9)
  const std::size_t n = 100000;
  std::vector<double> uniform(n, 1.0 / static_cast<double>(n));
  const std::vector<std::size_t> draws =
      filter::resample_multinomial(uniform, 42, 1);
  std::vector<double> counts(10, 0.0);
  for (std::size_t idx : draws) counts[idx / (n / 10)] += 1.0;
  double chi2 = 0.0;
  for (double c : counts) {
    const double expect = static_cast<double>(n) / 10.0;
    chi2 += (c - expect) * (c - expect) / expect;
  }
  if (chi2 >= 27.877) {
    return {Verdict::fail, format("resampling chi-square %.2f >= 27.877",
                                  chi2)};
  }

  // proliferation jump covariance = (1 - a^2) C within 5% Frobenius
  const double a = 0.98;
  linalg::DenseMatrix cov(2, 2);
  cov.at(0, 0) = 0.04;
  cov.at(0, 1) = cov.at(1, 0) = 0.01;
  cov.at(1, 1) = 0.09;
  std::vector<double> zeros(n * 2, 0.0);
  const std::vector<double> jumps =
      filter::proliferate(zeros, n, 2, cov, a, 17, 2);
  double mean[2] = {0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    mean[0] += jumps[i * 2];
    mean[1] += jumps[i * 2 + 1];
  }
  mean[0] /= n;
  mean[1] /= n;
  double sample[3] = {0, 0, 0};  // xx, xy, yy
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = jumps[i * 2] - mean[0];
    const double dy = jumps[i * 2 + 1] - mean[1];
    sample[0] += dx * dx;
    sample[1] += dx * dy;
    sample[2] += dy * dy;
  }
  const double s2 = 1.0 - a * a;
  double num = 0.0, den = 0.0;
  const double want[3] = {s2 * 0.04, s2 * 0.01, s2 * 0.09};
  for (int k = 0; k < 3; ++k) {
    sample[k] /= n;
    const double weight = k == 1 ? 2.0 : 1.0;  // off-diagonal appears twice
    num += weight * (sample[k] - want[k]) * (sample[k] - want[k]);
    den += weight * want[k] * want[k];
  }
  const double frob_rel = std::sqrt(num / den);
  if (frob_rel > 0.05) {
    return {Verdict::fail,
            format("proliferation covariance off by %.1f%% Frobenius",
                   100.0 * frob_rel)};
  }

  // weight normalization after every step of a short run
  class Decay : public models::OdeModel {
   public:
    [[nodiscard]] std::size_t dim() const override { return 1; }
    [[nodiscard]] const std::vector<models::ParamSpec>& params()
        const override {
      static const std::vector<models::ParamSpec> specs = {{"theta", true}};
      return specs;
    }
    [[nodiscard]] std::unique_ptr<models::ModelEval> bind(
        std::span<const double> theta) const override {
      class Eval : public models::ModelEval {
       public:
        explicit Eval(double th) : th_(th) {}
        bool rhs(double, std::span<const double> x,
                 std::span<double> out) const override {
          out[0] = -th_ * x[0];
          return true;
        }
        bool jacobian(double, std::span<const double>,
                      linalg::DenseMatrix& out) const override {
          out = linalg::DenseMatrix(1, 1);
          out.at(0, 0) = -th_;
          return true;
        }

       private:
        double th_;
      };
      return std::make_unique<Eval>(theta[0]);
    }
  };
  static const Decay model;
  filter::PfConfig pf;
  pf.particles = 100;
  pf.shrink_a = 0.95;
  pf.h = 0.5;
  pf.integrator = {false, lmm::Family::bdf, 1, 1e-3};
  pf.seed = 7;
  pf.theta_prior = {{std::log(0.8), 0.4}};
  pf.x0_prior = {{2.0, 0.1, false}};
  filter::ObservationModel obs{{0}, 0.4};
  exec::Backend backend = exec::Backend::sequential();
  filter::Ensemble ens = filter::initialize(pf, model);
  double t_prev = 0.0;
  for (std::size_t j = 1; j <= 8; ++j) {
    const double t_obs = 0.5 * static_cast<double>(j);
    const std::vector<double> y{2.0 * std::exp(-0.7 * t_obs)};
    filter::pf_step(ens, y, j, t_prev, t_obs, pf, backend, model, obs);
    double lse = -1e308;
    for (double lw : ens.logw) lse = std::max(lse, lw);
    double acc = 0.0;
    for (double lw : ens.logw) acc += std::exp(lw - lse);
    const double norm = lse + std::log(acc);
    if (std::abs(norm) > 1e-10) {
      return {Verdict::fail,
              format("weights unnormalized after step %zu: logsumexp %.2e", j,
                     norm)};
    }
    t_prev = t_obs;
  }

  return {Verdict::pass,
          format("chi2 %.2f < 27.877; proliferation cov %.2f%%; weights "
                 "normalized over 8 steps",
                 chi2, 100.0 * frob_rel)};
}

}  // namespace

int main(int argc, char** argv) {
  g_workdir = argc > 1 ? fs::path(argv[1])
                       : fs::temp_directory_path() / "pfsmc_acceptance";
  fs::remove_all(g_workdir);
  fs::create_directories(g_workdir);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "backend equivalence", criterion_backend_equivalence},
      {2, "integrator convergence orders", criterion_orders},
      {3, "stiffness behavior", criterion_stiffness},
      {4, "batched newton bitwise equality", criterion_batched_newton},
      {5, "operator structure and mass conservation",
       criterion_operator_structure},
      {6, "diffusion parametrization", criterion_diffusion},
      {7, "parameter recovery", criterion_recovery},
      {8, "speedup trend", criterion_speedup},
      {9, "adaptive innovation rule", criterion_adaptive_rule},
      {10, "statistical unit properties", criterion_statistics},
  };

  int failures = 0;
  for (const auto& criterion : criteria) {
    Outcome outcome{Verdict::fail, "unknown"};
    const auto start = std::chrono::steady_clock::now();
    try {
      outcome = criterion.run();
    } catch (const std::exception& e) {
      outcome = {Verdict::fail, std::string("exception: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                      start)
            .count();
    const char* tag = outcome.verdict == Verdict::pass   ? "PASS"
                      : outcome.verdict == Verdict::skip ? "SKIP"
                                                         : "FAIL";
    std::printf("C%02d %s %s (%.1fs) - %s\n", criterion.id, tag,
                criterion.name, secs, outcome.detail.c_str());
    std::fflush(stdout);
    if (outcome.verdict == Verdict::fail) ++failures;
  }
  if (failures > 0) {
    std::printf("acceptance: %d criterion(s) FAILED\n", failures);
    return 1;
  }
  std::printf("acceptance: all criteria satisfied\n");
  return 0;
}
