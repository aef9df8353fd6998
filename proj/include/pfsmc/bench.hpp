#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pfsmc/filter.hpp"
#include "pfsmc/models.hpp"

namespace pfsmc::bench {

/// Flat experiment description. Dotted keys (truth.*, prior.*, x0.*,
/// const.*) land in `overrides` and are resolved against the selected
/// problem when it is built.
struct ExperimentConfig {
  std::string problem = "metabolic";  // metabolic | advdiff
  std::size_t n = 20;                 // advdiff grid parameter
  std::string integrator = "bdf2";    // ab1..3 am1..3 bdf1..3 adaptive-bdf2
  std::string backend = "seq";        // seq | par | batch
  std::size_t workers = 0;            // 0 -> PFSMC_WORKERS or hardware
  std::size_t particles = 5000;
  double step = 0.05;
  double shrink_a = 0.98;
  std::uint64_t seed = 0;
  double rtol = 1e-3;
  bool warmup = false;
  double sigma = -1.0;  // <= 0 -> per-problem noise rule
  double t_end = 10.0;  // problem-1 observation window
  std::size_t n_obs = 50;
  std::map<std::string, double> overrides;

  /// Generic string key/value setter (the C API surface). Unknown keys or
  /// unparsable values throw ConfigError.
  void set(const std::string& key, const std::string& value);

  [[nodiscard]] std::string canonical_json() const;
  [[nodiscard]] std::string hash() const;  // FNV-1a over canonical_json
};

/// Everything derived from a config that the driver needs.
struct ProblemSetup {
  std::shared_ptr<const models::OdeModel> model;
  filter::PfConfig pf;
  std::vector<double> truth;     // natural space
  std::vector<double> x0_truth;
  std::vector<double> obs_times;
  double t0 = 0.0;
  std::vector<std::string> param_names;
  std::vector<bool> param_positive;
  bool fixed_obs_indices = false;          // problem 1 observes everything
  std::vector<std::size_t> obs_indices;    // when fixed
};

ProblemSetup build_problem(const ExperimentConfig& cfg);

/// Synthetic observations: reference trajectory at rtol 1e-8, per-problem
/// noise rule, CSV (header t,y1..ym) plus a JSON sidecar with the truth,
/// sigma, observation indices and generator seed.
void generate_data(const ExperimentConfig& cfg, const std::string& csv_path);

[[nodiscard]] std::string sidecar_path(const std::string& csv_path);

struct LoadedData {
  filter::ObservationData data;
  std::vector<std::size_t> obs_indices;
  double sigma = 0.0;
  std::string problem;
  std::size_t n = 0;
  std::uint64_t gen_seed = 0;
  std::vector<double> truth;
};

LoadedData load_data(const std::string& csv_path);

struct BenchReport {
  ExperimentConfig config;
  std::string config_hash;
  std::string backend_name;
  double wall_time_s = 0.0;
  filter::PhaseTimings phases;
  std::vector<double> worker_busy_s;
  double speedup = 0.0;     // 0 when not computed
  double efficiency = 0.0;  // 0 when not computed/defined
  std::vector<std::string> param_names;
  std::vector<bool> param_positive;
  std::vector<double> truth;
  std::vector<double> final_estimate;  // natural space
  std::vector<double> final_std_u;     // unconstrained-space std
  std::string trace_csv;
  std::string report_path;
  std::vector<std::string> warnings;
};

/// Loads data, runs the sampler under the configured backend, times the
/// assimilation loop with a monotonic clock (data I/O excluded), writes the
/// trace CSV and report JSON into out_dir.
BenchReport run_experiment(const ExperimentConfig& cfg,
                           const std::string& data_csv,
                           const std::string& out_dir);

/// S = T_baseline / T_candidate, E = S / P for worker-pool candidates
/// (efficiency is reported as 0 for the batched backend). Configs must match
/// except for backend/workers.
std::pair<double, double> compute_speedup(const BenchReport& baseline,
                                          const BenchReport& candidate);

BenchReport load_report(const std::string& path);

/// Cross-product sweep over integrators x backends; the sequential baseline
/// of each integrator always runs first and anchors the speedup column.
std::vector<BenchReport> bench_sweep(const ExperimentConfig& base,
                                     const std::string& data_csv,
                                     const std::string& out_dir,
                                     const std::vector<std::string>& integrators,
                                     const std::vector<std::string>& backends);

/// Speedup/efficiency table (CSV and aligned text), per-parameter
/// time-series SVG plots with +-2 posterior std bands and the truth
/// overlaid, and a combined JSON summary.
void emit_report(const std::vector<BenchReport>& reports,
                 const std::string& out_dir);

}  // namespace pfsmc::bench
