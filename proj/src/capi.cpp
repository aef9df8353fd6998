#include "pfsmc.h"

#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

#include "pfsmc/bench.hpp"
#include "pfsmc/errors.hpp"

namespace {

thread_local std::string g_last_error;

template <typename Fn>
pfsmc_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return PFSMC_OK;
  } catch (const pfsmc::ConfigError& e) {
    g_last_error = e.what();
    return PFSMC_ERR_CONFIG;
  } catch (const pfsmc::NumericalError& e) {
    g_last_error = e.what();
    return PFSMC_ERR_NUMERICAL;
  } catch (const pfsmc::IoError& e) {
    g_last_error = e.what();
    return PFSMC_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PFSMC_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return PFSMC_ERR_INTERNAL;
  }
}

std::vector<std::string> split_csv_list(const char* s) {
  std::vector<std::string> out;
  if (s == nullptr) return out;
  std::string cur;
  for (const char* p = s;; ++p) {
    if (*p == ',' || *p == '\0') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
      if (*p == '\0') break;
    } else {
      cur.push_back(*p);
    }
  }
  return out;
}

}  // namespace

struct pfsmc_config {
  pfsmc::bench::ExperimentConfig cfg;
};

extern "C" {

const char* pfsmc_version(void) { return "0.1.0"; }

const char* pfsmc_last_error(void) { return g_last_error.c_str(); }

pfsmc_config* pfsmc_config_new(void) { return new (std::nothrow) pfsmc_config; }

void pfsmc_config_free(pfsmc_config* cfg) { delete cfg; }

pfsmc_status pfsmc_config_set(pfsmc_config* cfg, const char* key,
                              const char* value) {
  if (cfg == nullptr || key == nullptr || value == nullptr) {
    g_last_error = "null argument";
    return PFSMC_ERR_CONFIG;
  }
  return guarded([&] { cfg->cfg.set(key, value); });
}

pfsmc_status pfsmc_generate_data(const pfsmc_config* cfg,
                                 const char* csv_path) {
  if (cfg == nullptr || csv_path == nullptr) {
    g_last_error = "null argument";
    return PFSMC_ERR_CONFIG;
  }
  return guarded([&] { pfsmc::bench::generate_data(cfg->cfg, csv_path); });
}

pfsmc_status pfsmc_run_experiment(const pfsmc_config* cfg,
                                  const char* data_csv, const char* out_dir,
                                  char** report_path_out) {
  if (cfg == nullptr || data_csv == nullptr || out_dir == nullptr) {
    g_last_error = "null argument";
    return PFSMC_ERR_CONFIG;
  }
  return guarded([&] {
    const pfsmc::bench::BenchReport report =
        pfsmc::bench::run_experiment(cfg->cfg, data_csv, out_dir);
    if (report_path_out != nullptr) {
      char* s = static_cast<char*>(std::malloc(report.report_path.size() + 1));
      if (s != nullptr) {
        std::memcpy(s, report.report_path.c_str(),
                    report.report_path.size() + 1);
      }
      *report_path_out = s;
    }
  });
}

pfsmc_status pfsmc_bench(const pfsmc_config* cfg, const char* data_csv,
                         const char* out_dir, const char* integrators_csv,
                         const char* backends_csv) {
  if (cfg == nullptr || data_csv == nullptr || out_dir == nullptr) {
    g_last_error = "null argument";
    return PFSMC_ERR_CONFIG;
  }
  return guarded([&] {
    std::vector<std::string> integrators = split_csv_list(integrators_csv);
    if (integrators.empty()) integrators = {cfg->cfg.integrator};
    std::vector<std::string> backends = split_csv_list(backends_csv);
    if (backends.empty()) backends = {"seq", "par", "batch"};
    const auto reports = pfsmc::bench::bench_sweep(cfg->cfg, data_csv,
                                                   out_dir, integrators,
                                                   backends);
    pfsmc::bench::emit_report(reports, out_dir);
  });
}

pfsmc_status pfsmc_emit_report(const char* const* report_paths,
                               size_t n_reports, const char* out_dir) {
  if (report_paths == nullptr || out_dir == nullptr || n_reports == 0) {
    g_last_error = "null argument";
    return PFSMC_ERR_CONFIG;
  }
  return guarded([&] {
    std::vector<pfsmc::bench::BenchReport> reports;
    reports.reserve(n_reports);
    for (size_t i = 0; i < n_reports; ++i) {
      reports.push_back(pfsmc::bench::load_report(report_paths[i]));
    }
    pfsmc::bench::emit_report(reports, out_dir);
  });
}

void pfsmc_string_free(char* s) { std::free(s); }

}  // extern "C"
