/* C interface to the pfsmc library: opaque handles plus integer status
 * codes. Status codes double as process exit codes for the CLI. */
#ifndef PFSMC_H
#define PFSMC_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum pfsmc_status {
  PFSMC_OK = 0,
  PFSMC_ERR_INTERNAL = 1,
  PFSMC_ERR_CONFIG = 2,
  PFSMC_ERR_NUMERICAL = 3,
  PFSMC_ERR_IO = 4
} pfsmc_status;

typedef struct pfsmc_config pfsmc_config;

const char* pfsmc_version(void);

/* Thread-local message describing the most recent failure. */
const char* pfsmc_last_error(void);

pfsmc_config* pfsmc_config_new(void);
void pfsmc_config_free(pfsmc_config* cfg);

/* Generic key/value setter. Keys: problem, n, integrator, backend, workers,
 * particles, step, shrink-a, seed, rtol, warmup, sigma, t-end, n-obs, and
 * dotted overrides (truth.<name>, prior.<name>.mu, prior.<name>.sigma,
 * x0.<i>.mean, x0.<i>.std, x0.<i>.truth, const.<name>). */
pfsmc_status pfsmc_config_set(pfsmc_config* cfg, const char* key,
                              const char* value);

/* Synthetic observations: CSV at csv_path plus a .json sidecar. */
pfsmc_status pfsmc_generate_data(const pfsmc_config* cfg,
                                 const char* csv_path);

/* Runs one experiment; trace CSV and report JSON land in out_dir. When
 * report_path_out is non-NULL it receives a malloc'd path to the report
 * (free with pfsmc_string_free). */
pfsmc_status pfsmc_run_experiment(const pfsmc_config* cfg,
                                  const char* data_csv, const char* out_dir,
                                  char** report_path_out);

/* Cross-product sweep over comma-separated integrator and backend lists;
 * sequential baselines run first. Emits per-run reports plus the combined
 * table/plots/summary. */
pfsmc_status pfsmc_bench(const pfsmc_config* cfg, const char* data_csv,
                         const char* out_dir, const char* integrators_csv,
                         const char* backends_csv);

/* Table, plots and summary from previously written report JSON files. */
pfsmc_status pfsmc_emit_report(const char* const* report_paths,
                               size_t n_reports, const char* out_dir);

void pfsmc_string_free(char* s);

#ifdef __cplusplus
}
#endif

#endif /* PFSMC_H */
