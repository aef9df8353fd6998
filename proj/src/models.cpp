#include "pfsmc/models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pfsmc/errors.hpp"

namespace pfsmc::models {

bool ModelEval::jacobian(double, std::span<const double>,
                         linalg::DenseMatrix&) const {
  throw std::logic_error("ModelEval: dense jacobian not provided");
}

void to_natural(const OdeModel& model, std::span<const double> unconstrained,
                std::span<double> natural) {
  const auto& specs = model.params();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    natural[i] = specs[i].positive ? std::exp(unconstrained[i])
                                   : unconstrained[i];
  }
}

void to_unconstrained(const OdeModel& model, std::span<const double> natural,
                      std::span<double> unconstrained) {
  const auto& specs = model.params();
  for (std::size_t i = 0; i < specs.size(); ++i) {
    unconstrained[i] =
        specs[i].positive ? std::log(natural[i]) : natural[i];
  }
}

double input_phi(double t, double A0, double A, double t0_input, double tau) {
  const double dt = t - t0_input;
  if (dt <= 0.0) return A0;
  return A0 + A * dt * std::exp(-dt / tau);
}

bool metabolic_rhs(double t, std::span<const double> x,
                   std::span<const double> theta,
                   const MetabolicConstants& consts, std::span<double> out) {
  const double v1 = theta[0], k1 = theta[1], v2 = theta[2], k2 = theta[3];
  const double den1 = x[0] + k1;
  const double den2 = x[1] + k2;
  if (den1 <= 0.0 || den2 <= 0.0) return false;
  const double flux1 = v1 * x[0] / den1;
  const double flux2 = v2 * x[1] / den2;
  out[0] = input_phi(t, consts.A0, consts.A, consts.t0_input, consts.tau) -
           flux1;
  out[1] = flux1 - flux2;
  out[2] = flux2 - consts.lambda * (x[2] - consts.c0);
  return std::isfinite(out[0]) && std::isfinite(out[1]) &&
         std::isfinite(out[2]);
}

bool metabolic_jacobian(std::span<const double> x,
                        std::span<const double> theta,
                        const MetabolicConstants& consts,
                        linalg::DenseMatrix& out) {
  const double v1 = theta[0], k1 = theta[1], v2 = theta[2], k2 = theta[3];
  const double den1 = x[0] + k1;
  const double den2 = x[1] + k2;
  if (den1 <= 0.0 || den2 <= 0.0) return false;
  const double d1 = v1 * k1 / (den1 * den1);
  const double d2 = v2 * k2 / (den2 * den2);
  out = linalg::DenseMatrix(3, 3);
  out.at(0, 0) = -d1;
  out.at(1, 0) = d1;
  out.at(1, 1) = -d2;
  out.at(2, 1) = d2;
  out.at(2, 2) = -consts.lambda;
  return std::isfinite(d1) && std::isfinite(d2);
}

namespace {

class MetabolicEval : public ModelEval {
 public:
  MetabolicEval(std::span<const double> theta, const MetabolicConstants& c)
      : consts_(c) {
    std::copy(theta.begin(), theta.end(), theta_.begin());
  }

  bool rhs(double t, std::span<const double> x,
           std::span<double> out) const override {
    return metabolic_rhs(t, x, theta_, consts_, out);
  }

  bool jacobian(double, std::span<const double> x,
                linalg::DenseMatrix& out) const override {
    return metabolic_jacobian(x, theta_, consts_, out);
  }

 private:
  std::array<double, 4> theta_{};
  MetabolicConstants consts_;
};

}  // namespace

MetabolicModel::MetabolicModel(MetabolicConstants consts) : consts_(consts) {
  if (consts_.tau <= 0.0) {
    throw ConfigError("metabolic model: tau must be positive");
  }
}

const std::vector<ParamSpec>& MetabolicModel::params() const {
  static const std::vector<ParamSpec> specs = {
      {"V1", true}, {"k1", true}, {"V2", true}, {"k2", true}};
  return specs;
}

std::unique_ptr<ModelEval> MetabolicModel::bind(
    std::span<const double> theta_natural) const {
  return std::make_unique<MetabolicEval>(theta_natural, consts_);
}

DiffusionCoeffs cholesky_to_diffusion(double k1, double k2, double k3) {
  if (k1 <= 0.0 || k2 <= 0.0) {
    throw ConfigError(
        "cholesky_to_diffusion: k1 and k2 must be positive for a definite "
        "diffusion matrix");
  }
  return {k1 * k1, k1 * k3, k2 * k2 + k3 * k3};
}

std::vector<double> gaussian_plume_ic(std::size_t n) {
  if (n < 3) {
    throw std::invalid_argument("gaussian_plume_ic: n must be >= 3");
  }
  static constexpr double kGamma[6] = {0.04, 0.08, 0.07, 0.10, 0.05, 0.06};
  static constexpr double kXc[6] = {0.20, 0.30, 0.40, 0.50, 0.50, 0.70};
  static constexpr double kYc[6] = {0.80, 0.40, 0.40, 0.50, 0.60, 0.50};
  constexpr double kSqrt2Pi = 2.5066282746310002;

  const std::size_t m = n - 1;
  std::vector<double> u(m * m);
  for (std::size_t iy = 0; iy < m; ++iy) {
    const double y = static_cast<double>(iy) / static_cast<double>(m);
    for (std::size_t ix = 0; ix < m; ++ix) {
      const double x = static_cast<double>(ix) / static_cast<double>(m);
      double sum = 0.0;
      for (int i = 0; i < 6; ++i) {
        const double dx = x - kXc[i];
        const double dy = y - kYc[i];
        sum += std::exp(-(dx * dx + dy * dy) / (2.0 * kGamma[i] * kGamma[i])) /
               (kGamma[i] * kSqrt2Pi);
      }
      u[iy * m + ix] = sum;  // x varies fastest
    }
  }
  return u;
}

namespace {

class AdvDiffEval : public ModelEval {
 public:
  explicit AdvDiffEval(linalg::CsrMatrix op) : op_(std::move(op)) {}

  bool rhs(double, std::span<const double> x,
           std::span<double> out) const override {
    linalg::spmv(op_, x, out);
    for (double v : out) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  [[nodiscard]] bool linear() const override { return true; }

  [[nodiscard]] const linalg::CsrMatrix* sparse_jacobian() const override {
    return &op_;
  }

 private:
  linalg::CsrMatrix op_;
};

}  // namespace

AdvDiffModel::AdvDiffModel(std::size_t n) : m_(n - 1) {
  if (n < 3) {
    throw ConfigError("advdiff model: grid parameter n must be >= 3");
  }
  const linalg::CsrMatrix ell = linalg::periodic_diff_matrix(m_);
  const linalg::CsrMatrix eye = linalg::CsrMatrix::identity(m_);
  b1_ = linalg::kron(eye, ell);
  b2_ = linalg::kron(ell, eye);

  // Gram products via column gathering: G = A^T B with A, B in CSR.
  auto transpose_mul = [](const linalg::CsrMatrix& a,
                          const linalg::CsrMatrix& b) {
    // (A^T B)_{ij} = sum_k A_{ki} B_{kj}; accumulate row-by-row of A.
    const std::size_t nc = a.ncols;
    std::vector<std::vector<std::pair<std::size_t, double>>> rows(nc);
    for (std::size_t k = 0; k < a.nrows; ++k) {
      for (std::size_t ia = a.row_offsets[k]; ia < a.row_offsets[k + 1];
           ++ia) {
        const std::size_t i = a.col_indices[ia];
        const double va = a.values[ia];
        for (std::size_t ib = b.row_offsets[k]; ib < b.row_offsets[k + 1];
             ++ib) {
          rows[i].emplace_back(b.col_indices[ib], va * b.values[ib]);
        }
      }
    }
    linalg::CsrMatrix g;
    g.nrows = nc;
    g.ncols = b.ncols;
    g.row_offsets.resize(nc + 1, 0);
    for (std::size_t i = 0; i < nc; ++i) {
      auto& row = rows[i];
      std::sort(row.begin(), row.end(),
                [](const auto& l, const auto& r) { return l.first < r.first; });
      std::size_t j = 0;
      while (j < row.size()) {
        double v = row[j].second;
        std::size_t jj = j + 1;
        while (jj < row.size() && row[jj].first == row[j].first) {
          v += row[jj].second;
          ++jj;
        }
        g.col_indices.push_back(row[j].first);
        g.values.push_back(v);
        j = jj;
      }
      g.row_offsets[i + 1] = g.values.size();
    }
    return g;
  };

  g11_ = transpose_mul(b1_, b1_);
  g22_ = transpose_mul(b2_, b2_);
  g12_ = linalg::csr_add(1.0, transpose_mul(b1_, b2_), 1.0,
                         transpose_mul(b2_, b1_));
}

const std::vector<ParamSpec>& AdvDiffModel::params() const {
  static const std::vector<ParamSpec> specs = {{"k1", true},
                                               {"k2", true},
                                               {"k3", false},
                                               {"c1", false},
                                               {"c2", false}};
  return specs;
}

linalg::CsrMatrix AdvDiffModel::assemble_operator(
    std::span<const double> theta) const {
  const double k1 = theta[0], k2 = theta[1], k3 = theta[2];
  const double c1 = theta[3], c2 = theta[4];
  // L = -(k1^2 G11 + k1 k3 G12 + (k2^2 + k3^2) G22) + c1 B1 + c2 B2
  linalg::CsrMatrix diff =
      linalg::csr_add(-(k1 * k1), g11_, -(k1 * k3), g12_);
  diff = linalg::csr_add(1.0, diff, -(k2 * k2 + k3 * k3), g22_);
  linalg::CsrMatrix adv = linalg::csr_add(c1, b1_, c2, b2_);
  return linalg::csr_add(1.0, diff, 1.0, adv);
}

std::unique_ptr<ModelEval> AdvDiffModel::bind(
    std::span<const double> theta_natural) const {
  return std::make_unique<AdvDiffEval>(assemble_operator(theta_natural));
}

double jacobian_fd_mismatch(const OdeModel& model,
                            std::span<const double> theta_natural, double t,
                            std::span<const double> x) {
  const std::size_t d = model.dim();
  auto eval = model.bind(theta_natural);
  linalg::DenseMatrix jac;
  if (model.sparse()) {
    const linalg::CsrMatrix* sj = eval->sparse_jacobian();
    jac = linalg::DenseMatrix(d, d);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = sj->row_offsets[i]; k < sj->row_offsets[i + 1];
           ++k) {
        jac.at(i, sj->col_indices[k]) = sj->values[k];
      }
    }
  } else if (!eval->jacobian(t, x, jac)) {
    return std::numeric_limits<double>::infinity();
  }

  std::vector<double> xp(x.begin(), x.end()), xm(x.begin(), x.end());
  std::vector<double> fp(d), fm(d);
  double worst = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      scale = std::max(scale, std::abs(jac.at(i, j)));
    }
  }
  if (scale == 0.0) scale = 1.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double step = 1e-6 * (1.0 + std::abs(x[j]));
    xp[j] = x[j] + step;
    xm[j] = x[j] - step;
    eval->rhs(t, xp, fp);
    eval->rhs(t, xm, fm);
    for (std::size_t i = 0; i < d; ++i) {
      const double fd = (fp[i] - fm[i]) / (2.0 * step);
      worst = std::max(worst, std::abs(fd - jac.at(i, j)) / scale);
    }
    xp[j] = x[j];
    xm[j] = x[j];
  }
  return worst;
}

}  // namespace pfsmc::models
