#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pfsmc/linalg.hpp"

namespace pfsmc::models {

struct ParamSpec {
  std::string name;
  bool positive = false;  // positive parameters are sampled in log space
};

/// Immutable per-parameter evaluation context. bind() lets a model do
/// per-theta precomputation once (the advection-diffusion operator matrix)
/// and keeps the stepping loops free of it.
class ModelEval {
 public:
  virtual ~ModelEval() = default;

  /// dx/dt; returns false when the right-hand side is undefined or
  /// non-finite at (t, x) — the caller marks the particle invalid.
  virtual bool rhs(double t, std::span<const double> x,
                   std::span<double> out) const = 0;

  /// rhs is L*x with a state-independent L.
  [[nodiscard]] virtual bool linear() const { return false; }

  /// Dense state Jacobian; false on the same invalid inputs as rhs().
  virtual bool jacobian(double t, std::span<const double> x,
                        linalg::DenseMatrix& out) const;

  /// Sparse state Jacobian for linear models, nullptr when unsupported.
  [[nodiscard]] virtual const linalg::CsrMatrix* sparse_jacobian() const {
    return nullptr;
  }
};

class OdeModel {
 public:
  virtual ~OdeModel() = default;

  [[nodiscard]] virtual std::size_t dim() const = 0;
  [[nodiscard]] virtual const std::vector<ParamSpec>& params() const = 0;
  [[nodiscard]] std::size_t param_dim() const { return params().size(); }

  /// Jacobians come back sparse (large linear models).
  [[nodiscard]] virtual bool sparse() const { return false; }

  [[nodiscard]] virtual std::unique_ptr<ModelEval> bind(
      std::span<const double> theta_natural) const = 0;
};

/// Map between the sampler's unconstrained parameter vector and the model's
/// natural one: positive parameters are exp/log transformed, the rest pass
/// through.
void to_natural(const OdeModel& model, std::span<const double> unconstrained,
                std::span<double> natural);
void to_unconstrained(const OdeModel& model, std::span<const double> natural,
                      std::span<double> unconstrained);

// --- Problem 1: three-compartment Michaelis-Menten chain -------------------

struct MetabolicConstants {
  double lambda = 1.0;
  double c0 = 1.0;
  double A0 = 1.0;
  double A = 5.0;
  double t0_input = 2.0;
  double tau = 1.0;
};

/// Input flux A0 + A*(t - t0)+ * exp(-(t - t0)/tau).
double input_phi(double t, double A0, double A, double t0_input, double tau);

/// theta = (V1, k1, V2, k2). Returns false when a Michaelis-Menten
/// denominator is nonpositive or the result is non-finite.
bool metabolic_rhs(double t, std::span<const double> x,
                   std::span<const double> theta,
                   const MetabolicConstants& consts, std::span<double> out);

/// Analytic 3x3 state Jacobian (lower bidiagonal plus the clearance
/// diagonal); d/dx [V x/(x+k)] = V k/(x+k)^2.
bool metabolic_jacobian(std::span<const double> x,
                        std::span<const double> theta,
                        const MetabolicConstants& consts,
                        linalg::DenseMatrix& out);

class MetabolicModel : public OdeModel {
 public:
  explicit MetabolicModel(MetabolicConstants consts = {});

  [[nodiscard]] std::size_t dim() const override { return 3; }
  [[nodiscard]] const std::vector<ParamSpec>& params() const override;
  [[nodiscard]] std::unique_ptr<ModelEval> bind(
      std::span<const double> theta_natural) const override;
  [[nodiscard]] const MetabolicConstants& constants() const { return consts_; }

 private:
  MetabolicConstants consts_;
};

// --- Problem 2: periodic 2-D advection-diffusion ----------------------------

struct DiffusionCoeffs {
  double d11 = 0.0;
  double d12 = 0.0;
  double d22 = 0.0;
};

/// D = K^T K for lower-triangular K = [[k1, k3], [0, k2]]:
/// d11 = k1^2, d12 = k1*k3, d22 = k2^2 + k3^2. Requires k1, k2 > 0.
DiffusionCoeffs cholesky_to_diffusion(double k1, double k2, double k3);

/// Initial condition: sum of six Gaussian plumes evaluated on the
/// (n-1) x (n-1) grid {0, 1/m, ..., (m-1)/m}^2, stacked with x varying
/// fastest within each column block.
std::vector<double> gaussian_plume_ic(std::size_t n);

/// Semi-discrete operator on the periodic grid; theta = (k1, k2, k3, c1, c2).
/// The difference matrices B1 = I (x) l, B2 = l (x) I and the Gram products
/// are built once at construction; assemble_operator() only forms scalar
/// combinations of them.
class AdvDiffModel : public OdeModel {
 public:
  explicit AdvDiffModel(std::size_t n);

  [[nodiscard]] std::size_t grid() const { return m_; }  // points per side
  [[nodiscard]] std::size_t dim() const override { return m_ * m_; }
  [[nodiscard]] const std::vector<ParamSpec>& params() const override;
  [[nodiscard]] bool sparse() const override { return true; }

  [[nodiscard]] linalg::CsrMatrix assemble_operator(
      std::span<const double> theta) const;
  [[nodiscard]] std::unique_ptr<ModelEval> bind(
      std::span<const double> theta_natural) const override;

  [[nodiscard]] const linalg::CsrMatrix& b1() const { return b1_; }
  [[nodiscard]] const linalg::CsrMatrix& b2() const { return b2_; }
  [[nodiscard]] const linalg::CsrMatrix& g11() const { return g11_; }
  [[nodiscard]] const linalg::CsrMatrix& g22() const { return g22_; }
  [[nodiscard]] const linalg::CsrMatrix& g12() const { return g12_; }

 private:
  std::size_t m_;  // n - 1
  linalg::CsrMatrix b1_, b2_, g11_, g22_, g12_;
};

/// Central-difference check of a model's Jacobian against its rhs, used by
/// tests for both problems. Returns the max relative mismatch.
double jacobian_fd_mismatch(const OdeModel& model,
                            std::span<const double> theta_natural, double t,
                            std::span<const double> x);

}  // namespace pfsmc::models
