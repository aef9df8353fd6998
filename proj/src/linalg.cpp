#include "pfsmc/linalg.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "pfsmc/errors.hpp"
#include "pfsmc/instrumentation.hpp"

namespace pfsmc::instrumentation {

Counters& counters() {
  static Counters c;
  return c;
}

}  // namespace pfsmc::instrumentation

namespace pfsmc::linalg {

bool CsrMatrix::valid() const {
  if (row_offsets.size() != nrows + 1 || row_offsets.front() != 0 ||
      row_offsets.back() != values.size() ||
      col_indices.size() != values.size()) {
    return false;
  }
  for (std::size_t i = 0; i < nrows; ++i) {
    if (row_offsets[i] > row_offsets[i + 1]) return false;
    for (std::size_t k = row_offsets[i]; k < row_offsets[i + 1]; ++k) {
      if (col_indices[k] >= ncols) return false;
      if (k > row_offsets[i] && col_indices[k] <= col_indices[k - 1]) {
        return false;
      }
    }
  }
  return true;
}

double CsrMatrix::at(std::size_t i, std::size_t j) const {
  for (std::size_t k = row_offsets[i]; k < row_offsets[i + 1]; ++k) {
    if (col_indices[k] == j) return values[k];
  }
  return 0.0;
}

CsrMatrix CsrMatrix::identity(std::size_t n) {
  CsrMatrix m;
  m.nrows = m.ncols = n;
  m.row_offsets.resize(n + 1);
  m.col_indices.resize(n);
  m.values.assign(n, 1.0);
  for (std::size_t i = 0; i <= n; ++i) m.row_offsets[i] = i;
  for (std::size_t i = 0; i < n; ++i) m.col_indices[i] = i;
  return m;
}

CsrMatrix CsrMatrix::from_dense(std::size_t nrows, std::size_t ncols,
                                std::span<const double> values) {
  if (values.size() != nrows * ncols) {
    throw std::invalid_argument("from_dense: value count mismatch");
  }
  CsrMatrix m;
  m.nrows = nrows;
  m.ncols = ncols;
  m.row_offsets.resize(nrows + 1, 0);
  for (std::size_t i = 0; i < nrows; ++i) {
    for (std::size_t j = 0; j < ncols; ++j) {
      const double v = values[i * ncols + j];
      if (v != 0.0) {
        m.col_indices.push_back(j);
        m.values.push_back(v);
      }
    }
    m.row_offsets[i + 1] = m.values.size();
  }
  return m;
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
  return m;
}

CsrMatrix periodic_diff_matrix(std::size_t n, double scale) {
  if (n < 2) {
    throw std::invalid_argument("periodic_diff_matrix: dimension must be >= 2");
  }
  CsrMatrix m;
  m.nrows = m.ncols = n;
  m.row_offsets.resize(n + 1);
  m.col_indices.reserve(2 * n);
  m.values.reserve(2 * n);
  m.row_offsets[0] = 0;
  // Row 0: +1 at (0,0), -1 at (0, n-1). Row i>0: -1 at (i,i-1), +1 at (i,i).
  m.col_indices.push_back(0);
  m.values.push_back(scale);
  m.col_indices.push_back(n - 1);
  m.values.push_back(-scale);
  m.row_offsets[1] = 2;
  for (std::size_t i = 1; i < n; ++i) {
    m.col_indices.push_back(i - 1);
    m.values.push_back(-scale);
    m.col_indices.push_back(i);
    m.values.push_back(scale);
    m.row_offsets[i + 1] = m.values.size();
  }
  return m;
}

CsrMatrix kron(const CsrMatrix& a, const CsrMatrix& b) {
  instrumentation::counters().kron_calls.fetch_add(1,
                                                   std::memory_order_relaxed);
  CsrMatrix m;
  m.nrows = a.nrows * b.nrows;
  m.ncols = a.ncols * b.ncols;
  m.row_offsets.resize(m.nrows + 1, 0);
  m.col_indices.reserve(a.nnz() * b.nnz());
  m.values.reserve(a.nnz() * b.nnz());
  for (std::size_t ia = 0; ia < a.nrows; ++ia) {
    for (std::size_t ib = 0; ib < b.nrows; ++ib) {
      for (std::size_t ka = a.row_offsets[ia]; ka < a.row_offsets[ia + 1];
           ++ka) {
        const std::size_t col_base = a.col_indices[ka] * b.ncols;
        const double va = a.values[ka];
        for (std::size_t kb = b.row_offsets[ib]; kb < b.row_offsets[ib + 1];
             ++kb) {
          m.col_indices.push_back(col_base + b.col_indices[kb]);
          m.values.push_back(va * b.values[kb]);
        }
      }
      m.row_offsets[ia * b.nrows + ib + 1] = m.values.size();
    }
  }
  return m;
}

CsrMatrix csr_add(double alpha, const CsrMatrix& a, double beta,
                  const CsrMatrix& b) {
  if (a.nrows != b.nrows || a.ncols != b.ncols) {
    throw std::invalid_argument("csr_add: dimension mismatch");
  }
  CsrMatrix m;
  m.nrows = a.nrows;
  m.ncols = a.ncols;
  m.row_offsets.resize(m.nrows + 1, 0);
  m.col_indices.reserve(a.nnz() + b.nnz());
  m.values.reserve(a.nnz() + b.nnz());
  for (std::size_t i = 0; i < m.nrows; ++i) {
    std::size_t ka = a.row_offsets[i];
    std::size_t kb = b.row_offsets[i];
    const std::size_t ea = a.row_offsets[i + 1];
    const std::size_t eb = b.row_offsets[i + 1];
    while (ka < ea || kb < eb) {
      std::size_t col;
      double v = 0.0;
      if (ka < ea && (kb >= eb || a.col_indices[ka] <= b.col_indices[kb])) {
        col = a.col_indices[ka];
        v += alpha * a.values[ka];
        ++ka;
        if (kb < eb && b.col_indices[kb] == col) {
          v += beta * b.values[kb];
          ++kb;
        }
      } else {
        col = b.col_indices[kb];
        v = beta * b.values[kb];
        ++kb;
      }
      m.col_indices.push_back(col);
      m.values.push_back(v);
    }
    m.row_offsets[i + 1] = m.values.size();
  }
  return m;
}

void spmv(const CsrMatrix& a, std::span<const double> x, std::span<double> y) {
  if (x.size() != a.ncols || y.size() != a.nrows) {
    throw std::invalid_argument("spmv: dimension mismatch");
  }
  for (std::size_t i = 0; i < a.nrows; ++i) {
    double sum = 0.0;
    for (std::size_t k = a.row_offsets[i]; k < a.row_offsets[i + 1]; ++k) {
      sum += a.values[k] * x[a.col_indices[k]];
    }
    y[i] = sum;
  }
}

std::vector<double> spmv(const CsrMatrix& a, std::span<const double> x) {
  std::vector<double> y(a.nrows);
  spmv(a, x, y);
  return y;
}

bool DenseLu::factor(const DenseMatrix& a) {
  if (a.nrows != a.ncols) {
    throw std::invalid_argument("DenseLu: matrix must be square");
  }
  n_ = a.nrows;
  lu_ = a.values;
  piv_.resize(n_);
  for (std::size_t col = 0; col < n_; ++col) {
    std::size_t pivot = col;
    double best = std::abs(lu_[col * n_ + col]);
    for (std::size_t r = col + 1; r < n_; ++r) {
      const double v = std::abs(lu_[r * n_ + col]);
      if (v > best) {
        best = v;
        pivot = r;
      }
    }
    if (best == 0.0) {
      n_ = 0;
      return false;
    }
    piv_[col] = static_cast<int>(pivot);
    if (pivot != col) {
      for (std::size_t j = 0; j < n_; ++j) {
        std::swap(lu_[col * n_ + j], lu_[pivot * n_ + j]);
      }
    }
    const double inv = 1.0 / lu_[col * n_ + col];
    for (std::size_t r = col + 1; r < n_; ++r) {
      const double f = lu_[r * n_ + col] * inv;
      lu_[r * n_ + col] = f;
      if (f != 0.0) {
        for (std::size_t j = col + 1; j < n_; ++j) {
          lu_[r * n_ + j] -= f * lu_[col * n_ + j];
        }
      }
    }
  }
  return true;
}

void DenseLu::solve(std::span<const double> b, std::span<double> x) const {
  if (b.size() != n_ || x.size() != n_) {
    throw std::invalid_argument("DenseLu::solve: dimension mismatch");
  }
  if (x.data() != b.data()) {
    std::copy(b.begin(), b.end(), x.begin());
  }
  for (std::size_t i = 0; i < n_; ++i) {
    const auto p = static_cast<std::size_t>(piv_[i]);
    if (p != i) std::swap(x[i], x[p]);
    for (std::size_t j = 0; j < i; ++j) x[i] -= lu_[i * n_ + j] * x[j];
  }
  for (std::size_t ii = n_; ii-- > 0;) {
    for (std::size_t j = ii + 1; j < n_; ++j) x[ii] -= lu_[ii * n_ + j] * x[j];
    x[ii] /= lu_[ii * n_ + ii];
  }
}

struct SparseLu::Impl {
  Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
  bool ok = false;
  std::size_t n = 0;
};

SparseLu::SparseLu() : impl_(std::make_unique<Impl>()) {}
SparseLu::~SparseLu() = default;
SparseLu::SparseLu(SparseLu&&) noexcept = default;
SparseLu& SparseLu::operator=(SparseLu&&) noexcept = default;

bool SparseLu::factor(const CsrMatrix& a) {
  if (a.nrows != a.ncols) {
    throw std::invalid_argument("SparseLu: matrix must be square");
  }
  Eigen::SparseMatrix<double> m(static_cast<Eigen::Index>(a.nrows),
                                static_cast<Eigen::Index>(a.ncols));
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(a.nnz());
  for (std::size_t i = 0; i < a.nrows; ++i) {
    for (std::size_t k = a.row_offsets[i]; k < a.row_offsets[i + 1]; ++k) {
      trips.emplace_back(static_cast<int>(i),
                         static_cast<int>(a.col_indices[k]), a.values[k]);
    }
  }
  m.setFromTriplets(trips.begin(), trips.end());
  m.makeCompressed();
  impl_->lu.compute(m);
  impl_->ok = impl_->lu.info() == Eigen::Success;
  impl_->n = a.nrows;
  return impl_->ok;
}

void SparseLu::solve(std::span<const double> b, std::span<double> x) const {
  if (!impl_->ok || b.size() != impl_->n || x.size() != impl_->n) {
    throw std::invalid_argument("SparseLu::solve: bad state or dimension");
  }
  Eigen::Map<const Eigen::VectorXd> bv(b.data(),
                                       static_cast<Eigen::Index>(b.size()));
  Eigen::Map<Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  xv = impl_->lu.solve(bv);
}

bool SparseLu::factored() const { return impl_->ok; }

BlockDiag block_diag_assemble(std::vector<DenseMatrix> blocks) {
  if (blocks.empty()) {
    throw std::invalid_argument("block_diag_assemble: no blocks");
  }
  const std::size_t d = blocks.front().nrows;
  for (const auto& b : blocks) {
    if (b.nrows != d || b.ncols != d) {
      throw std::invalid_argument(
          "block_diag_assemble: blocks must be square with equal dimension");
    }
  }
  instrumentation::counters().block_diag_assemblies.fetch_add(
      1, std::memory_order_relaxed);
  BlockDiag a;
  a.block_dim = d;
  a.blocks = std::move(blocks);
  return a;
}

BlockDiag block_diag_assemble_sparse(std::vector<CsrMatrix> blocks) {
  if (blocks.empty()) {
    throw std::invalid_argument("block_diag_assemble_sparse: no blocks");
  }
  const std::size_t d = blocks.front().nrows;
  for (const auto& b : blocks) {
    if (b.nrows != d || b.ncols != d) {
      throw std::invalid_argument(
          "block_diag_assemble_sparse: blocks must be square with equal "
          "dimension");
    }
  }
  instrumentation::counters().block_diag_assemblies.fetch_add(
      1, std::memory_order_relaxed);
  BlockDiag a;
  a.block_dim = d;
  a.sparse_blocks = std::move(blocks);
  return a;
}

BlockDiagSolveResult block_diag_solve(const BlockDiag& a,
                                      std::span<const double> b,
                                      ParallelRunner* runner) {
  const std::size_t d = a.block_dim;
  const std::size_t nb = a.nblocks();
  if (b.size() != d * nb) {
    throw std::invalid_argument("block_diag_solve: rhs length mismatch");
  }
  BlockDiagSolveResult res;
  res.x.assign(b.size(), 0.0);
  std::vector<unsigned char> failed(nb, 0);

  auto solve_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t k = begin; k < end; ++k) {
      const std::span<const double> bk = b.subspan(k * d, d);
      const std::span<double> xk(res.x.data() + k * d, d);
      if (a.sparse()) {
        SparseLu lu;
        if (!lu.factor(a.sparse_blocks[k])) {
          failed[k] = 1;
          continue;
        }
        lu.solve(bk, xk);
      } else {
        DenseLu lu;
        if (!lu.factor(a.blocks[k])) {
          failed[k] = 1;
          continue;
        }
        lu.solve(bk, xk);
      }
    }
  };

  if (runner != nullptr) {
    runner->run(nb, solve_range);
  } else {
    solve_range(0, nb);
  }
  for (std::size_t k = 0; k < nb; ++k) {
    if (failed[k]) res.singular_blocks.push_back(k);
  }
  return res;
}

void weighted_mean_cov(std::span<const double> params, std::size_t n,
                       std::size_t p, std::span<const double> weights,
                       std::span<double> mean_out, DenseMatrix& cov_out) {
  if (params.size() != n * p || weights.size() != n || mean_out.size() != p) {
    throw std::invalid_argument("weighted_mean_cov: dimension mismatch");
  }
  // Compensated sum: plain accumulation over 1e5 weights carries more
  // round-off than the 1e-12 gate itself.
  double wsum = 0.0, comp = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) {
      throw ConfigError("weighted_mean_cov: weights must be nonnegative");
    }
    const double yk = w - comp;
    const double tk = wsum + yk;
    comp = (tk - wsum) - yk;
    wsum = tk;
  }
  if (std::abs(wsum - 1.0) > 1e-12) {
    throw ConfigError("weighted_mean_cov: weights must sum to 1");
  }
  std::fill(mean_out.begin(), mean_out.end(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights[i];
    for (std::size_t j = 0; j < p; ++j) mean_out[j] += w * params[i * p + j];
  }
  cov_out = DenseMatrix(p, p);
  std::vector<double> dev(p);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights[i];
    if (w == 0.0) continue;
    for (std::size_t j = 0; j < p; ++j) {
      dev[j] = params[i * p + j] - mean_out[j];
    }
    for (std::size_t r = 0; r < p; ++r) {
      for (std::size_t c = r; c < p; ++c) {
        cov_out.at(r, c) += w * dev[r] * dev[c];
      }
    }
  }
  for (std::size_t r = 0; r < p; ++r) {
    for (std::size_t c = 0; c < r; ++c) cov_out.at(r, c) = cov_out.at(c, r);
  }
}

namespace {

// Lower Cholesky with tolerance for exactly semidefinite pivots; returns
// false when a pivot goes genuinely negative or a zero pivot has nonzero
// residual column.
bool try_cholesky(const DenseMatrix& c, double pivot_tol, DenseMatrix& l) {
  const std::size_t p = c.nrows;
  l = DenseMatrix(p, p);
  for (std::size_t i = 0; i < p; ++i) {
    double d = c.at(i, i);
    for (std::size_t k = 0; k < i; ++k) d -= l.at(i, k) * l.at(i, k);
    if (d < -pivot_tol) return false;
    if (d <= pivot_tol) {
      // Semi-definite direction: accept only if the rest of the column
      // vanishes too.
      for (std::size_t j = i + 1; j < p; ++j) {
        double s = c.at(j, i);
        for (std::size_t k = 0; k < i; ++k) s -= l.at(j, k) * l.at(i, k);
        if (std::abs(s) > pivot_tol) return false;
      }
      l.at(i, i) = 0.0;
      continue;
    }
    const double root = std::sqrt(d);
    l.at(i, i) = root;
    for (std::size_t j = i + 1; j < p; ++j) {
      double s = c.at(j, i);
      for (std::size_t k = 0; k < i; ++k) s -= l.at(j, k) * l.at(i, k);
      l.at(j, i) = s / root;
    }
  }
  return true;
}

}  // namespace

CholResult chol_psd(const DenseMatrix& c) {
  if (c.nrows != c.ncols) {
    throw std::invalid_argument("chol_psd: matrix must be square");
  }
  const std::size_t p = c.nrows;
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = i + 1; j < p; ++j) {
      if (std::abs(c.at(i, j) - c.at(j, i)) > 1e-12) {
        throw std::invalid_argument("chol_psd: matrix must be symmetric");
      }
    }
  }
  double trace = 0.0;
  for (std::size_t i = 0; i < p; ++i) trace += c.at(i, i);
  const double unit = trace / static_cast<double>(p);
  const double pivot_tol = 1e-14 * std::max(1.0, std::abs(unit));

  constexpr double kLadder[] = {0.0,  1e-12, 1e-10, 1e-8, 1e-6, 1e-4};
  for (double rung : kLadder) {
    const double eps = rung * unit;
    DenseMatrix shifted = c;
    if (eps != 0.0) {
      for (std::size_t i = 0; i < p; ++i) shifted.at(i, i) += eps;
    }
    DenseMatrix l;
    if (try_cholesky(shifted, pivot_tol, l)) {
      return {std::move(l), eps};
    }
  }
  throw NumericalError("chol_psd: degenerate covariance");
}

}  // namespace pfsmc::linalg
