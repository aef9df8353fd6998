#pragma once

#include <cstddef>
#include <type_traits>
#include <memory>
#include <span>
#include <vector>

namespace pfsmc {

/// Chunked work dispatcher; implementations may fan chunks out to threads.
/// Callers must guarantee body(begin, end) ranges touch disjoint data.
class ParallelRunner {
 public:
  virtual ~ParallelRunner() = default;
  virtual void for_chunks(std::size_t n_items,
                          void (*body)(void*, std::size_t, std::size_t),
                          void* ctx) = 0;

  template <typename Fn>
  void run(std::size_t n_items, Fn&& fn) {
    using Body = std::remove_reference_t<Fn>;
    for_chunks(
        n_items,
        [](void* c, std::size_t b, std::size_t e) {
          (*static_cast<Body*>(c))(b, e);
        },
        &fn);
  }
};

}  // namespace pfsmc

namespace pfsmc::linalg {

struct CsrMatrix {
  std::size_t nrows = 0;
  std::size_t ncols = 0;
  std::vector<std::size_t> row_offsets;  // length nrows + 1
  std::vector<std::size_t> col_indices;  // strictly increasing within a row
  std::vector<double> values;

  [[nodiscard]] std::size_t nnz() const { return values.size(); }
  [[nodiscard]] bool valid() const;
  /// Slow entry lookup (zero when not stored); for tests and assembly code.
  [[nodiscard]] double at(std::size_t i, std::size_t j) const;

  static CsrMatrix identity(std::size_t n);
  static CsrMatrix from_dense(std::size_t nrows, std::size_t ncols,
                              std::span<const double> values);
};

struct DenseMatrix {
  std::size_t nrows = 0;
  std::size_t ncols = 0;
  std::vector<double> values;  // row-major

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c)
      : nrows(r), ncols(c), values(r * c, 0.0) {}

  double& at(std::size_t i, std::size_t j) { return values[i * ncols + j]; }
  [[nodiscard]] double at(std::size_t i, std::size_t j) const {
    return values[i * ncols + j];
  }

  static DenseMatrix identity(std::size_t n);
};

/// Circulant first-difference operator: +1 on the diagonal, -1 on the
/// subdiagonal and in the top-right corner. `scale` is an optional grid
/// factor, default 1 (the plain stencil).
CsrMatrix periodic_diff_matrix(std::size_t n, double scale = 1.0);

CsrMatrix kron(const CsrMatrix& a, const CsrMatrix& b);

/// y = alpha*A + beta*B with a merged sparsity pattern.
CsrMatrix csr_add(double alpha, const CsrMatrix& a, double beta,
                  const CsrMatrix& b);

void spmv(const CsrMatrix& a, std::span<const double> x, std::span<double> y);
std::vector<double> spmv(const CsrMatrix& a, std::span<const double> x);

/// Dense LU with partial pivoting. factor() returns false on an exactly
/// singular pivot; solve() may then not be called.
class DenseLu {
 public:
  [[nodiscard]] bool factor(const DenseMatrix& a);
  void solve(std::span<const double> b, std::span<double> x) const;
  [[nodiscard]] bool factored() const { return n_ > 0; }

 private:
  std::size_t n_ = 0;
  std::vector<double> lu_;
  std::vector<int> piv_;
};

/// Sparse LU (per-block path for large blocks). Wraps Eigen::SparseLU.
class SparseLu {
 public:
  SparseLu();
  ~SparseLu();
  SparseLu(SparseLu&&) noexcept;
  SparseLu& operator=(SparseLu&&) noexcept;

  [[nodiscard]] bool factor(const CsrMatrix& a);
  void solve(std::span<const double> b, std::span<double> x) const;
  [[nodiscard]] bool factored() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Blocks above this dimension are stored sparse and solved with a sparse
/// LU per block; at or below it, dense LU with partial pivoting.
inline constexpr std::size_t kSparseBlockThreshold = 64;

struct BlockDiag {
  std::size_t block_dim = 0;
  std::vector<DenseMatrix> blocks;
  std::vector<CsrMatrix> sparse_blocks;

  [[nodiscard]] bool sparse() const { return !sparse_blocks.empty(); }
  [[nodiscard]] std::size_t nblocks() const {
    return sparse() ? sparse_blocks.size() : blocks.size();
  }
  [[nodiscard]] std::size_t dim() const { return block_dim * nblocks(); }
};

BlockDiag block_diag_assemble(std::vector<DenseMatrix> blocks);
BlockDiag block_diag_assemble_sparse(std::vector<CsrMatrix> blocks);

struct BlockDiagSolveResult {
  std::vector<double> x;
  std::vector<std::size_t> singular_blocks;  // indices of failed blocks
  [[nodiscard]] bool ok() const { return singular_blocks.empty(); }
};

/// Solves each diagonal block independently. Singular blocks are reported by
/// index; their slice of x is left as zeros and the other blocks still solve.
BlockDiagSolveResult block_diag_solve(const BlockDiag& a,
                                      std::span<const double> b,
                                      ParallelRunner* runner = nullptr);

/// Weighted ensemble moments: mean = sum w_n theta_n and
/// cov = sum w_n (theta_n - mean)(theta_n - mean)^T (no Bessel correction).
/// params is N x p row-major. Weights must be nonnegative and sum to 1
/// within 1e-12.
void weighted_mean_cov(std::span<const double> params, std::size_t n,
                       std::size_t p, std::span<const double> weights,
                       std::span<double> mean_out, DenseMatrix& cov_out);

struct CholResult {
  DenseMatrix lower;
  double jitter = 0.0;  // epsilon actually added to the diagonal
};

/// Cholesky factor of a symmetric PSD matrix, with a fixed jitter ladder
/// eps in {0, 1e-12, 1e-10, ..., 1e-4} * trace(C)/p retried in order until
/// the factorization succeeds. Throws NumericalError past the last rung.
CholResult chol_psd(const DenseMatrix& c);

}  // namespace pfsmc::linalg
