#include <doctest.h>

#include <cmath>
#include <vector>

#include "pfsmc/errors.hpp"
#include "pfsmc/linalg.hpp"
#include "pfsmc/rng.hpp"

using namespace pfsmc::linalg;
using pfsmc::rng::Purpose;
using pfsmc::rng::RngStream;

namespace {

std::vector<double> to_dense(const CsrMatrix& m) {
  std::vector<double> d(m.nrows * m.ncols, 0.0);
  for (std::size_t i = 0; i < m.nrows; ++i) {
    for (std::size_t k = m.row_offsets[i]; k < m.row_offsets[i + 1]; ++k) {
      d[i * m.ncols + m.col_indices[k]] = m.values[k];
    }
  }
  return d;
}

CsrMatrix random_csr(RngStream& s, std::size_t r, std::size_t c,
                     double density) {
  std::vector<double> d(r * c, 0.0);
  for (auto& v : d) {
    if (s.next_uniform() < density) v = 2.0 * s.next_uniform() - 1.0;
  }
  return CsrMatrix::from_dense(r, c, d);
}

// Independent oracle: naive Gaussian elimination with partial pivoting on a
// dense copy.
std::vector<double> dense_solve_oracle(std::vector<double> a,
                                       std::vector<double> b, std::size_t n) {
  for (std::size_t col = 0; col < n; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < n; ++r) {
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    }
    for (std::size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[piv * n + j]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < n; ++r) {
      const double f = a[r * n + col] / a[col * n + col];
      for (std::size_t j = col; j < n; ++j) a[r * n + j] -= f * a[col * n + j];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = b[ii];
    for (std::size_t j = ii + 1; j < n; ++j) s -= a[ii * n + j] * x[j];
    x[ii] = s / a[ii * n + ii];
  }
  return x;
}

}  // namespace

TEST_CASE("periodic difference matrix stencils") {
  const CsrMatrix l2 = periodic_diff_matrix(2);
  CHECK(to_dense(l2) == std::vector<double>{1, -1, -1, 1});

  const CsrMatrix l3 = periodic_diff_matrix(3);
  CHECK(to_dense(l3) == std::vector<double>{1, 0, -1, -1, 1, 0, 0, -1, 1});

  CHECK_THROWS_AS(periodic_diff_matrix(1), std::invalid_argument);

  for (std::size_t n : {2, 5, 17, 40}) {
    const CsrMatrix l = periodic_diff_matrix(n);
    CHECK(l.valid());
    // two nonzeros per row and per column, zero row and column sums
    std::vector<int> col_counts(n, 0);
    std::vector<double> col_sums(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(l.row_offsets[i + 1] - l.row_offsets[i] == 2);
      double row_sum = 0.0;
      for (std::size_t k = l.row_offsets[i]; k < l.row_offsets[i + 1]; ++k) {
        row_sum += l.values[k];
        col_counts[l.col_indices[k]]++;
        col_sums[l.col_indices[k]] += l.values[k];
      }
      CHECK(row_sum == 0.0);
    }
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(col_counts[j] == 2);
      CHECK(col_sums[j] == 0.0);
    }
    const std::vector<double> ones(n, 1.0);
    for (double v : spmv(l, ones)) CHECK(v == 0.0);
  }
}

TEST_CASE("kronecker product structure") {
  const CsrMatrix eye2 = CsrMatrix::identity(2);
  const CsrMatrix l2 = periodic_diff_matrix(2);

  const CsrMatrix a = kron(eye2, l2);  // block diagonal, two copies of l2
  CHECK(to_dense(a) == std::vector<double>{1, -1, 0, 0,  //
                                           -1, 1, 0, 0,  //
                                           0, 0, 1, -1,  //
                                           0, 0, -1, 1});

  const CsrMatrix b = kron(l2, eye2);  // strided +-1 pattern
  CHECK(to_dense(b) == std::vector<double>{1, 0, -1, 0,  //
                                           0, 1, 0, -1,  //
                                           -1, 0, 1, 0,  //
                                           0, -1, 0, 1});

  RngStream s(11, 0, 0, Purpose::init);
  const CsrMatrix r = random_csr(s, 4, 3, 0.6);
  const CsrMatrix rk = kron(r, CsrMatrix::identity(1));
  CHECK(to_dense(rk) == to_dense(r));
  CHECK(rk.nnz() == r.nnz());
}

TEST_CASE("kron bilinearity: kron(A,B)(x (x) y) = (Ax) (x) (By)") {
  RngStream s(5, 0, 0, Purpose::init);
  for (int rep = 0; rep < 10; ++rep) {
    const CsrMatrix a = random_csr(s, 3, 4, 0.5);
    const CsrMatrix b = random_csr(s, 2, 5, 0.5);
    std::vector<double> x(4), y(5);
    for (auto& v : x) v = s.next_normal();
    for (auto& v : y) v = s.next_normal();
    std::vector<double> xy(4 * 5);
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 5; ++j) xy[i * 5 + j] = x[i] * y[j];
    }
    const std::vector<double> lhs = spmv(kron(a, b), xy);
    const std::vector<double> ax = spmv(a, x);
    const std::vector<double> by = spmv(b, y);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        CHECK(lhs[i * 2 + j] ==
              doctest::Approx(ax[i] * by[j]).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("spmv basics") {
  const CsrMatrix l3 = periodic_diff_matrix(3);
  CHECK(spmv(l3, std::vector<double>{1, 1, 1}) ==
        std::vector<double>{0, 0, 0});

  const CsrMatrix i4 = CsrMatrix::identity(4);
  const std::vector<double> x{1, -2, 3, 4.5};
  CHECK(spmv(i4, x) == x);

  const CsrMatrix l2 = periodic_diff_matrix(2);
  CHECK(spmv(l2, std::vector<double>{2, 5}) == std::vector<double>{-3, 3});

  CHECK_THROWS_AS(spmv(l2, std::vector<double>{1, 2, 3}),
                  std::invalid_argument);
}

TEST_CASE("block diagonal assembly") {
  DenseMatrix b(3, 3);
  for (std::size_t i = 0; i < 9; ++i) b.values[i] = static_cast<double>(i);
  const BlockDiag one = block_diag_assemble({b});
  CHECK(one.nblocks() == 1);
  CHECK(one.dim() == 3);

  const BlockDiag eyes =
      block_diag_assemble({DenseMatrix::identity(3), DenseMatrix::identity(3),
                           DenseMatrix::identity(3)});
  std::vector<double> rhs(9);
  for (std::size_t i = 0; i < 9; ++i) rhs[i] = static_cast<double>(i) - 4.0;
  const auto sol = block_diag_solve(eyes, rhs);
  CHECK(sol.ok());
  CHECK(sol.x == rhs);

  CHECK_THROWS_AS(
      block_diag_assemble({DenseMatrix::identity(2), DenseMatrix::identity(3)}),
      std::invalid_argument);
  CHECK_THROWS_AS(block_diag_assemble({}), std::invalid_argument);
}

TEST_CASE("block diagonal solve: diagonal, residual oracle, singular report") {
  DenseMatrix d(2, 2);
  d.at(0, 0) = 2.0;
  d.at(1, 1) = 4.0;
  const auto sol = block_diag_solve(block_diag_assemble({d}),
                                    std::vector<double>{2, 4});
  CHECK(sol.ok());
  CHECK(sol.x == std::vector<double>{1, 1});

  // random diagonally dominant blocks: residual <= 1e-10 scale
  RngStream s(3, 0, 0, Purpose::init);
  std::vector<DenseMatrix> blocks;
  std::vector<double> rhs;
  for (int k = 0; k < 5; ++k) {
    DenseMatrix b(3, 3);
    for (std::size_t i = 0; i < 3; ++i) {
      double off = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        if (i != j) {
          b.at(i, j) = s.next_normal();
          off += std::abs(b.at(i, j));
        }
      }
      b.at(i, i) = off + 1.0 + s.next_uniform();
    }
    blocks.push_back(b);
    for (int i = 0; i < 3; ++i) rhs.push_back(s.next_normal());
  }
  const BlockDiag bd = block_diag_assemble(blocks);
  const auto res = block_diag_solve(bd, rhs);
  CHECK(res.ok());
  for (std::size_t k = 0; k < 5; ++k) {
    double anorm = 0.0, xnorm = 0.0, bnorm = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double rsum = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        rsum += std::abs(blocks[k].at(i, j));
        // residual check below
      }
      anorm = std::max(anorm, rsum);
      xnorm = std::max(xnorm, std::abs(res.x[k * 3 + i]));
      bnorm = std::max(bnorm, std::abs(rhs[k * 3 + i]));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      double ax = 0.0;
      for (std::size_t j = 0; j < 3; ++j) {
        ax += blocks[k].at(i, j) * res.x[k * 3 + j];
      }
      CHECK(std::abs(ax - rhs[k * 3 + i]) <=
            1e-10 * (anorm * xnorm + bnorm));
    }
  }

  // singular middle block is reported by index, others still solve
  std::vector<DenseMatrix> with_singular = {DenseMatrix::identity(2),
                                            DenseMatrix(2, 2),
                                            DenseMatrix::identity(2)};
  const auto bad = block_diag_solve(block_diag_assemble(with_singular),
                                    std::vector<double>{1, 2, 3, 4, 5, 6});
  CHECK(bad.singular_blocks == std::vector<std::size_t>{1});
  CHECK(bad.x[0] == 1.0);
  CHECK(bad.x[5] == 6.0);
}

TEST_CASE("block diagonal solve equals dense solve of the expanded matrix") {
  RngStream s(9, 0, 0, Purpose::init);
  for (int rep = 0; rep < 5; ++rep) {
    const std::size_t bd_dim = 2 + rep % 3;  // 2..4
    const std::size_t nblocks = 1 + rep % 5;
    std::vector<DenseMatrix> blocks;
    const std::size_t n = bd_dim * nblocks;
    std::vector<double> expanded(n * n, 0.0);
    std::vector<double> rhs(n);
    for (std::size_t k = 0; k < nblocks; ++k) {
      DenseMatrix b(bd_dim, bd_dim);
      for (std::size_t i = 0; i < bd_dim; ++i) {
        double off = 0.0;
        for (std::size_t j = 0; j < bd_dim; ++j) {
          if (i != j) {
            b.at(i, j) = s.next_normal();
            off += std::abs(b.at(i, j));
          }
        }
        b.at(i, i) = off + 1.0;
        for (std::size_t j = 0; j < bd_dim; ++j) {
          expanded[(k * bd_dim + i) * n + k * bd_dim + j] = b.at(i, j);
        }
      }
      blocks.push_back(b);
    }
    for (auto& v : rhs) v = s.next_normal();
    const auto got = block_diag_solve(block_diag_assemble(blocks), rhs);
    const auto want = dense_solve_oracle(expanded, rhs, n);
    REQUIRE(got.ok());
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(got.x[i] == doctest::Approx(want[i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("sparse per-block path solves above the dimension threshold") {
  // 70x70 diagonally dominant tridiagonal-with-wrap blocks
  RngStream s(13, 0, 0, Purpose::init);
  const std::size_t n = 70;
  std::vector<CsrMatrix> blocks;
  std::vector<double> rhs;
  for (int k = 0; k < 3; ++k) {
    std::vector<double> dense(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = s.next_normal(), b = s.next_normal();
      dense[i * n + (i + 1) % n] = a;
      dense[i * n + (i + n - 1) % n] = b;
      dense[i * n + i] = std::abs(a) + std::abs(b) + 1.0 + s.next_uniform();
    }
    blocks.push_back(CsrMatrix::from_dense(n, n, dense));
    for (std::size_t i = 0; i < n; ++i) rhs.push_back(s.next_normal());
  }
  const BlockDiag bd = block_diag_assemble_sparse(blocks);
  CHECK(bd.sparse());
  const auto res = block_diag_solve(bd, rhs);
  REQUIRE(res.ok());
  for (std::size_t k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      double ax = 0.0;
      for (std::size_t j = blocks[k].row_offsets[i];
           j < blocks[k].row_offsets[i + 1]; ++j) {
        ax += blocks[k].values[j] * res.x[k * n + blocks[k].col_indices[j]];
      }
      CHECK(ax == doctest::Approx(rhs[k * n + i]).epsilon(1e-10));
    }
  }
}

TEST_CASE("weighted moments") {
  // two particles at 0 and 2 with equal weight: mean 1, cov 1
  std::vector<double> params{0.0, 2.0};
  std::vector<double> w{0.5, 0.5};
  std::vector<double> mean(1);
  DenseMatrix cov;
  weighted_mean_cov(params, 2, 1, w, mean, cov);
  CHECK(mean[0] == 1.0);
  CHECK(cov.at(0, 0) == 1.0);

  // identical particles: zero covariance
  std::vector<double> same{3.0, 3.0, 3.0};
  std::vector<double> w3(3, 1.0 / 3.0);
  weighted_mean_cov(same, 3, 1, w3, mean, cov);
  CHECK(cov.at(0, 0) == doctest::Approx(0.0).epsilon(1e-15));

  // one-hot weights pick that particle
  std::vector<double> params2{1.0, 5.0, -2.0, 0.5, 7.0, 9.0};
  std::vector<double> onehot{0.0, 1.0, 0.0};
  std::vector<double> mean2(2);
  weighted_mean_cov(params2, 3, 2, onehot, mean2, cov);
  CHECK(mean2 == std::vector<double>{-2.0, 0.5});
  CHECK(cov.at(0, 0) == 0.0);
  CHECK(cov.at(1, 1) == 0.0);

  // uniform weights equal divide-by-N sample moments
  RngStream s(21, 0, 0, Purpose::init);
  const std::size_t n = 200, p = 3;
  std::vector<double> big(n * p);
  for (auto& v : big) v = s.next_normal();
  std::vector<double> wu(n, 1.0 / n);
  std::vector<double> mu(p);
  weighted_mean_cov(big, n, p, wu, mu, cov);
  for (std::size_t j = 0; j < p; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m += big[i * p + j];
    m /= n;
    CHECK(mu[j] == doctest::Approx(m).epsilon(1e-13));
  }
  for (std::size_t a = 0; a < p; ++a) {
    for (std::size_t b = 0; b < p; ++b) {
      double cab = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        cab += (big[i * p + a] - mu[a]) * (big[i * p + b] - mu[b]);
      }
      cab /= n;
      CHECK(cov.at(a, b) == doctest::Approx(cab).epsilon(1e-12));
      CHECK(cov.at(a, b) == cov.at(b, a));
    }
  }

  // bad weight sum rejected
  std::vector<double> wbad{0.5, 0.6};
  CHECK_THROWS_AS(weighted_mean_cov(params, 2, 1, wbad, mean, cov),
                  pfsmc::ConfigError);
}

TEST_CASE("jittered cholesky") {
  const auto id = chol_psd(DenseMatrix::identity(3));
  CHECK(id.jitter == 0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(id.lower.at(i, j) == (i == j ? 1.0 : 0.0));
    }
  }

  DenseMatrix diag(2, 2);
  diag.at(0, 0) = 4.0;
  diag.at(1, 1) = 9.0;
  const auto dd = chol_psd(diag);
  CHECK(dd.lower.at(0, 0) == 2.0);
  CHECK(dd.lower.at(1, 1) == 3.0);
  CHECK(dd.lower.at(1, 0) == 0.0);

  // rank deficient: succeeds, reconstruction within jitter + tolerance
  DenseMatrix rank1(2, 2);
  rank1.at(0, 0) = rank1.at(0, 1) = rank1.at(1, 0) = rank1.at(1, 1) = 1.0;
  const auto r1 = chol_psd(rank1);
  CHECK(r1.jitter <= 1e-8);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double ll = 0.0;
      for (std::size_t k = 0; k < 2; ++k) {
        ll += r1.lower.at(i, k) * r1.lower.at(j, k);
      }
      CHECK(std::abs(ll - rank1.at(i, j)) <= r1.jitter * 2 + 1e-12);
    }
  }

  // zero matrix factors as zero
  const auto z = chol_psd(DenseMatrix(2, 2));
  CHECK(z.lower.values == std::vector<double>{0, 0, 0, 0});

  // negative definite is degenerate
  DenseMatrix neg(2, 2);
  neg.at(0, 0) = neg.at(1, 1) = -1.0;
  CHECK_THROWS_AS(chol_psd(neg), pfsmc::NumericalError);

  // asymmetric input rejected
  DenseMatrix asym(2, 2);
  asym.at(0, 1) = 1.0;
  CHECK_THROWS_AS(chol_psd(asym), std::invalid_argument);

  // random PSD reconstruction
  RngStream s(33, 0, 0, Purpose::init);
  for (int rep = 0; rep < 10; ++rep) {
    DenseMatrix a(3, 3);
    for (auto& v : a.values) v = s.next_normal();
    DenseMatrix c(3, 3);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double v = 0.0;
        for (std::size_t k = 0; k < 3; ++k) v += a.at(k, i) * a.at(k, j);
        c.at(i, j) = v;
      }
    }
    // symmetrize exactly
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = i + 1; j < 3; ++j) c.at(j, i) = c.at(i, j);
    }
    const auto f = chol_psd(c);
    double worst = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 3; ++j) {
        double ll = 0.0;
        for (std::size_t k = 0; k < 3; ++k) {
          ll += f.lower.at(i, k) * f.lower.at(j, k);
        }
        worst = std::max(worst, std::abs(ll - c.at(i, j)));
      }
    }
    CHECK(worst <= f.jitter * 3 + 1e-12);
  }
}
