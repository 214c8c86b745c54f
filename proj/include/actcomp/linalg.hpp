#pragma once

#include <algorithm>
#include <numeric>
#include <vector>

#include "actcomp/matrix.hpp"

namespace actcomp {

struct QrResult {
  Matrix q;  // m x n, orthonormal columns
  Matrix r;  // n x n, upper triangular, nonnegative diagonal
};

// Thin Householder QR for m >= n. Zero columns are skipped (their diagonal of
// R stays 0); Q remains orthonormal regardless.
inline QrResult qr_thin(const Matrix& a) {
  if (a.rows < a.cols) throw ContractViolation("qr_thin: requires rows >= cols");
  const std::size_t m = a.rows, n = a.cols;
  Matrix w = a;
  std::vector<std::vector<double>> vs(n);

  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> v(m - j);
    double norm2 = 0.0;
    for (std::size_t i = j; i < m; ++i) {
      v[i - j] = w.at(i, j);
      norm2 += v[i - j] * v[i - j];
    }
    double norm = std::sqrt(norm2);
    if (norm == 0.0) continue;
    v[0] += (v[0] >= 0.0 ? norm : -norm);
    double vnorm2 = 0.0;
    for (double x : v) vnorm2 += x * x;
    if (vnorm2 == 0.0) continue;
    for (std::size_t c = j; c < n; ++c) {
      double dot = 0.0;
      for (std::size_t i = j; i < m; ++i) dot += v[i - j] * w.at(i, c);
      double f = 2.0 * dot / vnorm2;
      for (std::size_t i = j; i < m; ++i) w.at(i, c) -= f * v[i - j];
    }
    vs[j] = std::move(v);
  }

  Matrix r(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) r.at(i, j) = w.at(i, j);

  // Thin Q: reflectors applied in reverse to the first n columns of I.
  Matrix q(m, n);
  for (std::size_t j = 0; j < n; ++j) q.at(j, j) = 1.0;
  for (std::size_t j = n; j-- > 0;) {
    if (vs[j].empty()) continue;
    const auto& v = vs[j];
    double vnorm2 = 0.0;
    for (double x : v) vnorm2 += x * x;
    for (std::size_t c = 0; c < n; ++c) {
      double dot = 0.0;
      for (std::size_t i = j; i < m; ++i) dot += v[i - j] * q.at(i, c);
      double f = 2.0 * dot / vnorm2;
      for (std::size_t i = j; i < m; ++i) q.at(i, c) -= f * v[i - j];
    }
  }

  for (std::size_t j = 0; j < n; ++j) {
    if (r.at(j, j) < 0.0) {
      for (std::size_t c = j; c < n; ++c) r.at(j, c) = -r.at(j, c);
      for (std::size_t i = 0; i < m; ++i) q.at(i, j) = -q.at(i, j);
    }
  }
  return {std::move(q), std::move(r)};
}

struct SvdResult {
  Matrix u;               // m x min(m,n), orthonormal columns
  std::vector<double> s;  // nonincreasing, nonnegative
  Matrix v;               // n x min(m,n), orthonormal columns
};

namespace detail {

// One-sided Jacobi on a tall matrix. Columns are orthogonalized pairwise;
// singular values are the final column norms. Equal singular values keep the
// order the sweep produced (stable sort). Columns at the rounding-noise floor
// of the matrix scale are treated as converged: their directions are noise and
// their contribution to the factorization is below working precision.
inline SvdResult svd_jacobi_tall(const Matrix& a) {
  if (!all_finite(a)) throw NumericalFailure("svd_small: non-finite input");
  const std::size_t m = a.rows, n = a.cols;
  Matrix w = a;
  Matrix v = Matrix::identity(n);
  const double tol = 1e-14;
  const std::size_t max_sweeps = 100 * n;
  const double col_floor = std::numeric_limits<double>::epsilon() * frobenius_norm(a);

  double worst = 0.0;
  bool converged = false;
  for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
    worst = 0.0;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          double xp = w.at(i, p), xq = w.at(i, q);
          alpha += xp * xp;
          beta += xq * xq;
          gamma += xp * xq;
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::sqrt(alpha) <= col_floor || std::sqrt(beta) <= col_floor) continue;
        double rel = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, rel);
        if (rel <= tol) continue;
        double tau = (beta - alpha) / (2.0 * gamma);
        double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          double xp = w.at(i, p), xq = w.at(i, q);
          w.at(i, p) = c * xp - s * xq;
          w.at(i, q) = s * xp + c * xq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          double vp = v.at(i, p), vq = v.at(i, q);
          v.at(i, p) = c * vp - s * vq;
          v.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (worst <= tol) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NumericalFailure("svd_small: Jacobi sweep did not converge", worst);

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < m; ++i) acc += w.at(i, j) * w.at(i, j);
    norms[j] = std::sqrt(acc);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  SvdResult out;
  out.u = Matrix(m, n);
  out.v = Matrix(n, n);
  out.s.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    std::size_t src = order[j];
    out.s[j] = norms[src];
    if (norms[src] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) out.u.at(i, j) = w.at(i, src) / norms[src];
    }
    for (std::size_t i = 0; i < n; ++i) out.v.at(i, j) = v.at(i, src);
  }

  // Complete exactly-zero columns of U so its columns stay orthonormal.
  for (std::size_t j = 0; j < n; ++j) {
    if (out.s[j] != 0.0) continue;
    for (std::size_t cand = 0; cand < m; ++cand) {
      std::vector<double> e(m, 0.0);
      e[cand] = 1.0;
      for (std::size_t k = 0; k < n; ++k) {
        if (k == j) continue;
        double dot = 0.0;
        for (std::size_t i = 0; i < m; ++i) dot += out.u.at(i, k) * e[i];
        for (std::size_t i = 0; i < m; ++i) e[i] -= dot * out.u.at(i, k);
      }
      double norm = 0.0;
      for (double x : e) norm += x * x;
      norm = std::sqrt(norm);
      if (norm > 0.5) {
        for (std::size_t i = 0; i < m; ++i) out.u.at(i, j) = e[i] / norm;
        break;
      }
    }
  }
  return out;
}

}  // namespace detail

// SVD for small matrices (min dimension <= 256 by design, it only ever runs on
// sketches). Wide inputs are handled by factoring the transpose.
inline SvdResult svd_small(const Matrix& a) {
  if (std::min(a.rows, a.cols) > 256)
    throw ContractViolation("svd_small: min dimension exceeds the 256 design limit");
  if (a.rows >= a.cols) return detail::svd_jacobi_tall(a);
  SvdResult t = detail::svd_jacobi_tall(transpose(a));
  return {std::move(t.v), std::move(t.s), std::move(t.u)};
}

}  // namespace actcomp
