#pragma once

#include <optional>
#include <string>

#include "actcomp/linalg.hpp"
#include "actcomp/matrix.hpp"
#include "actcomp/rng.hpp"

namespace actcomp {

// Rank-k factor pair: the stored form of a compressed activation,
// reconstructed as x_hat = u * v^T.
struct FactoredActivation {
  Matrix u;  // m x k
  Matrix v;  // d x k
  std::size_t rank = 0;
};

enum class CompressorKind { None, RSVD, GaussianRP };

struct CompressorSpec {
  CompressorKind kind = CompressorKind::None;
  std::size_t rank = 8;
  std::size_t oversampling = 8;   // RSVD only
  std::size_t power_iters = 1;    // RSVD only

  void validate() const {
    if (rank < 1) throw ContractViolation("CompressorSpec: rank must be >= 1");
  }

  bool operator==(const CompressorSpec&) const = default;
};

inline std::string compressor_kind_name(CompressorKind k) {
  switch (k) {
    case CompressorKind::None: return "none";
    case CompressorKind::RSVD: return "rsvd";
    case CompressorKind::GaussianRP: return "gaussian_rp";
  }
  return "?";
}

inline Matrix reconstruct(const FactoredActivation& f) { return matmul_nt(f.u, f.v); }

// Halko-style randomized SVD truncated to rank k. Deterministic given the rng
// stream. Power iterations re-orthonormalize between applications of X.
inline FactoredActivation rsvd(const Matrix& x, std::size_t k, std::size_t p, std::size_t q,
                               RngState& rng) {
  const std::size_t m = x.rows, d = x.cols;
  if (k < 1) throw ContractViolation("rsvd: rank must be >= 1");
  if (k + p > std::min(m, d)) throw ContractViolation("rsvd: k + oversampling exceeds min(m, d)");

  if (frobenius_norm(x) == 0.0) return {Matrix(m, k), Matrix(d, k), k};

  Matrix omega = gaussian_matrix(d, k + p, 1.0, rng);
  Matrix y = matmul(x, omega);  // m x (k+p)
  for (std::size_t it = 0; it < q; ++it) {
    y = qr_thin(y).q;
    Matrix z = matmul_tn(x, y);  // d x (k+p)
    z = qr_thin(z).q;
    y = matmul(x, z);
  }
  Matrix qm = qr_thin(y).q;       // m x (k+p)
  Matrix b = matmul_tn(qm, x);    // (k+p) x d
  SvdResult sv = svd_small(b);

  Matrix u(m, k);
  {
    // u = Q * U_b[:, :k] * diag(s[:k])
    Matrix ub_k(b.rows, k);
    for (std::size_t i = 0; i < b.rows; ++i)
      for (std::size_t j = 0; j < k; ++j) ub_k.at(i, j) = sv.u.at(i, j) * sv.s[j];
    u = matmul(qm, ub_k);
  }
  Matrix v(d, k);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < k; ++j) v.at(i, j) = sv.v.at(i, j);
  return {std::move(u), std::move(v), k};
}

// Gaussian random projection with entry variance 1/k: u = X P, v = P, so
// x_hat = X P P^T and E[x_hat] = X. This is the unbiased compressor.
inline FactoredActivation gaussian_rp(const Matrix& x, std::size_t k, RngState& rng) {
  if (k < 1) throw ContractViolation("gaussian_rp: rank must be >= 1");
  Matrix p = gaussian_matrix(x.cols, k, 1.0 / std::sqrt(static_cast<double>(k)), rng);
  Matrix u = matmul(x, p);
  return {std::move(u), std::move(p), k};
}

// Dispatch per spec. Returns nullopt when no compression applies and the
// caller should store x exactly (kind None on a matrix wider than the rank
// budget). RSVD oversampling is clamped so k + p never exceeds min(m, d).
inline std::optional<FactoredActivation> compress(const Matrix& x, const CompressorSpec& spec,
                                                  RngState& rng) {
  spec.validate();
  const std::size_t m = x.rows, d = x.cols;
  switch (spec.kind) {
    case CompressorKind::None: {
      std::size_t mn = std::min(m, d);
      if (mn > spec.rank) return std::nullopt;
      // Exact trivial factorization at rank min(m, d).
      if (d <= m) {
        FactoredActivation f{x, Matrix::identity(d), d};
        return f;
      }
      FactoredActivation f{Matrix::identity(m), transpose(x), m};
      return f;
    }
    case CompressorKind::RSVD: {
      if (spec.rank > std::min(m, d))
        throw ContractViolation("compress: RSVD rank exceeds min(m, d)");
      std::size_t p = std::min(spec.oversampling, std::min(m, d) - spec.rank);
      return rsvd(x, spec.rank, p, spec.power_iters, rng);
    }
    case CompressorKind::GaussianRP:
      return gaussian_rp(x, spec.rank, rng);
  }
  throw ContractViolation("compress: unknown kind");
}

inline double activation_error(const Matrix& x, const FactoredActivation& f) {
  if (f.u.rows != x.rows || f.v.rows != x.cols)
    throw ContractViolation("activation_error: factor shapes do not match x");
  return frobenius_dist(reconstruct(f), x);
}

}  // namespace actcomp
