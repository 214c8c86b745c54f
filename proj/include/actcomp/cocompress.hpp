#pragma once

#include "actcomp/compress.hpp"
#include "actcomp/matrix.hpp"

namespace actcomp {

// Factored weight gradient for a linear layer whose saved activation is
// already factored: G_hat = ((dL/dZ)^T U) V^T = l r^T. The factors are stored
// exactly as produced — no re-orthonormalization, no extra rounding.
struct FactoredGradient {
  Matrix l;  // out x k, (dL/dZ)^T * U
  Matrix r;  // in x k, V
  std::size_t rank = 0;
};

// One m-by-out times m-by-k product; the dense m-by-d activation is never
// formed and the original X is never needed.
inline FactoredGradient cocompress_backward(const Matrix& g_z, const FactoredActivation& f) {
  if (g_z.rows != f.u.rows)
    throw ContractViolation("cocompress_backward: g_z rows must match factor rows");
  return {matmul_tn(g_z, f.u), f.v, f.rank};
}

inline Matrix reconstruct_gradient(const FactoredGradient& fg) { return matmul_nt(fg.l, fg.r); }

// ||l r^T||_F without forming the product: tr(r l^T l r^T) = <l^T l, r^T r>.
inline double factored_gradient_fnorm(const FactoredGradient& fg) {
  Matrix ltl = matmul_tn(fg.l, fg.l);
  Matrix rtr = matmul_tn(fg.r, fg.r);
  double acc = 0.0;
  for (std::size_t i = 0; i < ltl.a.size(); ++i) acc += ltl.a[i] * rtr.a[i];
  return std::sqrt(std::max(0.0, acc));
}

struct GradientBytes {
  std::size_t bytes = 0;
  bool beneficial = true;  // false when the factored form is not smaller
};

inline GradientBytes factored_gradient_bytes(std::size_t out, std::size_t in, std::size_t k,
                                             std::size_t word) {
  if (k == 0) throw ContractViolation("factored_gradient_bytes: rank must be >= 1");
  std::size_t bytes = (out + in) * k * word;
  return {bytes, bytes < out * in * word};
}

inline std::size_t dense_gradient_bytes(std::size_t out, std::size_t in, std::size_t word) {
  return out * in * word;
}

}  // namespace actcomp
