#pragma once

#include <optional>
#include <vector>

#include "actcomp/matrix.hpp"

namespace actcomp {

// Forward/backward kernels for the operator set the engine records. Each
// kernel is pure; the tape decides what gets saved and hands the (possibly
// reconstructed) activation back in.

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// ---- linear: Z = X W^T (+ bias broadcast over rows) ----

inline Matrix linear_forward(const Matrix& x, const Matrix& w, const Matrix* bias = nullptr) {
  if (x.cols != w.cols) throw ContractViolation("linear_forward: x.cols != w.cols");
  Matrix z = matmul_nt(x, w);  // m x out
  if (bias) {
    if (bias->rows != 1 || bias->cols != w.rows)
      throw ContractViolation("linear_forward: bias must be 1 x out");
    for (std::size_t i = 0; i < z.rows; ++i)
      for (std::size_t j = 0; j < z.cols; ++j) z.at(i, j) += bias->at(0, j);
  }
  return z;
}

struct LinearBackward {
  Matrix g_x;                   // G_Z * W — never touches the saved activation
  Matrix g_w;                   // G_Z^T * X_hat
  std::optional<Matrix> g_b;    // column sums of G_Z
};

inline LinearBackward linear_backward(const Matrix& g_z, const Matrix& x_hat, const Matrix& w,
                                      bool has_bias) {
  if (g_z.cols != w.rows) throw ContractViolation("linear_backward: g_z.cols != out");
  if (x_hat.cols != w.cols) throw ContractViolation("linear_backward: x.cols != in");
  if (x_hat.rows != g_z.rows) throw ContractViolation("linear_backward: row mismatch");
  LinearBackward out{matmul(g_z, w), matmul_tn(g_z, x_hat), std::nullopt};
  if (has_bias) out.g_b = col_sums(g_z);
  return out;
}

// ---- SiLU: z = x * sigma(x), elementwise ----

inline Matrix silu_forward(const Matrix& x) {
  Matrix z = x;
  for (double& v : z.a) v = v * sigmoid(v);
  return z;
}

inline double silu_derivative(double x) {
  double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

inline Matrix silu_backward(const Matrix& g_z, const Matrix& x_hat) {
  if (!g_z.same_shape(x_hat)) throw ContractViolation("silu_backward: shape mismatch");
  Matrix g = g_z;
  for (std::size_t i = 0; i < g.a.size(); ++i) g.a[i] *= silu_derivative(x_hat.a[i]);
  return g;
}

// ---- RMSNorm: per row, y = gamma ⊙ x / sqrt(mean(x^2) + eps) ----

inline double rms_row(const Matrix& x, std::size_t i, double eps) {
  double acc = 0.0;
  for (std::size_t j = 0; j < x.cols; ++j) acc += x.at(i, j) * x.at(i, j);
  return std::sqrt(acc / static_cast<double>(x.cols) + eps);
}

inline Matrix rmsnorm_forward(const Matrix& x, const Matrix& gamma, double eps) {
  if (gamma.rows != 1 || gamma.cols != x.cols)
    throw ContractViolation("rmsnorm_forward: gamma must be 1 x cols");
  Matrix y(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double r = rms_row(x, i, eps);
    if (r == 0.0) throw NumericalFailure("rmsnorm_forward: zero row with eps = 0");
    for (std::size_t j = 0; j < x.cols; ++j) y.at(i, j) = gamma.at(0, j) * x.at(i, j) / r;
  }
  return y;
}

struct RmsNormBackward {
  Matrix g_x;
  Matrix g_gamma;  // 1 x cols
};

inline RmsNormBackward rmsnorm_backward(const Matrix& g_y, const Matrix& x_hat,
                                        const Matrix& gamma, double eps) {
  if (!g_y.same_shape(x_hat)) throw ContractViolation("rmsnorm_backward: shape mismatch");
  const std::size_t d = x_hat.cols;
  Matrix g_x(x_hat.rows, d);
  Matrix g_gamma(1, d);
  for (std::size_t i = 0; i < x_hat.rows; ++i) {
    double r = rms_row(x_hat, i, eps);
    if (r == 0.0) throw NumericalFailure("rmsnorm_backward: zero row with eps = 0");
    double dot = 0.0;  // sum_j g_ij * gamma_j * x_ij
    for (std::size_t j = 0; j < d; ++j) dot += g_y.at(i, j) * gamma.at(0, j) * x_hat.at(i, j);
    double r3 = r * r * r;
    for (std::size_t j = 0; j < d; ++j) {
      g_x.at(i, j) = gamma.at(0, j) * g_y.at(i, j) / r -
                     x_hat.at(i, j) * dot / (static_cast<double>(d) * r3);
      g_gamma.at(0, j) += g_y.at(i, j) * x_hat.at(i, j) / r;
    }
  }
  return {std::move(g_x), std::move(g_gamma)};
}

// ---- row-wise softmax, shift-stabilized; the OUTPUT is what gets saved ----

inline Matrix softmax_forward(const Matrix& x) {
  Matrix s(x.rows, x.cols);
  for (std::size_t i = 0; i < x.rows; ++i) {
    double mx = x.at(i, 0);
    for (std::size_t j = 1; j < x.cols; ++j) mx = std::max(mx, x.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < x.cols; ++j) {
      double e = std::exp(x.at(i, j) - mx);
      s.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < x.cols; ++j) s.at(i, j) /= sum;
  }
  return s;
}

// g_x = s ⊙ (g_z − <g_z, s>) per row, evaluated at the saved (possibly
// reconstructed) output.
inline Matrix softmax_backward(const Matrix& g_z, const Matrix& s_hat) {
  if (!g_z.same_shape(s_hat)) throw ContractViolation("softmax_backward: shape mismatch");
  Matrix g(g_z.rows, g_z.cols);
  for (std::size_t i = 0; i < g_z.rows; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < g_z.cols; ++j) dot += g_z.at(i, j) * s_hat.at(i, j);
    for (std::size_t j = 0; j < g_z.cols; ++j)
      g.at(i, j) = s_hat.at(i, j) * (g_z.at(i, j) - dot);
  }
  return g;
}

// ---- cross entropy over logits, mean over tokens ----

struct CrossEntropyForward {
  double loss = 0.0;
  Matrix probs;  // m x vocab, saved for backward
};

inline CrossEntropyForward cross_entropy_forward(const Matrix& logits,
                                                 const std::vector<int>& targets) {
  if (targets.size() != logits.rows)
    throw ContractViolation("cross_entropy_forward: one target per row required");
  CrossEntropyForward out;
  out.probs = Matrix(logits.rows, logits.cols);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows; ++i) {
    int t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= logits.cols)
      throw ContractViolation("cross_entropy_forward: target out of range");
    double mx = logits.at(i, 0);
    for (std::size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, logits.at(i, j));
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(logits.at(i, j) - mx);
    double lse = mx + std::log(sum);
    for (std::size_t j = 0; j < logits.cols; ++j)
      out.probs.at(i, j) = std::exp(logits.at(i, j) - lse);
    total += lse - logits.at(i, static_cast<std::size_t>(t));
  }
  out.loss = total / static_cast<double>(logits.rows);
  return out;
}

inline Matrix cross_entropy_backward(const Matrix& probs, const std::vector<int>& targets) {
  Matrix g = probs;
  double inv_m = 1.0 / static_cast<double>(probs.rows);
  for (std::size_t i = 0; i < probs.rows; ++i) {
    g.at(i, static_cast<std::size_t>(targets[i])) -= 1.0;
    for (std::size_t j = 0; j < probs.cols; ++j) g.at(i, j) *= inv_m;
  }
  return g;
}

// ---- token-wise Jacobians (d_out x d_in), J[a][b] = dz_a / dx_b ----
// Contracting a row gradient g (1 x d_out) as g * J reproduces the operator's
// backward output for that row.

inline Matrix jacobian_linear(const Matrix& w) { return w; }

inline Matrix jacobian_silu(const Matrix& x_row) {
  if (x_row.rows != 1) throw ContractViolation("jacobian_silu: expects a row vector");
  Matrix j(x_row.cols, x_row.cols);
  for (std::size_t i = 0; i < x_row.cols; ++i) j.at(i, i) = silu_derivative(x_row.at(0, i));
  return j;
}

inline Matrix jacobian_rmsnorm(const Matrix& x_row, const Matrix& gamma, double eps) {
  if (x_row.rows != 1) throw ContractViolation("jacobian_rmsnorm: expects a row vector");
  const std::size_t d = x_row.cols;
  double r = rms_row(x_row, 0, eps);
  if (r == 0.0) throw NumericalFailure("jacobian_rmsnorm: zero row with eps = 0");
  double r3 = r * r * r;
  Matrix j(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      double v = -x_row.at(0, a) * x_row.at(0, b) / (static_cast<double>(d) * r3);
      if (a == b) v += 1.0 / r;
      j.at(a, b) = gamma.at(0, a) * v;
    }
  return j;
}

inline Matrix jacobian_softmax(const Matrix& s_row) {
  if (s_row.rows != 1) throw ContractViolation("jacobian_softmax: expects a row vector");
  const std::size_t d = s_row.cols;
  Matrix j(d, d);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      double v = -s_row.at(0, a) * s_row.at(0, b);
      if (a == b) v += s_row.at(0, a);
      j.at(a, b) = v;
    }
  return j;
}

}  // namespace actcomp
