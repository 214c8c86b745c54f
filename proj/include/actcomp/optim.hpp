#pragma once

#include <cstdint>
#include <vector>

#include "actcomp/cocompress.hpp"
#include "actcomp/matrix.hpp"

namespace actcomp {

struct AdamHyper {
  double lr = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw ContractViolation("AdamHyper: lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ContractViolation("AdamHyper: betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ContractViolation("AdamHyper: eps must be positive");
  }
};

struct DenseAdamState {
  Matrix m;  // first moment, parameter shape
  Matrix v;  // second moment, parameter shape, entrywise >= 0
  std::uint64_t t = 0;

  static DenseAdamState zeros_like(const Matrix& p) { return {Matrix(p.rows, p.cols), Matrix(p.rows, p.cols), 0}; }
};

// Standard decoupled-weight-decay AdamW with bias correction.
inline void adamw_dense_step(Matrix& param, const Matrix& grad, DenseAdamState& st,
                             const AdamHyper& h) {
  h.validate();
  if (!param.same_shape(grad) || !param.same_shape(st.m) || !param.same_shape(st.v))
    throw ContractViolation("adamw_dense_step: shape mismatch");
  if (!all_finite(grad)) throw NumericalFailure("adamw_dense_step: non-finite gradient");
  st.t += 1;
  double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.t));
  for (std::size_t i = 0; i < param.a.size(); ++i) {
    double g = grad.a[i];
    st.m.a[i] = h.beta1 * st.m.a[i] + (1.0 - h.beta1) * g;
    st.v.a[i] = h.beta2 * st.v.a[i] + (1.0 - h.beta2) * g * g;
    double mhat = st.m.a[i] / bc1;
    double vhat = st.v.a[i] / bc2;
    param.a[i] -= h.lr * (mhat / (std::sqrt(vhat) + h.eps) + h.weight_decay * param.a[i]);
  }
}

// GaLore-style state: Adam moments live in a fixed out-by-k subspace defined
// by a retained projector (the V factor of the first step in each refresh
// window). On refresh the projector is replaced and moments (and their bias
// correction counter) reset to zero.
struct LowRankAdamState {
  Matrix projector;  // in x k
  Matrix m_lr;       // out x k
  Matrix v_lr;       // out x k
  std::size_t rank = 0;
  std::size_t refresh_period = 200;
  std::size_t age = 0;  // invariant: age < refresh_period
  std::uint64_t t = 0;  // local step counter, reset with the moments
  std::size_t reset_warnings = 0;
};

inline void galore_style_step(Matrix& param, const FactoredGradient& fg, LowRankAdamState& st,
                              const AdamHyper& h) {
  h.validate();
  if (fg.r.cols != fg.rank || fg.l.cols != fg.rank)
    throw ContractViolation("galore_style_step: inconsistent factored gradient");
  if (fg.l.rows != param.rows || fg.r.rows != param.cols)
    throw ContractViolation("galore_style_step: gradient factors do not match parameter shape");
  if (!all_finite(fg.l) || !all_finite(fg.r))
    throw NumericalFailure("galore_style_step: non-finite gradient");

  if (st.rank != 0 && st.rank != fg.rank) {
    // Rank changed under us: reset the window rather than projecting garbage.
    st.rank = 0;
    st.age = 0;
    st.reset_warnings += 1;
  }
  if (st.rank == 0) {
    st.rank = fg.rank;
    st.m_lr = Matrix(param.rows, fg.rank);
    st.v_lr = Matrix(param.rows, fg.rank);
    st.t = 0;
    st.age = 0;
  }
  if (st.age == 0) {
    st.projector = fg.r;
    for (double& x : st.m_lr.a) x = 0.0;
    for (double& x : st.v_lr.a) x = 0.0;
    st.t = 0;
  }

  // G_lr = (l r^T) * projector computed as l * (r^T projector): out x k only.
  Matrix g_lr = matmul(fg.l, matmul_tn(fg.r, st.projector));

  st.t += 1;
  double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.t));
  double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.t));
  Matrix dir(g_lr.rows, g_lr.cols);
  for (std::size_t i = 0; i < g_lr.a.size(); ++i) {
    double g = g_lr.a[i];
    st.m_lr.a[i] = h.beta1 * st.m_lr.a[i] + (1.0 - h.beta1) * g;
    st.v_lr.a[i] = h.beta2 * st.v_lr.a[i] + (1.0 - h.beta2) * g * g;
    dir.a[i] = (st.m_lr.a[i] / bc1) / (std::sqrt(st.v_lr.a[i] / bc2) + h.eps);
  }
  Matrix update = matmul_nt(dir, st.projector);  // out x in
  for (std::size_t i = 0; i < param.a.size(); ++i)
    param.a[i] -= h.lr * (update.a[i] + h.weight_decay * param.a[i]);

  st.age = (st.age + 1) % st.refresh_period;
}

// ---- optimizer state accounting ----

struct ParamShape {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool low_rank_eligible = false;  // linear weight updated through the projector path
};

struct OptimizerBytes {
  std::size_t moment_bytes = 0;
  std::size_t projector_bytes = 0;
  std::size_t total = 0;
  bool beneficial = true;  // false when low-rank states are not smaller than dense
};

inline OptimizerBytes dense_adam_bytes(const std::vector<ParamShape>& shapes, std::size_t word) {
  OptimizerBytes out;
  for (const auto& s : shapes) out.moment_bytes += 2 * s.rows * s.cols * word;
  out.total = out.moment_bytes;
  return out;
}

// Low-rank states: 2 * out*k per eligible linear weight plus its in*k
// projector; everything else keeps dense moments.
inline OptimizerBytes lowrank_adam_bytes(const std::vector<ParamShape>& shapes, std::size_t k,
                                         std::size_t word) {
  if (k == 0) throw ContractViolation("lowrank_adam_bytes: rank must be >= 1");
  OptimizerBytes out;
  std::size_t dense_equiv = 0;
  for (const auto& s : shapes) {
    dense_equiv += 2 * s.rows * s.cols * word;
    if (s.low_rank_eligible) {
      out.moment_bytes += 2 * s.rows * k * word;
      out.projector_bytes += s.cols * k * word;
    } else {
      out.moment_bytes += 2 * s.rows * s.cols * word;
    }
  }
  out.total = out.moment_bytes + out.projector_bytes;
  out.beneficial = out.total < dense_equiv;
  return out;
}

}  // namespace actcomp
