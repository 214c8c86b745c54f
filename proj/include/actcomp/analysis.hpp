#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "actcomp/config.hpp"
#include "actcomp/data.hpp"
#include "actcomp/model.hpp"
#include "actcomp/optim.hpp"
#include "actcomp/tape.hpp"

namespace actcomp {

// ---- finite-difference gradient check ----

struct GradCheckReport {
  double max_rel_dev = 0.0;
  std::string worst_param;
  std::size_t params_checked = 0;
};

// Central differences over every parameter entry against the tape backward.
// Relative deviation uses max(1, |g|, |fd|) as the scale so near-zero entries
// are compared absolutely.
inline GradCheckReport grad_check(Tape& t, const TokenBatch& batch, double h) {
  CompressionPolicy empty;
  forward(t, batch, empty, {});
  BackwardResult br = backward(t, {});

  GradCheckReport rep;
  for (Param& p : t.params) {
    const Matrix g = densify(br.grads.at(p.name));
    for (std::size_t i = 0; i < p.value.a.size(); ++i) {
      double orig = p.value.a[i];
      p.value.a[i] = orig + h;
      double lp = forward(t, batch, empty, {}).loss;
      p.value.a[i] = orig - h;
      double lm = forward(t, batch, empty, {}).loss;
      p.value.a[i] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double dev = std::abs(fd - g.a[i]) / std::max({1.0, std::abs(fd), std::abs(g.a[i])});
      if (dev > rep.max_rel_dev) {
        rep.max_rel_dev = dev;
        rep.worst_param = p.name;
      }
      rep.params_checked += 1;
    }
  }
  forward(t, batch, empty, {});  // leave the tape in a clean exact state
  return rep;
}

// ---- bias estimation (node-local Monte Carlo) ----

// A frozen node-local problem: the exact saved activation, the fixed incoming
// gradient, and whatever parameters the operator owns. Compression bias is a
// node-local statement, so trials only redo the node's backward.
struct BiasInstance {
  NodeKind kind = NodeKind::Linear;
  std::string label;
  Matrix x;     // exact saved activation (softmax: the saved output)
  Matrix g_z;   // incoming gradient, fixed across trials
  Matrix w;     // Linear
  Matrix gamma; // RMSNorm
  double eps = 1e-6;
};

struct NodeLocalGrads {
  std::optional<Matrix> g_w;
  Matrix g_x;
};

inline NodeLocalGrads node_local_backward(const BiasInstance& inst, const Matrix& x_hat) {
  switch (inst.kind) {
    case NodeKind::Linear: {
      LinearBackward lb = linear_backward(inst.g_z, x_hat, inst.w, false);
      return {std::move(lb.g_w), std::move(lb.g_x)};
    }
    case NodeKind::SiLU:
      return {std::nullopt, silu_backward(inst.g_z, x_hat)};
    case NodeKind::RMSNorm: {
      RmsNormBackward rb = rmsnorm_backward(inst.g_z, x_hat, inst.gamma, inst.eps);
      return {std::move(rb.g_gamma), std::move(rb.g_x)};
    }
    case NodeKind::SoftmaxRows:
      return {std::nullopt, softmax_backward(inst.g_z, x_hat)};
    default:
      throw ContractViolation("node_local_backward: unsupported kind");
  }
}

inline BiasInstance bias_instance_from_tape(Tape& t, int node_id, const TokenBatch& batch) {
  const Node& n = t.nodes.at(static_cast<std::size_t>(node_id));
  if (!kind_compressible(n.kind))
    throw ContractViolation("bias_instance_from_tape: node is not compressible");
  CompressionPolicy empty;
  forward(t, batch, empty, {});
  BackwardOptions bo;
  bo.record_incoming = true;
  BackwardResult br = backward(t, bo);
  BiasInstance inst;
  inst.kind = n.kind;
  inst.label = n.name;
  inst.x = t.slots.at(static_cast<std::size_t>(n.slot_a)).exact;
  inst.g_z = br.incoming.at(node_id);
  if (n.kind == NodeKind::Linear) inst.w = t.param(n.w).value;
  if (n.kind == NodeKind::RMSNorm) {
    inst.gamma = t.param(n.gamma).value;
    inst.eps = n.eps;
  }
  return inst;
}

struct BiasChannel {
  double bias_ratio = 0.0;  // ||mean(G_hat) - G||_F / ||G||_F
  double band = 0.0;        // 3 * std / (sqrt(n) * ||G||_F)
  double trial_std = 0.0;   // per-trial total standard deviation
};

struct BiasReport {
  std::string node;
  std::size_t trials = 0;
  std::optional<BiasChannel> weight;  // absent for operators without parameters
  BiasChannel input;
};

// n_trials independent compressions of the one node; everything else is held
// fixed. The CLT band is 3 sigma of the Monte Carlo mean.
inline BiasReport bias_estimate(const BiasInstance& inst, const CompressorSpec& spec,
                                std::size_t n_trials, std::uint64_t seed) {
  if (n_trials < 100) throw ContractViolation("bias_estimate: need at least 100 trials");
  NodeLocalGrads exact = node_local_backward(inst, inst.x);

  // Accumulate per-trial deviations from the exact gradient rather than raw
  // values: a trial that reproduces the exact arithmetic contributes exact
  // zeros, so the linear input-gradient channel reports bias 0, std 0.
  Matrix dev_x(exact.g_x.rows, exact.g_x.cols);
  double sq_x = 0.0;
  std::optional<Matrix> dev_w;
  double sq_w = 0.0;
  if (exact.g_w) dev_w = Matrix(exact.g_w->rows, exact.g_w->cols);

  for (std::size_t trial = 0; trial < n_trials; ++trial) {
    RngState rng = derive_stream(seed, stream_tag::analysis, trial);
    std::optional<FactoredActivation> f = compress(inst.x, spec, rng);
    Matrix x_hat = f ? reconstruct(*f) : inst.x;
    NodeLocalGrads g = node_local_backward(inst, x_hat);
    Matrix dx = sub(g.g_x, exact.g_x);
    add_inplace(dev_x, dx);
    double nx = frobenius_norm(dx);
    sq_x += nx * nx;
    if (dev_w) {
      Matrix dw = sub(*g.g_w, *exact.g_w);
      add_inplace(*dev_w, dw);
      double nw = frobenius_norm(dw);
      sq_w += nw * nw;
    }
  }

  auto channel = [&](const Matrix& dev_sum, double sumsq, const Matrix& ref) {
    BiasChannel ch;
    Matrix mean_dev = scale(dev_sum, 1.0 / static_cast<double>(n_trials));
    double refn = frobenius_norm(ref);
    double scale_ref = refn > 0 ? refn : 1.0;
    double m2 = frobenius_norm(mean_dev);
    double var = sumsq / static_cast<double>(n_trials) - m2 * m2;
    ch.trial_std = std::sqrt(std::max(0.0, var));
    ch.bias_ratio = m2 / scale_ref;
    ch.band = 3.0 * ch.trial_std / (std::sqrt(static_cast<double>(n_trials)) * scale_ref);
    return ch;
  };

  BiasReport rep;
  rep.node = inst.label;
  rep.trials = n_trials;
  rep.input = channel(dev_x, sq_x, exact.g_x);
  if (dev_w) rep.weight = channel(*dev_w, sq_w, *exact.g_w);
  return rep;
}

// Instance where the SiLU backward map has strong curvature so the
// second-order term of the bias expansion is bounded away from zero: entries
// sit near the curvature peak of silu' and the projection rank is small.
inline BiasInstance make_high_curvature_silu_instance() {
  BiasInstance inst;
  inst.kind = NodeKind::SiLU;
  inst.label = "constructed_silu";
  const std::size_t m = 4, d = 8;
  inst.x = Matrix(m, d);
  RngState rng(20240731);
  for (double& v : inst.x.a) v = 1.2 + 0.4 * rng.next_gaussian();
  inst.g_z = Matrix(m, d);
  for (double& v : inst.g_z.a) v = 1.0;
  return inst;
}

// ---- error propagation along upstream Jacobian chains ----

struct PropagationReport {
  std::string case_label;
  std::size_t compressed_op = 0;  // 1-based index into the chain
  double max_dev = 0.0;           // chain formula vs direct two-run subtraction
  double delta_at_source = 0.0;   // ||dG_X|| at the compressed node's input
};

// Chain tapes only (d <= 16, ops <= 4 per the explicit-Jacobian budget).
// Computes the upstream gradient error two ways — direct subtraction of two
// backward runs, and right-multiplication by the token-wise Jacobian chain —
// and returns the maximum elementwise deviation.
inline PropagationReport propagation_check(Tape& chain, std::size_t op_index_1based,
                                           const CompressorSpec& spec, const Matrix& input,
                                           std::uint64_t seed) {
  if (chain.is_transformer)
    throw ContractViolation("propagation_check: chain tapes only");
  if (op_index_1based < 1 || op_index_1based > chain.profile_chain.size())
    throw ContractViolation("propagation_check: op index out of range");
  if (input.cols > 16 || chain.profile_chain.size() > 4)
    throw ContractViolation("propagation_check: dims too large for explicit Jacobians");

  const std::size_t l = op_index_1based;
  int node_l = chain.profile_chain[l - 1];

  CompressionPolicy empty;
  BackwardOptions bo;
  bo.record_input_grads = true;

  forward(chain, input, empty, {});
  BackwardResult exact = backward(chain, bo);

  CompressionPolicy pol;
  pol.per_node[node_l] = spec;
  ForwardOptions fo;
  fo.seed = seed;
  fo.retain_exact = true;  // Jacobians need the exact saved activations
  forward(chain, input, pol, fo);
  BackwardResult comp = backward(chain, bo);

  std::vector<Matrix> direct;  // direct[i] = dG at op (i+1)'s input
  for (std::size_t i = 0; i < l; ++i) {
    int nid = chain.profile_chain[i];
    direct.push_back(sub(comp.input_grad.at(nid), exact.input_grad.at(nid)));
  }

  PropagationReport rep;
  rep.compressed_op = l;
  rep.delta_at_source = frobenius_norm(direct[l - 1]);

  Matrix cur = direct[l - 1];
  for (std::size_t i = l - 1; i-- > 0;) {
    // dG at op i+1's input = dG at op i+2's input * J^{i+1}, per token row.
    int nid = chain.profile_chain[i];
    Matrix first_j = tokenwise_jacobian(chain, nid, 0);
    Matrix chained(cur.rows, first_j.cols);
    for (std::size_t row = 0; row < cur.rows; ++row) {
      Matrix j = row == 0 ? first_j : tokenwise_jacobian(chain, nid, row);
      for (std::size_t b = 0; b < j.cols; ++b) {
        double acc = 0.0;
        for (std::size_t a = 0; a < j.rows; ++a) acc += cur.at(row, a) * j.at(a, b);
        chained.at(row, b) = acc;
      }
    }
    rep.max_dev = std::max(rep.max_dev, max_abs_diff(chained, direct[i]));
    cur = std::move(chained);
  }
  return rep;
}

// ---- Jacobian product profile ----

struct ProfileRow {
  std::size_t depth = 0;  // 1-based position in the per-token chain
  std::size_t token = 0;
  double fnorm = 0.0;
};

// Accumulates J^D * J^{D-1} * ... * J^i per sampled token over the tape's
// per-token operator chain and reports the Frobenius norm at every depth.
// Requires a forward pass with exact saved activations available.
inline std::vector<ProfileRow> jacobian_product_profile(const Tape& t,
                                                        const std::vector<std::size_t>& tokens) {
  if (!t.forward_done) throw ContractViolation("jacobian_product_profile: run forward first");
  std::vector<ProfileRow> rows;
  const std::size_t depth = t.profile_chain.size();
  for (std::size_t tok : tokens) {
    Matrix cur = tokenwise_jacobian(t, t.profile_chain[depth - 1], tok);
    rows.push_back({depth, tok, frobenius_norm(cur)});
    for (std::size_t i = depth - 1; i-- > 0;) {
      cur = matmul(cur, tokenwise_jacobian(t, t.profile_chain[i], tok));
      rows.push_back({i + 1, tok, frobenius_norm(cur)});
    }
  }
  return rows;
}

inline std::string profile_to_csv(const std::vector<ProfileRow>& rows) {
  std::string out = "depth,token_index,frobenius_norm\n";
  for (const ProfileRow& r : rows) {
    out += std::to_string(r.depth);
    out += ',';
    out += std::to_string(r.token);
    out += ',';
    out += format_double(r.fnorm);
    out += '\n';
  }
  return out;
}

// ---- variance decomposition ----

struct VarianceReport {
  std::size_t n_samples = 0;
  std::size_t batch_size = 0;
  std::size_t n_batches = 0;
  std::size_t comp_draws = 0;
  double h_constant = 0.0;          // exact finite-population S^2
  double var_gbar = 0.0;            // exact, all batches enumerated
  double var_g = 0.0;               // Monte Carlo over compression draws
  double var_g_se = 0.0;
  double comp_term = 0.0;           // MC mean ||g_comp - g_exact||^2
  double comp_term_analytic = 0.0;  // closed-form RP expectation, per batch
  double cross_term = 0.0;
  double cross_se = 0.0;
  double bound = 0.0;               // var_gbar + comp_term_analytic
  double residual_rel = 0.0;        // |var_g - var_gbar - comp_term| / var_g
  bool decomposition_ok = false;
  bool cross_ok = false;
  bool bound_ok = false;
};

namespace detail {

inline std::vector<double> flatten_grads(const Tape& t,
                                         const std::map<std::string, GradientValue>& grads) {
  std::vector<double> flat;
  for (const Param& p : t.params) {
    Matrix g = densify(grads.at(p.name));
    flat.insert(flat.end(), g.a.begin(), g.a.end());
  }
  return flat;
}

inline TokenBatch batch_from_samples(const Dataset& ds, const std::vector<std::size_t>& idx,
                                     std::size_t seq) {
  TokenBatch b;
  b.batch = idx.size();
  b.seq = seq;
  for (std::size_t i : idx) {
    const std::vector<int>& s = ds.sequences.at(i);
    b.inputs.insert(b.inputs.end(), s.begin(), s.end() - 1);
    b.targets.insert(b.targets.end(), s.begin() + 1, s.end());
  }
  return b;
}

inline double dot(const std::vector<double>& x, const std::vector<double>& y) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

}  // namespace detail

// Exact enumeration of every C(N, B) mini-batch for the sampling variance,
// Monte Carlo over compression draws for the rest. The policy must touch only
// Linear nodes (the hypothesis the decomposition needs); the compressor must
// be the unbiased Gaussian RP for the analytic bound term.
inline VarianceReport variance_decomposition(const Tape& model_tape, const Dataset& ds,
                                             std::size_t batch_size, std::size_t n_comp_draws,
                                             const CompressionConfig& cc, std::uint64_t seed) {
  const std::size_t n = ds.sequences.size();
  if (n > 64)
    throw ContractViolation(
        "variance_decomposition: N > 64 cannot be enumerated; shrink the dataset");
  if (batch_size < 1 || batch_size > n)
    throw ContractViolation("variance_decomposition: need 1 <= B <= N");

  const std::size_t seq = model_tape.model.seq_len;

  // Per-sample exact gradients.
  Tape t1 = clone_with_batch(model_tape, 1);
  CompressionPolicy empty;
  std::vector<std::vector<double>> per_sample(n);
  for (std::size_t i = 0; i < n; ++i) {
    TokenBatch b = detail::batch_from_samples(ds, {i}, seq);
    forward(t1, b, empty, {});
    per_sample[i] = detail::flatten_grads(t1, backward(t1, {}).grads);
  }
  const std::size_t dim = per_sample[0].size();

  std::vector<double> mu(dim, 0.0);
  for (const auto& g : per_sample)
    for (std::size_t k = 0; k < dim; ++k) mu[k] += g[k] / static_cast<double>(n);

  double s2 = 0.0;  // finite-population sample variance (the H constant)
  for (const auto& g : per_sample) {
    std::vector<double> d(dim);
    for (std::size_t k = 0; k < dim; ++k) d[k] = g[k] - mu[k];
    s2 += detail::dot(d, d);
  }
  s2 /= static_cast<double>(n - 1);

  // Enumerate batches.
  std::vector<std::vector<std::size_t>> batches;
  {
    std::vector<std::size_t> idx(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) idx[i] = i;
    while (true) {
      batches.push_back(idx);
      std::size_t i = batch_size;
      while (i-- > 0) {
        if (idx[i] != i + n - batch_size) {
          ++idx[i];
          for (std::size_t j = i + 1; j < batch_size; ++j) idx[j] = idx[j - 1] + 1;
          break;
        }
        if (i == 0) goto done;
      }
    }
  done:;
  }

  Tape tb = clone_with_batch(model_tape, batch_size);
  CompressionPolicy policy = make_policy(tb, cc);
  if (policy.empty() && !cc.groups.empty() &&
      !(cc.groups.size() == 1 && cc.groups[0] == "SFT"))
    throw ContractViolation("variance_decomposition: policy resolved to no nodes");
  bool all_rp = true;
  for (const auto& [nid, spec] : policy.per_node) {
    if (tb.nodes[static_cast<std::size_t>(nid)].kind != NodeKind::Linear)
      throw ContractViolation(
          "variance_decomposition: the decomposition's hypothesis needs a Linear-only policy");
    if (spec.kind != CompressorKind::GaussianRP) all_rp = false;
  }

  VarianceReport rep;
  rep.n_samples = n;
  rep.batch_size = batch_size;
  rep.n_batches = batches.size();

  const std::size_t inner =
      policy.empty() ? 1 : std::max<std::size_t>(1, n_comp_draws / batches.size());
  double sum_dev2 = 0.0, sum_dev4 = 0.0;
  std::vector<double> sum_dev(dim, 0.0);
  double sum_delta2 = 0.0;
  double sum_cross = 0.0, sum_cross2 = 0.0;
  double var_gbar = 0.0;
  double analytic = 0.0;
  std::size_t total_draws = 0;
  std::uint64_t draw_counter = 0;

  BackwardOptions rec;
  rec.record_incoming = true;

  for (const auto& bidx : batches) {
    TokenBatch b = detail::batch_from_samples(ds, bidx, seq);
    forward(tb, b, empty, {});  // exact slots retained for redraws
    BackwardResult exact_b = backward(tb, rec);
    std::vector<double> gbar = detail::flatten_grads(tb, exact_b.grads);

    std::vector<double> gb_dev(dim);
    for (std::size_t k = 0; k < dim; ++k) gb_dev[k] = gbar[k] - mu[k];
    var_gbar += detail::dot(gb_dev, gb_dev) / static_cast<double>(batches.size());

    // Closed-form RP bound term: E||C (P P^T - I)||_F^2 = (d+1)/k * ||C||_F^2
    // with C = G_Z^T X, summed over the compressed linear operators.
    if (all_rp && !policy.empty()) {
      double term = 0.0;
      for (const auto& [nid, spec] : policy.per_node) {
        const Node& node = tb.nodes[static_cast<std::size_t>(nid)];
        const SlotState& s = tb.slots[static_cast<std::size_t>(node.slot_a)];
        Matrix c = matmul_tn(exact_b.incoming.at(nid), s.exact);
        double cf = frobenius_norm(c);
        term += (static_cast<double>(s.saved_cols) + 1.0) / static_cast<double>(spec.rank) * cf * cf;
      }
      analytic += term / static_cast<double>(batches.size());
    }

    for (std::size_t d = 0; d < inner; ++d) {
      std::vector<double> g;
      if (policy.empty()) {
        g = gbar;
      } else {
        recompress_slots(tb, policy, seed, draw_counter++);
        g = detail::flatten_grads(tb, backward(tb, {}).grads);
      }
      double dev2 = 0.0, delta2 = 0.0, cross = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        double dev = g[k] - mu[k];
        double delta = g[k] - gbar[k];
        sum_dev[k] += dev;
        dev2 += dev * dev;
        delta2 += delta * delta;
        cross += gb_dev[k] * delta;
      }
      cross *= 2.0;
      sum_dev2 += dev2;
      sum_dev4 += dev2 * dev2;
      sum_delta2 += delta2;
      sum_cross += cross;
      sum_cross2 += cross * cross;
      total_draws += 1;
    }
  }

  const double tt = static_cast<double>(total_draws);
  double mean_dev2 = sum_dev2 / tt;
  double mean_norm2 = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    double m = sum_dev[k] / tt;
    mean_norm2 += m * m;
  }
  rep.comp_draws = total_draws;
  rep.h_constant = s2;
  rep.var_gbar = var_gbar;
  rep.var_g = mean_dev2 - mean_norm2;
  rep.var_g_se = std::sqrt(std::max(0.0, sum_dev4 / tt - mean_dev2 * mean_dev2) / tt);
  rep.comp_term = sum_delta2 / tt;
  rep.comp_term_analytic = all_rp ? analytic : std::numeric_limits<double>::quiet_NaN();
  rep.cross_term = sum_cross / tt;
  rep.cross_se = std::sqrt(std::max(0.0, sum_cross2 / tt - rep.cross_term * rep.cross_term) / tt);
  rep.bound = var_gbar + (all_rp ? analytic : rep.comp_term);
  double resid = std::abs(rep.var_g - rep.var_gbar - rep.comp_term);
  rep.residual_rel = rep.var_g > 0 ? resid / rep.var_g : 0.0;
  rep.decomposition_ok = rep.residual_rel <= 0.05;
  rep.cross_ok = rep.cross_se == 0.0 ? rep.cross_term == 0.0
                                     : std::abs(rep.cross_term) <= 3.0 * rep.cross_se;
  // The bound is tight (equality) at the population level, so the empirical
  // comparison carries the Monte Carlo 3-sigma band of var_g.
  rep.bound_ok = rep.var_g <= rep.bound + 3.0 * rep.var_g_se;
  return rep;
}

// ---- convergence bound ratio ----

struct ConvergenceBoundInputs {
  double smoothness_l = 1.0;  // L
  double opt_gap = 1.0;       // Delta
  double steps_t = 1000.0;    // T
  double grad_bound = 1.0;    // G
  double batch = 1.0;         // B
  double sampling_var = 1.0;  // V_D
  double sum_dx2 = 0.0;       // sum over operators of E||dX||_F^2

  void validate() const {
    if (!(smoothness_l > 0) || !(opt_gap > 0) || !(steps_t > 0) || !(grad_bound > 0) ||
        !(batch > 0) || !(sampling_var > 0) || sum_dx2 < 0)
      throw ContractViolation("ConvergenceBoundInputs: inputs must be positive (sum_dx2 >= 0)");
  }
};

struct ConvergenceBoundResult {
  double a = 0, b = 0, c = 0;
  double v_c = 0;
  double ratio_pre = 0;    // (a + c) / (a + b)
  double ratio_bound = 0;  // 1 + (V_C / V_D)^{1/4}
  bool consistent = false;
};

inline ConvergenceBoundResult convergence_ratio_bound(const ConvergenceBoundInputs& in) {
  in.validate();
  ConvergenceBoundResult r;
  double ldt = in.smoothness_l * in.opt_gap / in.steps_t;
  r.a = std::sqrt(2.0 * ldt);
  r.b = std::pow(8.0 * in.sampling_var * ldt, 0.25);
  r.v_c = in.grad_bound * in.grad_bound * in.sum_dx2 / (in.batch * in.batch);
  r.c = std::pow(8.0 * (in.sampling_var + r.v_c) * ldt, 0.25);
  r.ratio_pre = (r.a + r.c) / (r.a + r.b);
  r.ratio_bound = 1.0 + std::pow(r.v_c / in.sampling_var, 0.25);
  r.consistent = r.ratio_pre <= r.ratio_bound;
  return r;
}

// ---- memory accounting ----

struct MemoryBreakdown {
  std::size_t model = 0;
  std::size_t nonlinear_activations = 0;
  std::size_t linear_activations = 0;
  std::size_t optimizer_states = 0;
  std::size_t gradients = 0;
  std::size_t others = 0;
  std::size_t total = 0;
  bool rank_beneficial = true;  // false when some factored tensor is not smaller than dense
};

namespace detail {

// Mirrors compress(): what shape ends up stored for a slot of shape m x d
// under the given spec. Returns bytes and whether it is factored.
inline std::pair<std::size_t, bool> slot_bytes(std::size_t m, std::size_t d,
                                               const CompressorSpec* spec, std::size_t word) {
  if (!spec) return {m * d * word, false};
  switch (spec->kind) {
    case CompressorKind::None:
      if (std::min(m, d) > spec->rank) return {m * d * word, false};
      return {(m + d) * std::min(m, d) * word, true};
    case CompressorKind::RSVD:
    case CompressorKind::GaussianRP:
      return {(m + d) * spec->rank * word, true};
  }
  return {m * d * word, false};
}

inline const Node* node_for_weight(const Tape& t, int param_id) {
  for (const Node& n : t.nodes)
    if (n.w == param_id) return &n;
  return nullptr;
}

}  // namespace detail

// Analytic accountant: category bytes computed from declared shapes and the
// policy's formulas, not from the stored tensors. Requires a completed forward
// so slot shapes are known.
inline MemoryBreakdown memory_breakdown(const Tape& t, const CompressionPolicy& policy,
                                        const std::string& strategy, bool cocompress,
                                        std::size_t word, std::size_t others_bytes) {
  if (!t.forward_done) throw ContractViolation("memory_breakdown: run forward first");
  MemoryBreakdown mb;
  mb.others = others_bytes;
  for (const Param& p : t.params) mb.model += p.value.numel() * word;

  for (std::size_t sl = 0; sl < t.slots.size(); ++sl) {
    const SlotState& s = t.slots[sl];
    if (!s.filled) continue;
    const CompressorSpec* spec = detail::slot_spec(t, static_cast<int>(sl), policy);
    auto [bytes, factored] = detail::slot_bytes(s.saved_rows, s.saved_cols, spec, word);
    if (factored && bytes >= s.saved_rows * s.saved_cols * word) mb.rank_beneficial = false;
    const auto& owners = t.slot_meta[sl].owners;
    bool linear_owner =
        !owners.empty() &&
        t.nodes[static_cast<std::size_t>(owners.front())].kind == NodeKind::Linear;
    if (linear_owner)
      mb.linear_activations += bytes;
    else
      mb.nonlinear_activations += bytes;
  }

  for (std::size_t pid = 0; pid < t.params.size(); ++pid) {
    const Param& p = t.params[pid];
    bool factored_grad = false;
    std::size_t rank = 0;
    if (p.is_linear_weight) {
      const Node* n = detail::node_for_weight(t, static_cast<int>(pid));
      if (n && n->slot_a >= 0) {
        const SlotState& s = t.slots[static_cast<std::size_t>(n->slot_a)];
        const CompressorSpec* spec = detail::slot_spec(t, n->slot_a, policy);
        auto [bytes, fac] = detail::slot_bytes(s.saved_rows, s.saved_cols, spec, word);
        (void)bytes;
        factored_grad = fac;
        if (fac)
          rank = spec->kind == CompressorKind::None ? std::min(s.saved_rows, s.saved_cols)
                                                    : spec->rank;
      }
    }
    if (cocompress && factored_grad) {
      std::size_t bytes = (p.value.rows + p.value.cols) * rank * word;
      if (bytes >= p.value.numel() * word) mb.rank_beneficial = false;
      mb.gradients += bytes;
      // Low-rank optimizer states use the gradient's rank.
      if (strategy == "galore_style") {
        mb.optimizer_states += (2 * p.value.rows + p.value.cols) * rank * word;
        continue;
      }
    } else {
      mb.gradients += p.value.numel() * word;
    }
    mb.optimizer_states += 2 * p.value.numel() * word;
  }

  mb.total = mb.model + mb.nonlinear_activations + mb.linear_activations + mb.optimizer_states +
             mb.gradients + mb.others;
  return mb;
}

// Independent recount: walks the live tensors (params, saved slots, gradient
// values, optimizer states) and sums their declared shapes.
inline MemoryBreakdown memory_recount(const Tape& t,
                                      const std::map<std::string, GradientValue>& grads,
                                      const std::map<std::string, DenseAdamState>& dense_states,
                                      const std::map<std::string, LowRankAdamState>& lowrank_states,
                                      std::size_t word, std::size_t others_bytes) {
  MemoryBreakdown mb;
  mb.others = others_bytes;
  for (const Param& p : t.params) mb.model += p.value.numel() * word;

  for (std::size_t sl = 0; sl < t.slots.size(); ++sl) {
    const SlotState& s = t.slots[sl];
    if (!s.filled) continue;
    std::size_t bytes =
        s.factored ? (s.fac->u.numel() + s.fac->v.numel()) * word : s.exact.numel() * word;
    const auto& owners = t.slot_meta[sl].owners;
    bool linear_owner =
        !owners.empty() &&
        t.nodes[static_cast<std::size_t>(owners.front())].kind == NodeKind::Linear;
    if (linear_owner)
      mb.linear_activations += bytes;
    else
      mb.nonlinear_activations += bytes;
  }

  for (const auto& [name, g] : grads) {
    if (std::holds_alternative<Matrix>(g))
      mb.gradients += std::get<Matrix>(g).numel() * word;
    else {
      const FactoredGradient& fg = std::get<FactoredGradient>(g);
      mb.gradients += (fg.l.numel() + fg.r.numel()) * word;
    }
  }
  for (const auto& [name, st] : dense_states)
    mb.optimizer_states += (st.m.numel() + st.v.numel()) * word;
  for (const auto& [name, st] : lowrank_states)
    mb.optimizer_states +=
        (st.projector.numel() + st.m_lr.numel() + st.v_lr.numel()) * word;

  mb.total = mb.model + mb.nonlinear_activations + mb.linear_activations + mb.optimizer_states +
             mb.gradients + mb.others;
  return mb;
}

// ---- exactness (linear input gradients + co-compression identity) ----

struct ExactnessReport {
  double max_incoming_rel_err = 0.0;  // over all nodes, policies of Linear subsets
  std::size_t policies_tested = 0;
  double cocompress_max_rel_err = 0.0;
  std::size_t cocompress_rank_violations = 0;
  std::size_t cocompress_draws = 0;
  bool pass = false;
};

inline double max_incoming_deviation(Tape& t, const TokenBatch& batch,
                                     const CompressionPolicy& policy, std::uint64_t seed) {
  CompressionPolicy empty;
  BackwardOptions bo;
  bo.record_incoming = true;
  forward(t, batch, empty, {});
  BackwardResult ref = backward(t, bo);
  ForwardOptions fo;
  fo.seed = seed;
  forward(t, batch, policy, fo);
  BackwardResult got = backward(t, bo);
  double worst = 0.0;
  for (const auto& [nid, g] : ref.incoming)
    worst = std::max(worst, rel_fro_err(got.incoming.at(nid), g));
  return worst;
}

inline ExactnessReport cocompress_exactness(std::size_t draws, std::uint64_t seed) {
  ExactnessReport rep;
  rep.cocompress_draws = draws;
  for (std::size_t i = 0; i < draws; ++i) {
    RngState rng = derive_stream(seed, stream_tag::analysis, 7000 + i);
    std::size_t m = 2 + rng.next_below(63);
    std::size_t out = 2 + rng.next_below(63);
    std::size_t in = 2 + rng.next_below(63);
    std::size_t k = 1 + rng.next_below(16);
    Matrix g_z = gaussian_matrix(m, out, 1.0, rng);
    FactoredActivation f{gaussian_matrix(m, k, 1.0, rng), gaussian_matrix(in, k, 1.0, rng), k};
    FactoredGradient fg = cocompress_backward(g_z, f);
    Matrix dense = matmul_tn(g_z, reconstruct(f));
    Matrix recon = reconstruct_gradient(fg);
    rep.cocompress_max_rel_err = std::max(rep.cocompress_max_rel_err, rel_fro_err(recon, dense));
    SvdResult sv = svd_small(recon);
    double smax = sv.s.empty() ? 0.0 : sv.s[0];
    std::size_t nrank = 0;
    for (double s : sv.s)
      if (s > 1e-10 * smax) ++nrank;
    if (nrank > k) rep.cocompress_rank_violations += 1;
  }
  return rep;
}

// ---- compressor quality (RSVD vs RP ordering) ----

struct CompressorQualityReport {
  std::size_t seeds = 0;
  double mean_rsvd_err = 0.0;
  double mean_rp_err = 0.0;
  double rsvd_exactness_max_rel = 0.0;  // on rank <= k inputs
  bool ordering_ok = false;
  bool exactness_ok = false;
};

// Spectrally decaying test matrix: random orthogonal factors, geometric
// singular values.
inline Matrix decaying_spectrum_matrix(std::size_t m, std::size_t d, double decay,
                                       RngState& rng) {
  Matrix qu = qr_thin(gaussian_matrix(m, std::min(m, d), 1.0, rng)).q;
  Matrix qv = qr_thin(gaussian_matrix(d, std::min(m, d), 1.0, rng)).q;
  Matrix scaled(qu.rows, qu.cols);
  double s = 1.0;
  for (std::size_t j = 0; j < qu.cols; ++j, s *= decay)
    for (std::size_t i = 0; i < qu.rows; ++i) scaled.at(i, j) = qu.at(i, j) * s;
  return matmul_nt(scaled, qv);
}

inline CompressorQualityReport compressor_quality(std::size_t n_seeds, std::size_t rank,
                                                  std::uint64_t seed) {
  CompressorQualityReport rep;
  rep.seeds = n_seeds;
  for (std::size_t i = 0; i < n_seeds; ++i) {
    RngState rng = derive_stream(seed, stream_tag::analysis, 9000 + i);
    Matrix x = decaying_spectrum_matrix(32, 16, 0.7, rng);
    RngState r1 = derive_stream(seed, stream_tag::analysis, 9500 + i);
    FactoredActivation fr = rsvd(x, rank, 8, 1, r1);
    rep.mean_rsvd_err += activation_error(x, fr) / static_cast<double>(n_seeds);
    RngState r2 = derive_stream(seed, stream_tag::analysis, 9700 + i);
    FactoredActivation fp = gaussian_rp(x, rank, r2);
    rep.mean_rp_err += activation_error(x, fp) / static_cast<double>(n_seeds);

    // Exactness on a rank-<=k input.
    Matrix a = gaussian_matrix(24, rank, 1.0, rng);
    Matrix b = gaussian_matrix(rank, 12, 1.0, rng);
    Matrix low = matmul(a, b);
    RngState r3 = derive_stream(seed, stream_tag::analysis, 9900 + i);
    FactoredActivation fe = rsvd(low, rank, std::min<std::size_t>(8, 12 - rank), 1, r3);
    rep.rsvd_exactness_max_rel =
        std::max(rep.rsvd_exactness_max_rel,
                 activation_error(low, fe) / std::max(1e-300, frobenius_norm(low)));
  }
  rep.ordering_ok = rep.mean_rsvd_err < rep.mean_rp_err;
  rep.exactness_ok = rep.rsvd_exactness_max_rel <= 1e-10;
  return rep;
}

// ---- per-node gradient error report ----

struct NodeGradientError {
  std::string node;
  double input_grad_err = 0.0;  // vs the reference run
  double weight_grad_err = 0.0; // 0 for parameterless nodes
};

// Frobenius errors of a compressed run against reference gradients, per node
// input and per parameter.
inline std::vector<NodeGradientError> gradient_error(Tape& t, const TokenBatch& batch,
                                                     const CompressionPolicy& policy,
                                                     const BackwardResult& reference,
                                                     std::uint64_t seed) {
  ForwardOptions fo;
  fo.seed = seed;
  forward(t, batch, policy, fo);
  BackwardOptions bo;
  bo.record_input_grads = true;
  BackwardResult got = backward(t, bo);

  std::vector<NodeGradientError> out;
  for (const Node& n : t.nodes) {
    if (!got.input_grad.count(n.id)) continue;
    NodeGradientError e;
    e.node = n.name;
    e.input_grad_err = frobenius_dist(got.input_grad.at(n.id), reference.input_grad.at(n.id));
    if (n.w >= 0)
      e.weight_grad_err = frobenius_dist(densify(got.grads.at(t.param(n.w).name)),
                                         densify(reference.grads.at(t.param(n.w).name)));
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace actcomp
