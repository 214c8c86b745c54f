#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "actcomp/cocompress.hpp"
#include "actcomp/compress.hpp"
#include "actcomp/ops.hpp"
#include "actcomp/rng.hpp"

namespace actcomp {

// Recorded-graph engine: forward computes every output exactly, compresses
// designated activations at save time, and backward runs off the saved
// (possibly reconstructed) tensors in exact reverse order.

enum class NodeKind {
  Input,        // placeholder fed by the caller (chain tapes)
  Embedding,    // token ids -> rows of the embedding table
  Linear,       // Z = X W^T (+ bias); saves its input
  SiLU,         // saves its input
  RMSNorm,      // saves its input
  SoftmaxRows,  // saves its OUTPUT
  SliceBlock,   // row/column block view; saves nothing
  MatMulNT,     // scale * A B^T; saves both inputs (attention scores)
  MatMulNN,     // A B; saves both inputs (attention context)
  Add,          // residual; saves nothing
  Assemble,     // places blocks into a larger matrix; saves nothing
  CrossEntropy, // saves probabilities (+ targets held on the tape)
  DotLoss       // <C, X>; analysis-only scalar head for chain tapes
};

inline const char* kind_name(NodeKind k) {
  switch (k) {
    case NodeKind::Input: return "input";
    case NodeKind::Embedding: return "embedding";
    case NodeKind::Linear: return "linear";
    case NodeKind::SiLU: return "silu";
    case NodeKind::RMSNorm: return "rmsnorm";
    case NodeKind::SoftmaxRows: return "softmax";
    case NodeKind::SliceBlock: return "slice";
    case NodeKind::MatMulNT: return "matmul_nt";
    case NodeKind::MatMulNN: return "matmul_nn";
    case NodeKind::Add: return "add";
    case NodeKind::Assemble: return "assemble";
    case NodeKind::CrossEntropy: return "cross_entropy";
    case NodeKind::DotLoss: return "dot_loss";
  }
  return "?";
}

// Only the four operator kinds of the analysis are policy-addressable.
inline bool kind_compressible(NodeKind k) {
  return k == NodeKind::Linear || k == NodeKind::SiLU || k == NodeKind::RMSNorm ||
         k == NodeKind::SoftmaxRows;
}

struct Node {
  NodeKind kind = NodeKind::Input;
  int id = -1;
  std::string name;
  std::vector<int> in;  // producer node ids

  int w = -1;      // Linear weight param id
  int b = -1;      // Linear bias param id (-1 when absent)
  int gamma = -1;  // RMSNorm scale param id
  int table = -1;  // Embedding table param id

  int slot_a = -1;  // primary saved slot (kind-specific role)
  int slot_b = -1;  // secondary saved slot (MatMul second operand)

  std::size_t r0 = 0, r1 = 0, c0 = 0, c1 = 0;              // SliceBlock range
  std::vector<std::array<std::size_t, 2>> places;          // Assemble offsets
  std::size_t asm_rows = 0, asm_cols = 0;                  // Assemble target shape
  double scale = 1.0;                                      // MatMulNT
  double eps = 1e-6;                                       // RMSNorm
  Matrix dot_c;                                            // DotLoss coefficients
};

struct Param {
  std::string name;
  Matrix value;
  bool is_linear_weight = false;
};

// A saved tensor. Slots may be shared: the Q/K/V projections save one input,
// and an attention softmax's saved output is the same tensor the P*V product
// saves. A slot is compressed when any of its owning nodes is in the policy.
struct SlotMeta {
  std::vector<int> owners;  // policy-addressable saver node ids; empty = always exact
};

struct SlotState {
  bool filled = false;
  bool factored = false;
  Matrix exact;  // present when not factored, or when retain_exact was set
  std::optional<FactoredActivation> fac;
  double dx_fnorm = 0.0;  // ||X_hat - X||_F recorded at save time
  double x_fnorm = 0.0;
  std::size_t saved_rows = 0, saved_cols = 0;
};

struct CompressionPolicy {
  std::map<int, CompressorSpec> per_node;
  bool empty() const { return per_node.empty(); }
};

struct ModelConfig {
  std::size_t depth = 1;
  std::size_t d_model = 8;
  std::size_t n_heads = 2;
  std::size_t d_ff = 16;
  std::size_t vocab = 8;
  std::size_t seq_len = 4;
  std::size_t batch = 1;
  double init_std = 0.08;
  double rms_eps = 1e-6;

  void validate() const {
    if (depth < 1 || d_model < 1 || n_heads < 1 || d_ff < 1 || seq_len < 1 || batch < 1)
      throw ConfigError("ModelConfig: all dimensions must be positive");
    if (vocab < 2) throw ConfigError("ModelConfig: vocab must be >= 2");
    if (d_model % n_heads != 0) throw ConfigError("ModelConfig: d_model must divide by n_heads");
  }
};

struct TokenBatch {
  std::vector<int> inputs;   // batch*seq ids, row-major per sample
  std::vector<int> targets;  // batch*seq ids
  std::size_t batch = 0;
  std::size_t seq = 0;
};

struct Tape {
  ModelConfig model;
  bool is_transformer = false;
  std::uint64_t build_seed = 0;

  std::vector<Node> nodes;
  std::vector<Param> params;
  std::map<std::string, int> param_index;
  std::vector<SlotMeta> slot_meta;
  std::map<std::string, std::vector<int>> groups;  // Table-1 label -> node ids
  std::vector<int> profile_chain;                  // per-token ops, forward order
  int input_node = -1;
  int loss_node = -1;

  // Per-forward state.
  std::vector<SlotState> slots;
  std::vector<std::pair<std::size_t, std::size_t>> out_shape;
  std::vector<int> cur_inputs;
  std::vector<int> cur_targets;
  double last_loss = 0.0;
  bool forward_done = false;

  int add_param(std::string name, Matrix value, bool is_linear_weight = false) {
    if (param_index.count(name)) throw ContractViolation("Tape: duplicate param " + name);
    int id = static_cast<int>(params.size());
    param_index[name] = id;
    params.push_back({std::move(name), std::move(value), is_linear_weight});
    return id;
  }

  int add_slot(std::vector<int> owners) {
    slot_meta.push_back({std::move(owners)});
    return static_cast<int>(slot_meta.size()) - 1;
  }

  int add_node(Node n) {
    n.id = static_cast<int>(nodes.size());
    nodes.push_back(std::move(n));
    return nodes.back().id;
  }

  const Param& param(int id) const { return params.at(static_cast<std::size_t>(id)); }
  Param& param(int id) { return params.at(static_cast<std::size_t>(id)); }
};

inline void validate_policy(const Tape& t, const CompressionPolicy& policy) {
  for (const auto& [nid, spec] : policy.per_node) {
    if (nid < 0 || nid >= static_cast<int>(t.nodes.size()))
      throw ConfigError("policy: unknown node id " + std::to_string(nid));
    const Node& n = t.nodes[static_cast<std::size_t>(nid)];
    if (!kind_compressible(n.kind))
      throw ConfigError("policy: node '" + n.name + "' (" + kind_name(n.kind) +
                        ") does not save a compressible activation");
    spec.validate();
  }
}

// Builds a per-node policy from Table-1 group labels. Overlapping groups must
// agree on the spec.
inline CompressionPolicy policy_from_groups(
    const Tape& t, const std::vector<std::pair<std::string, CompressorSpec>>& groups) {
  CompressionPolicy p;
  for (const auto& [label, spec] : groups) {
    auto it = t.groups.find(label);
    if (it == t.groups.end()) throw ConfigError("policy: unknown operator group '" + label + "'");
    for (int nid : it->second) {
      auto [pos, inserted] = p.per_node.emplace(nid, spec);
      if (!inserted && !(pos->second == spec))
        throw ConfigError("policy: node '" + t.nodes[static_cast<std::size_t>(nid)].name +
                          "' appears in two groups with different specs");
    }
  }
  validate_policy(t, p);
  return p;
}

struct ForwardOptions {
  std::uint64_t seed = 42;
  std::uint64_t draw_id = 0;   // one compression draw per node per forward
  bool retain_exact = false;   // analysis mode: keep the exact tensor alongside factors
};

struct ForwardResult {
  double loss = 0.0;
  double mean_dx_fnorm = 0.0;  // mean ||dX||_F over factored slots
  std::size_t factored_slots = 0;
};

using GradientValue = std::variant<Matrix, FactoredGradient>;

inline Matrix densify(const GradientValue& g) {
  if (std::holds_alternative<Matrix>(g)) return std::get<Matrix>(g);
  return reconstruct_gradient(std::get<FactoredGradient>(g));
}

inline double gradient_value_fnorm(const GradientValue& g) {
  if (std::holds_alternative<Matrix>(g)) return frobenius_norm(std::get<Matrix>(g));
  return factored_gradient_fnorm(std::get<FactoredGradient>(g));
}

struct BackwardOptions {
  bool cocompress = false;
  bool record_incoming = false;     // node id -> G_Z (gradient w.r.t. node output)
  bool record_input_grads = false;  // node id -> gradient this node sends to its first input
};

struct BackwardResult {
  std::map<std::string, GradientValue> grads;
  std::map<int, Matrix> incoming;
  std::map<int, Matrix> input_grad;
  double grad_fnorm = 0.0;
};

namespace detail {

// Resolve which spec (if any) compresses a slot under the policy. All owning
// nodes present in the policy must agree.
inline const CompressorSpec* slot_spec(const Tape& t, int slot, const CompressionPolicy& policy) {
  const CompressorSpec* found = nullptr;
  for (int owner : t.slot_meta[static_cast<std::size_t>(slot)].owners) {
    auto it = policy.per_node.find(owner);
    if (it == policy.per_node.end()) continue;
    if (found && !(*found == it->second))
      throw ConfigError("policy: sharing nodes disagree on the compressor for one saved tensor");
    found = &it->second;
  }
  return found;
}

inline void save_slot(Tape& t, int slot, const Matrix& x, const CompressionPolicy& policy,
                      const ForwardOptions& o) {
  if (slot < 0) return;
  SlotState& s = t.slots[static_cast<std::size_t>(slot)];
  if (s.filled) return;  // shared slot already saved by a sibling
  s.filled = true;
  s.saved_rows = x.rows;
  s.saved_cols = x.cols;
  s.x_fnorm = frobenius_norm(x);
  const CompressorSpec* spec = slot_spec(t, slot, policy);
  if (spec) {
    int owner = t.slot_meta[static_cast<std::size_t>(slot)].owners.front();
    RngState rng = derive_stream(o.seed, stream_tag::node_compress, o.draw_id,
                                 static_cast<std::uint64_t>(owner));
    std::optional<FactoredActivation> f = compress(x, *spec, rng);
    if (f) {
      s.dx_fnorm = activation_error(x, *f);
      s.fac = std::move(*f);
      s.factored = true;
      if (o.retain_exact) s.exact = x;
      return;
    }
  }
  s.exact = x;
}

inline const Matrix& saved_matrix(const Tape& t, int slot,
                                  std::vector<std::optional<Matrix>>& recon_cache) {
  const SlotState& s = t.slots.at(static_cast<std::size_t>(slot));
  if (!s.filled) throw ContractViolation("backward: missing saved activation");
  if (s.factored) {
    auto& cached = recon_cache[static_cast<std::size_t>(slot)];
    if (!cached) cached = reconstruct(*s.fac);
    return *cached;
  }
  return s.exact;
}

}  // namespace detail

inline ForwardResult forward_impl(Tape& t, const Matrix* input, const TokenBatch* batch,
                                  const CompressionPolicy& policy, const ForwardOptions& o) {
  validate_policy(t, policy);
  t.slots.assign(t.slot_meta.size(), SlotState{});
  t.out_shape.assign(t.nodes.size(), {0, 0});
  if (batch) {
    if (!t.is_transformer) throw ContractViolation("forward: this tape takes a matrix input");
    if (batch->batch != t.model.batch || batch->seq != t.model.seq_len)
      throw ContractViolation("forward: batch geometry does not match the tape");
    if (batch->inputs.size() != batch->batch * batch->seq ||
        batch->targets.size() != batch->batch * batch->seq)
      throw ContractViolation("forward: token buffers have the wrong length");
    for (int v : batch->inputs)
      if (v < 0 || static_cast<std::size_t>(v) >= t.model.vocab)
        throw ContractViolation("forward: token id out of range");
    t.cur_inputs = batch->inputs;
    t.cur_targets = batch->targets;
  } else {
    if (t.is_transformer) throw ContractViolation("forward: this tape takes a token batch");
    if (!input) throw ContractViolation("forward: missing input");
  }

  std::vector<Matrix> outs(t.nodes.size());
  double loss = 0.0;

  for (const Node& n : t.nodes) {
    switch (n.kind) {
      case NodeKind::Input:
        outs[n.id] = *input;
        break;
      case NodeKind::Embedding: {
        const Matrix& e = t.param(n.table).value;
        Matrix x(t.cur_inputs.size(), e.cols);
        for (std::size_t r = 0; r < t.cur_inputs.size(); ++r) {
          std::size_t tok = static_cast<std::size_t>(t.cur_inputs[r]);
          for (std::size_t j = 0; j < e.cols; ++j) x.at(r, j) = e.at(tok, j);
        }
        outs[n.id] = std::move(x);
        break;
      }
      case NodeKind::Linear: {
        const Matrix& x = outs[n.in[0]];
        detail::save_slot(t, n.slot_a, x, policy, o);
        const Matrix* bias = n.b >= 0 ? &t.param(n.b).value : nullptr;
        outs[n.id] = linear_forward(x, t.param(n.w).value, bias);
        break;
      }
      case NodeKind::SiLU: {
        const Matrix& x = outs[n.in[0]];
        detail::save_slot(t, n.slot_a, x, policy, o);
        outs[n.id] = silu_forward(x);
        break;
      }
      case NodeKind::RMSNorm: {
        const Matrix& x = outs[n.in[0]];
        detail::save_slot(t, n.slot_a, x, policy, o);
        outs[n.id] = rmsnorm_forward(x, t.param(n.gamma).value, n.eps);
        break;
      }
      case NodeKind::SoftmaxRows: {
        Matrix s = softmax_forward(outs[n.in[0]]);
        detail::save_slot(t, n.slot_a, s, policy, o);
        outs[n.id] = std::move(s);
        break;
      }
      case NodeKind::SliceBlock: {
        const Matrix& x = outs[n.in[0]];
        Matrix y(n.r1 - n.r0, n.c1 - n.c0);
        for (std::size_t i = 0; i < y.rows; ++i)
          for (std::size_t j = 0; j < y.cols; ++j) y.at(i, j) = x.at(n.r0 + i, n.c0 + j);
        outs[n.id] = std::move(y);
        break;
      }
      case NodeKind::MatMulNT: {
        const Matrix& a = outs[n.in[0]];
        const Matrix& b = outs[n.in[1]];
        detail::save_slot(t, n.slot_a, a, policy, o);
        detail::save_slot(t, n.slot_b, b, policy, o);
        outs[n.id] = scale(matmul_nt(a, b), n.scale);
        break;
      }
      case NodeKind::MatMulNN: {
        const Matrix& a = outs[n.in[0]];
        const Matrix& b = outs[n.in[1]];
        detail::save_slot(t, n.slot_a, a, policy, o);
        detail::save_slot(t, n.slot_b, b, policy, o);
        outs[n.id] = matmul(a, b);
        break;
      }
      case NodeKind::Add:
        outs[n.id] = add(outs[n.in[0]], outs[n.in[1]]);
        break;
      case NodeKind::Assemble: {
        Matrix y(n.asm_rows, n.asm_cols);
        for (std::size_t p = 0; p < n.in.size(); ++p) {
          const Matrix& blk = outs[n.in[p]];
          for (std::size_t i = 0; i < blk.rows; ++i)
            for (std::size_t j = 0; j < blk.cols; ++j)
              y.at(n.places[p][0] + i, n.places[p][1] + j) = blk.at(i, j);
        }
        outs[n.id] = std::move(y);
        break;
      }
      case NodeKind::CrossEntropy: {
        CrossEntropyForward ce = cross_entropy_forward(outs[n.in[0]], t.cur_targets);
        detail::save_slot(t, n.slot_a, ce.probs, policy, o);
        loss = ce.loss;
        outs[n.id] = Matrix(1, 1);
        outs[n.id].at(0, 0) = loss;
        break;
      }
      case NodeKind::DotLoss: {
        const Matrix& x = outs[n.in[0]];
        if (!x.same_shape(n.dot_c)) throw ContractViolation("dot_loss: shape mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < x.a.size(); ++i) acc += x.a[i] * n.dot_c.a[i];
        loss = acc;
        outs[n.id] = Matrix(1, 1);
        outs[n.id].at(0, 0) = loss;
        break;
      }
    }
    t.out_shape[n.id] = {outs[n.id].rows, outs[n.id].cols};
  }

  ForwardResult res;
  res.loss = loss;
  for (const SlotState& s : t.slots) {
    if (s.filled && s.factored) {
      res.mean_dx_fnorm += s.dx_fnorm;
      res.factored_slots += 1;
    }
  }
  if (res.factored_slots > 0) res.mean_dx_fnorm /= static_cast<double>(res.factored_slots);
  t.last_loss = loss;
  t.forward_done = true;
  return res;
}

inline ForwardResult forward(Tape& t, const TokenBatch& batch, const CompressionPolicy& policy,
                             const ForwardOptions& o) {
  return forward_impl(t, nullptr, &batch, policy, o);
}

inline ForwardResult forward(Tape& t, const Matrix& input, const CompressionPolicy& policy,
                             const ForwardOptions& o) {
  return forward_impl(t, &input, nullptr, policy, o);
}

// Redraw the compression of every policy-addressed slot from its retained
// exact tensor. Requires a prior forward with retain_exact = true. Used by the
// Monte Carlo analyses to sample many draws off one forward pass.
inline void recompress_slots(Tape& t, const CompressionPolicy& policy, std::uint64_t seed,
                             std::uint64_t draw_id) {
  if (!t.forward_done) throw ContractViolation("recompress_slots: run forward first");
  for (std::size_t sl = 0; sl < t.slots.size(); ++sl) {
    SlotState& s = t.slots[sl];
    if (!s.filled) continue;
    const CompressorSpec* spec = detail::slot_spec(t, static_cast<int>(sl), policy);
    if (!spec) continue;
    if (s.exact.numel() == 0)
      throw ContractViolation("recompress_slots: exact tensor was not retained");
    int owner = t.slot_meta[sl].owners.front();
    RngState rng = derive_stream(seed, stream_tag::node_compress, draw_id,
                                 static_cast<std::uint64_t>(owner));
    std::optional<FactoredActivation> f = compress(s.exact, *spec, rng);
    if (f) {
      s.dx_fnorm = activation_error(s.exact, *f);
      s.fac = std::move(*f);
      s.factored = true;
    }
  }
}

namespace detail {

struct GradAcc {
  std::optional<Matrix> dense;
  std::optional<FactoredGradient> fac;

  void add_dense(Matrix&& g) {
    if (fac) throw ContractViolation("backward: factored gradient would be summed");
    if (!dense)
      dense = std::move(g);
    else
      add_inplace(*dense, g);
  }
  void set_factored(FactoredGradient&& g) {
    if (dense || fac)
      throw ContractViolation("backward: a parameter received two factored gradients");
    fac = std::move(g);
  }
};

}  // namespace detail

inline BackwardResult backward(Tape& t, const BackwardOptions& opts = {}) {
  if (!t.forward_done) throw ContractViolation("backward: run forward first");

  std::vector<std::optional<Matrix>> gbuf(t.nodes.size());
  std::vector<std::optional<Matrix>> recon_cache(t.slots.size());
  std::vector<detail::GradAcc> pgrads(t.params.size());
  BackwardResult res;

  auto add_grad = [&](int nid, Matrix&& g) {
    auto& slot = gbuf[static_cast<std::size_t>(nid)];
    if (!slot)
      slot = std::move(g);
    else
      add_inplace(*slot, g);
  };

  auto note_input_grad = [&](const Node& n, const Matrix& g) {
    if (opts.record_input_grads) res.input_grad[n.id] = g;
  };

  for (std::size_t idx = t.nodes.size(); idx-- > 0;) {
    const Node& n = t.nodes[idx];

    if (n.kind == NodeKind::CrossEntropy) {
      const Matrix& probs = detail::saved_matrix(t, n.slot_a, recon_cache);
      Matrix g = cross_entropy_backward(probs, t.cur_targets);
      note_input_grad(n, g);
      add_grad(n.in[0], std::move(g));
      continue;
    }
    if (n.kind == NodeKind::DotLoss) {
      Matrix g = n.dot_c;
      note_input_grad(n, g);
      add_grad(n.in[0], std::move(g));
      continue;
    }

    if (!gbuf[idx]) continue;
    const Matrix& g_out = *gbuf[idx];
    if (opts.record_incoming) res.incoming[n.id] = g_out;

    switch (n.kind) {
      case NodeKind::Input:
        break;
      case NodeKind::Embedding: {
        const Matrix& e = t.param(n.table).value;
        Matrix ge(e.rows, e.cols);
        for (std::size_t r = 0; r < t.cur_inputs.size(); ++r) {
          std::size_t tok = static_cast<std::size_t>(t.cur_inputs[r]);
          for (std::size_t j = 0; j < e.cols; ++j) ge.at(tok, j) += g_out.at(r, j);
        }
        pgrads[static_cast<std::size_t>(n.table)].add_dense(std::move(ge));
        break;
      }
      case NodeKind::Linear: {
        const SlotState& s = t.slots[static_cast<std::size_t>(n.slot_a)];
        const Matrix& w = t.param(n.w).value;
        // g_x = G_Z W never touches the saved activation.
        Matrix g_x = matmul(g_out, w);
        note_input_grad(n, g_x);
        if (s.factored && opts.cocompress) {
          pgrads[static_cast<std::size_t>(n.w)].set_factored(cocompress_backward(g_out, *s.fac));
        } else {
          const Matrix& x_hat = detail::saved_matrix(t, n.slot_a, recon_cache);
          pgrads[static_cast<std::size_t>(n.w)].add_dense(matmul_tn(g_out, x_hat));
        }
        if (n.b >= 0) pgrads[static_cast<std::size_t>(n.b)].add_dense(col_sums(g_out));
        add_grad(n.in[0], std::move(g_x));
        break;
      }
      case NodeKind::SiLU: {
        Matrix g = silu_backward(g_out, detail::saved_matrix(t, n.slot_a, recon_cache));
        note_input_grad(n, g);
        add_grad(n.in[0], std::move(g));
        break;
      }
      case NodeKind::RMSNorm: {
        RmsNormBackward rb = rmsnorm_backward(g_out, detail::saved_matrix(t, n.slot_a, recon_cache),
                                              t.param(n.gamma).value, n.eps);
        pgrads[static_cast<std::size_t>(n.gamma)].add_dense(std::move(rb.g_gamma));
        note_input_grad(n, rb.g_x);
        add_grad(n.in[0], std::move(rb.g_x));
        break;
      }
      case NodeKind::SoftmaxRows: {
        Matrix g = softmax_backward(g_out, detail::saved_matrix(t, n.slot_a, recon_cache));
        note_input_grad(n, g);
        add_grad(n.in[0], std::move(g));
        break;
      }
      case NodeKind::SliceBlock: {
        auto [pr, pc] = t.out_shape[static_cast<std::size_t>(n.in[0])];
        Matrix g(pr, pc);
        for (std::size_t i = 0; i < g_out.rows; ++i)
          for (std::size_t j = 0; j < g_out.cols; ++j)
            g.at(n.r0 + i, n.c0 + j) = g_out.at(i, j);
        note_input_grad(n, g);
        add_grad(n.in[0], std::move(g));
        break;
      }
      case NodeKind::MatMulNT: {
        const Matrix& a = detail::saved_matrix(t, n.slot_a, recon_cache);
        const Matrix& b = detail::saved_matrix(t, n.slot_b, recon_cache);
        Matrix g_a = scale(matmul(g_out, b), n.scale);
        Matrix g_b = scale(matmul_tn(g_out, a), n.scale);
        note_input_grad(n, g_a);
        add_grad(n.in[0], std::move(g_a));
        add_grad(n.in[1], std::move(g_b));
        break;
      }
      case NodeKind::MatMulNN: {
        const Matrix& a = detail::saved_matrix(t, n.slot_a, recon_cache);
        const Matrix& b = detail::saved_matrix(t, n.slot_b, recon_cache);
        Matrix g_a = matmul_nt(g_out, b);
        Matrix g_b = matmul_tn(a, g_out);
        note_input_grad(n, g_a);
        add_grad(n.in[0], std::move(g_a));
        add_grad(n.in[1], std::move(g_b));
        break;
      }
      case NodeKind::Add: {
        note_input_grad(n, g_out);
        add_grad(n.in[0], Matrix(g_out));
        add_grad(n.in[1], Matrix(g_out));
        break;
      }
      case NodeKind::Assemble: {
        for (std::size_t p = 0; p < n.in.size(); ++p) {
          auto [br, bc] = t.out_shape[static_cast<std::size_t>(n.in[p])];
          Matrix g(br, bc);
          for (std::size_t i = 0; i < br; ++i)
            for (std::size_t j = 0; j < bc; ++j)
              g.at(i, j) = g_out.at(n.places[p][0] + i, n.places[p][1] + j);
          if (p == 0) note_input_grad(n, g);
          add_grad(n.in[p], std::move(g));
        }
        break;
      }
      case NodeKind::CrossEntropy:
      case NodeKind::DotLoss:
        break;
    }
  }

  double norm2 = 0.0;
  for (std::size_t pid = 0; pid < t.params.size(); ++pid) {
    detail::GradAcc& acc = pgrads[pid];
    GradientValue gv = Matrix(1, 1);
    if (acc.fac) {
      gv = std::move(*acc.fac);
    } else if (acc.dense) {
      gv = std::move(*acc.dense);
    } else {
      gv = Matrix(t.params[pid].value.rows, t.params[pid].value.cols);  // zero gradient
    }
    double f = gradient_value_fnorm(gv);
    norm2 += f * f;
    res.grads.emplace(t.params[pid].name, std::move(gv));
  }
  res.grad_fnorm = std::sqrt(norm2);
  return res;
}

}  // namespace actcomp
