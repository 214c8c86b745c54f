#pragma once

#include <string>
#include <vector>

#include "actcomp/tape.hpp"

namespace actcomp {

// The nine Table-1 operator-group labels, case-sensitive.
inline const std::vector<std::string>& operator_group_labels() {
  static const std::vector<std::string> labels = {"SFT",     "Attn_In", "Attn_Out",
                                                  "MLP_In",  "MLP_Out", "SiLU",
                                                  "RMSNorm", "Softmax", "All_Linear"};
  return labels;
}

// Decoder-only pre-norm toy transformer, batch folded into rows:
//   embedding -> [RMSNorm -> Q/K/V linears (shared saved input) ->
//   per-(sample, head) scaled dot-product with row-wise softmax ->
//   output linear -> residual -> RMSNorm -> MLP linear -> SiLU ->
//   MLP linear -> residual] x depth -> RMSNorm -> head linear -> cross entropy.
// Attention probabilities are materialized explicitly; the softmax node's
// saved output and the P*V product's first operand are one shared slot.
inline Tape build_toy_transformer(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Tape t;
  t.model = cfg;
  t.is_transformer = true;
  t.build_seed = seed;

  const std::size_t d = cfg.d_model;
  const std::size_t dh = d / cfg.n_heads;
  const std::size_t rows = cfg.batch * cfg.seq_len;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  std::size_t pidx = 0;
  auto gauss_param = [&](const std::string& name, std::size_t r, std::size_t c,
                         bool linear_w) -> int {
    RngState rng = derive_stream(seed, stream_tag::model_init, pidx++);
    return t.add_param(name, gaussian_matrix(r, c, cfg.init_std, rng), linear_w);
  };
  auto ones_param = [&](const std::string& name, std::size_t c) -> int {
    Matrix g(1, c);
    for (double& x : g.a) x = 1.0;
    ++pidx;
    return t.add_param(name, std::move(g));
  };
  auto zeros_param = [&](const std::string& name, std::size_t c) -> int {
    ++pidx;
    return t.add_param(name, Matrix(1, c));
  };

  for (const std::string& label : operator_group_labels()) t.groups[label];

  auto linear_node = [&](const std::string& name, int input, int wid, int bid,
                         int slot) -> int {
    Node n;
    n.kind = NodeKind::Linear;
    n.name = name;
    n.in = {input};
    n.w = wid;
    n.b = bid;
    n.slot_a = slot;
    int id = t.add_node(std::move(n));
    t.groups["All_Linear"].push_back(id);
    return id;
  };

  Node emb;
  emb.kind = NodeKind::Embedding;
  emb.name = "emb";
  emb.table = gauss_param("emb", cfg.vocab, d, false);
  int cur = t.add_node(std::move(emb));

  for (std::size_t blk = 0; blk < cfg.depth; ++blk) {
    const std::string pre = "blk" + std::to_string(blk) + ".";

    Node rms1;
    rms1.kind = NodeKind::RMSNorm;
    rms1.name = pre + "rms1";
    rms1.in = {cur};
    rms1.gamma = ones_param(pre + "rms1.gamma", d);
    rms1.eps = cfg.rms_eps;
    rms1.slot_a = t.add_slot({});  // owner patched below once the id exists
    int rms1_id = t.add_node(std::move(rms1));
    t.slot_meta[static_cast<std::size_t>(t.nodes[rms1_id].slot_a)].owners = {rms1_id};
    t.groups["RMSNorm"].push_back(rms1_id);
    t.profile_chain.push_back(rms1_id);

    // Q/K/V share one saved input: a single slot, compressed at most once.
    int attn_in_slot = t.add_slot({});
    int wq = gauss_param(pre + "wq", d, d, true);
    int wk = gauss_param(pre + "wk", d, d, true);
    int wv = gauss_param(pre + "wv", d, d, true);
    int q_id = linear_node(pre + "wq", rms1_id, wq, -1, attn_in_slot);
    int k_id = linear_node(pre + "wk", rms1_id, wk, -1, attn_in_slot);
    int v_id = linear_node(pre + "wv", rms1_id, wv, -1, attn_in_slot);
    t.slot_meta[static_cast<std::size_t>(attn_in_slot)].owners = {q_id, k_id, v_id};
    t.groups["Attn_In"].insert(t.groups["Attn_In"].end(), {q_id, k_id, v_id});

    Node asm_node;
    asm_node.kind = NodeKind::Assemble;
    asm_node.name = pre + "heads";
    asm_node.asm_rows = rows;
    asm_node.asm_cols = d;

    for (std::size_t b = 0; b < cfg.batch; ++b) {
      for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::string hp =
            pre + "b" + std::to_string(b) + ".h" + std::to_string(h) + ".";
        auto slice = [&](const std::string& nm, int input, std::size_t c0) -> int {
          Node s;
          s.kind = NodeKind::SliceBlock;
          s.name = nm;
          s.in = {input};
          s.r0 = b * cfg.seq_len;
          s.r1 = (b + 1) * cfg.seq_len;
          s.c0 = c0;
          s.c1 = c0 + dh;
          return t.add_node(std::move(s));
        };
        int qs = slice(hp + "q", q_id, h * dh);
        int ks = slice(hp + "k", k_id, h * dh);
        int vs = slice(hp + "v", v_id, h * dh);

        Node nt;
        nt.kind = NodeKind::MatMulNT;
        nt.name = hp + "scores";
        nt.in = {qs, ks};
        nt.scale = att_scale;
        nt.slot_a = t.add_slot({});
        nt.slot_b = t.add_slot({});
        int scores = t.add_node(std::move(nt));

        Node sm;
        sm.kind = NodeKind::SoftmaxRows;
        sm.name = hp + "softmax";
        sm.in = {scores};
        sm.slot_a = t.add_slot({});
        int sm_id = t.add_node(std::move(sm));
        t.slot_meta[static_cast<std::size_t>(t.nodes[sm_id].slot_a)].owners = {sm_id};
        t.groups["Softmax"].push_back(sm_id);

        Node nn;
        nn.kind = NodeKind::MatMulNN;
        nn.name = hp + "ctx";
        nn.in = {sm_id, vs};
        nn.slot_a = t.nodes[sm_id].slot_a;  // shared with the softmax output
        nn.slot_b = t.add_slot({});
        int ctx = t.add_node(std::move(nn));

        asm_node.in.push_back(ctx);
        asm_node.places.push_back({b * cfg.seq_len, h * dh});
      }
    }
    int heads = t.add_node(std::move(asm_node));

    int wo = gauss_param(pre + "wo", d, d, true);
    int attn_out_slot = t.add_slot({});
    int wo_id = linear_node(pre + "wo", heads, wo, -1, attn_out_slot);
    t.slot_meta[static_cast<std::size_t>(attn_out_slot)].owners = {wo_id};
    t.groups["Attn_Out"].push_back(wo_id);

    Node res1;
    res1.kind = NodeKind::Add;
    res1.name = pre + "res1";
    res1.in = {cur, wo_id};
    int res1_id = t.add_node(std::move(res1));

    Node rms2;
    rms2.kind = NodeKind::RMSNorm;
    rms2.name = pre + "rms2";
    rms2.in = {res1_id};
    rms2.gamma = ones_param(pre + "rms2.gamma", d);
    rms2.eps = cfg.rms_eps;
    rms2.slot_a = t.add_slot({});
    int rms2_id = t.add_node(std::move(rms2));
    t.slot_meta[static_cast<std::size_t>(t.nodes[rms2_id].slot_a)].owners = {rms2_id};
    t.groups["RMSNorm"].push_back(rms2_id);
    t.profile_chain.push_back(rms2_id);

    int wi = gauss_param(pre + "mlp_in", cfg.d_ff, d, true);
    int bi = zeros_param(pre + "mlp_in.bias", cfg.d_ff);
    int mlp_in_slot = t.add_slot({});
    int mlp_in_id = linear_node(pre + "mlp_in", rms2_id, wi, bi, mlp_in_slot);
    t.slot_meta[static_cast<std::size_t>(mlp_in_slot)].owners = {mlp_in_id};
    t.groups["MLP_In"].push_back(mlp_in_id);
    t.profile_chain.push_back(mlp_in_id);

    Node silu;
    silu.kind = NodeKind::SiLU;
    silu.name = pre + "silu";
    silu.in = {mlp_in_id};
    silu.slot_a = t.add_slot({});
    int silu_id = t.add_node(std::move(silu));
    t.slot_meta[static_cast<std::size_t>(t.nodes[silu_id].slot_a)].owners = {silu_id};
    t.groups["SiLU"].push_back(silu_id);
    t.profile_chain.push_back(silu_id);

    int wo2 = gauss_param(pre + "mlp_out", d, cfg.d_ff, true);
    int bo2 = zeros_param(pre + "mlp_out.bias", d);
    int mlp_out_slot = t.add_slot({});
    int mlp_out_id = linear_node(pre + "mlp_out", silu_id, wo2, bo2, mlp_out_slot);
    t.slot_meta[static_cast<std::size_t>(mlp_out_slot)].owners = {mlp_out_id};
    t.groups["MLP_Out"].push_back(mlp_out_id);
    t.profile_chain.push_back(mlp_out_id);

    Node res2;
    res2.kind = NodeKind::Add;
    res2.name = pre + "res2";
    res2.in = {res1_id, mlp_out_id};
    cur = t.add_node(std::move(res2));
  }

  Node rmsf;
  rmsf.kind = NodeKind::RMSNorm;
  rmsf.name = "rms_final";
  rmsf.in = {cur};
  rmsf.gamma = ones_param("rms_final.gamma", d);
  rmsf.eps = cfg.rms_eps;
  rmsf.slot_a = t.add_slot({});
  int rmsf_id = t.add_node(std::move(rmsf));
  t.slot_meta[static_cast<std::size_t>(t.nodes[rmsf_id].slot_a)].owners = {rmsf_id};
  t.groups["RMSNorm"].push_back(rmsf_id);
  t.profile_chain.push_back(rmsf_id);

  int wh = gauss_param("head", cfg.vocab, d, true);
  int head_slot = t.add_slot({});
  int head_id = linear_node("head", rmsf_id, wh, -1, head_slot);
  t.slot_meta[static_cast<std::size_t>(head_slot)].owners = {head_id};
  t.profile_chain.push_back(head_id);

  Node ce;
  ce.kind = NodeKind::CrossEntropy;
  ce.name = "loss";
  ce.in = {head_id};
  ce.slot_a = t.add_slot({});
  t.loss_node = t.add_node(std::move(ce));

  return t;
}

// ---- chain tapes for the propagation analyses ----

enum class ChainOpKind { Linear, IdentityLinear, SiLU, RMSNorm, SoftmaxRows };

// Straight chain of per-token operators on m tokens of width d, topped with a
// fixed <C, X> loss so the seed gradient is a known constant. Every node's
// token-wise Jacobian is available in closed form.
inline Tape build_chain(const std::vector<ChainOpKind>& ops, std::size_t d, std::size_t m,
                        std::uint64_t seed) {
  if (ops.empty()) throw ConfigError("build_chain: need at least one operator");
  Tape t;
  t.build_seed = seed;

  Node input;
  input.kind = NodeKind::Input;
  input.name = "input";
  t.input_node = t.add_node(std::move(input));
  int cur = t.input_node;

  std::size_t pidx = 0;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    const std::string name = "op" + std::to_string(i);
    Node n;
    n.in = {cur};
    n.name = name;
    switch (ops[i]) {
      case ChainOpKind::Linear: {
        RngState rng = derive_stream(seed, stream_tag::model_init, pidx++);
        n.kind = NodeKind::Linear;
        n.w = t.add_param(name + ".w",
                          gaussian_matrix(d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng),
                          true);
        break;
      }
      case ChainOpKind::IdentityLinear:
        n.kind = NodeKind::Linear;
        n.w = t.add_param(name + ".w", Matrix::identity(d), true);
        ++pidx;
        break;
      case ChainOpKind::SiLU:
        n.kind = NodeKind::SiLU;
        break;
      case ChainOpKind::RMSNorm: {
        RngState rng = derive_stream(seed, stream_tag::model_init, pidx++);
        Matrix g(1, d);
        for (double& x : g.a) x = 1.0 + 0.3 * rng.next_gaussian();
        n.kind = NodeKind::RMSNorm;
        n.gamma = t.add_param(name + ".gamma", std::move(g));
        n.eps = 1e-6;
        break;
      }
      case ChainOpKind::SoftmaxRows:
        n.kind = NodeKind::SoftmaxRows;
        break;
    }
    n.slot_a = t.add_slot({});
    cur = t.add_node(std::move(n));
    t.slot_meta[static_cast<std::size_t>(t.nodes[cur].slot_a)].owners = {cur};
    t.profile_chain.push_back(cur);
  }

  Node loss;
  loss.kind = NodeKind::DotLoss;
  loss.name = "loss";
  loss.in = {cur};
  {
    RngState rng = derive_stream(seed, stream_tag::model_init, 1000);
    loss.dot_c = gaussian_matrix(m, d, 1.0, rng);
  }
  t.loss_node = t.add_node(std::move(loss));
  return t;
}

// Token-wise Jacobian of a per-token node, evaluated at its exact saved
// activation (softmax: saved output) for one token row.
inline Matrix tokenwise_jacobian(const Tape& t, int node_id, std::size_t token_row) {
  const Node& n = t.nodes.at(static_cast<std::size_t>(node_id));
  if (n.kind == NodeKind::Linear) return jacobian_linear(t.param(n.w).value);

  if (!t.forward_done) throw ContractViolation("tokenwise_jacobian: run forward first");
  const SlotState& s = t.slots.at(static_cast<std::size_t>(n.slot_a));
  if (!s.filled || s.exact.numel() == 0)
    throw ContractViolation("tokenwise_jacobian: exact saved activation unavailable");
  if (token_row >= s.exact.rows) throw ContractViolation("tokenwise_jacobian: token row out of range");
  Matrix row(1, s.exact.cols);
  for (std::size_t j = 0; j < s.exact.cols; ++j) row.at(0, j) = s.exact.at(token_row, j);

  switch (n.kind) {
    case NodeKind::SiLU: return jacobian_silu(row);
    case NodeKind::RMSNorm: return jacobian_rmsnorm(row, t.param(n.gamma).value, n.eps);
    case NodeKind::SoftmaxRows: return jacobian_softmax(row);
    default:
      throw ContractViolation(std::string("tokenwise_jacobian: unsupported kind ") +
                              kind_name(n.kind));
  }
}

// Rebuilds the same model at a different batch size and copies the parameter
// values over. Analysis replicas use this for per-sample gradients.
inline Tape clone_with_batch(const Tape& src, std::size_t batch) {
  if (!src.is_transformer) throw ContractViolation("clone_with_batch: transformer tapes only");
  ModelConfig cfg = src.model;
  cfg.batch = batch;
  Tape t = build_toy_transformer(cfg, src.build_seed);
  for (std::size_t i = 0; i < t.params.size(); ++i) t.params[i].value = src.params[i].value;
  return t;
}

}  // namespace actcomp
