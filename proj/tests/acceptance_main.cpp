// Acceptance suite: one runnable criterion per theory claim, each printing a
// single pass/fail line. All tolerances are pinned here or in the checked-in
// configs under configs/.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "actcomp/train.hpp"

using namespace actcomp;

namespace {

std::string g_root = ".";

RunConfig load(const std::string& name) {
  return load_config(g_root + "/configs/" + name);
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

Outcome c01_gradient_correctness() {
  RunConfig cfg = load("verify_core.json");
  CheckOutcome oc = check_gradcheck(cfg);
  std::ostringstream ss;
  ss << "max_rel_dev=" << oc.report["max_rel_dev"].get<double>() << " over "
     << oc.report["params_checked"].get<std::size_t>() << " params (tol 1e-5)";
  return {oc.pass, ss.str()};
}

Outcome c02_linear_input_gradient_exactness() {
  RunConfig cfg = load("verify_core.json");
  Dataset ds = generate_data(cfg.data);
  ModelConfig mc = cfg.model;
  mc.batch = cfg.training.batch_size;
  Tape t = build_toy_transformer(mc, cfg.seed);
  TokenBatch batch = first_batch(cfg, ds, mc.batch);

  CompressorSpec rsvd_s{CompressorKind::RSVD, 4, 2, 1};
  CompressorSpec rp_s{CompressorKind::GaussianRP, 4, 0, 0};
  double worst = 0.0;
  std::vector<std::vector<std::pair<std::string, CompressorSpec>>> policies = {
      {{"All_Linear", rsvd_s}},
      {{"All_Linear", rp_s}},
      {{"Attn_In", rp_s}},
      {{"MLP_Out", rsvd_s}},
      {{"Attn_Out", rp_s}, {"MLP_In", rsvd_s}}};
  for (const auto& groups : policies) {
    CompressionPolicy pol = policy_from_groups(t, groups);
    worst = std::max(worst, max_incoming_deviation(t, batch, pol, cfg.seed));
  }
  std::ostringstream ss;
  ss << "max incoming-gradient rel err=" << worst << " over " << policies.size()
     << " linear-subset policies (tol 1e-12)";
  return {worst <= 1e-12, ss.str()};
}

Outcome c03_linear_unbiasedness() {
  RunConfig cfg = load("verify_core.json");
  Dataset ds = generate_data(cfg.data);
  ModelConfig mc = cfg.model;
  mc.batch = cfg.training.batch_size;
  Tape t = build_toy_transformer(mc, cfg.seed);
  int node = t.groups.at("MLP_In").front();
  BiasInstance inst = bias_instance_from_tape(t, node, first_batch(cfg, ds, mc.batch));
  CompressorSpec rp{CompressorKind::GaussianRP, 4, 0, 0};
  BiasReport rep = bias_estimate(inst, rp, cfg.verify.bias_trials, cfg.seed);
  bool pass = rep.weight && rep.weight->bias_ratio <= rep.weight->band &&
              rep.input.bias_ratio == 0.0 && rep.input.trial_std == 0.0;
  std::ostringstream ss;
  ss << "n=" << rep.trials << " weight bias ratio=" << rep.weight->bias_ratio
     << " band=" << rep.weight->band << "; input bias=" << rep.input.bias_ratio
     << " std=" << rep.input.trial_std;
  return {pass, ss.str()};
}

Outcome c04_nonlinear_bias() {
  RunConfig cfg = load("verify_core.json");
  BiasInstance inst = make_high_curvature_silu_instance();
  CompressorSpec rp{CompressorKind::GaussianRP, 2, 0, 0};
  BiasReport rep = bias_estimate(inst, rp, cfg.verify.bias_trials, cfg.seed + 1);
  double excess = rep.input.band > 0 ? rep.input.bias_ratio / rep.input.band : 0.0;
  BiasReport oracle = bias_estimate(inst, rp, cfg.verify.bias_oracle_trials, cfg.seed + 2);
  bool pass = excess >= 3.0 && oracle.input.bias_ratio > oracle.input.band;
  std::ostringstream ss;
  ss << "n=1e4 bias/band=" << excess << " (need >= 3); oracle n=1e6 bias="
     << oracle.input.bias_ratio << " > band=" << oracle.input.band;
  return {pass, ss.str()};
}

Outcome c05_error_propagation() {
  RunConfig cfg = load("verify_core.json");
  CheckOutcome oc = check_propagation(cfg);
  std::ostringstream ss;
  ss << "max chain-vs-direct dev=" << oc.report["max_dev"].get<double>()
     << " over 4 chains (tol 1e-8); linear source delta="
     << oc.report["linear_delta_at_source"].get<double>();
  return {oc.pass, ss.str()};
}

Outcome c06_cocompression_exactness() {
  RunConfig cfg = load("verify_core.json");
  ExactnessReport rep = cocompress_exactness(100, cfg.seed);
  bool pass = rep.cocompress_max_rel_err <= 1e-12 && rep.cocompress_rank_violations == 0;
  std::ostringstream ss;
  ss << "100 draws, max rel err=" << rep.cocompress_max_rel_err
     << " (tol 1e-12), rank violations=" << rep.cocompress_rank_violations;
  return {pass, ss.str()};
}

Outcome c07_variance_decomposition() {
  RunConfig cfg = load("verify_core.json");
  Dataset ds = generate_data(cfg.data);
  ModelConfig mc = cfg.model;
  mc.batch = cfg.training.batch_size;
  Tape t = build_toy_transformer(mc, cfg.seed);
  VarianceReport rep = variance_decomposition(t, ds, cfg.training.batch_size,
                                              cfg.verify.variance_draws, cfg.compression, cfg.seed);
  bool pass = rep.n_batches == 28 && rep.decomposition_ok && rep.cross_ok && rep.bound_ok;
  std::ostringstream ss;
  ss << "28 batches, " << rep.comp_draws << " draws: residual=" << rep.residual_rel
     << " (tol 0.05), |cross|=" << std::abs(rep.cross_term) << " <= 3se=" << 3 * rep.cross_se
     << ", var_g=" << rep.var_g << " <= bound=" << rep.bound << "+3se";
  return {pass, ss.str()};
}

Outcome c08_bound_ratio() {
  RunConfig cfg = load("verify_core.json");
  CheckOutcome oc = check_bound(cfg);
  std::ostringstream ss;
  ss << cfg.verify.bound_draws << " draws, violations="
     << oc.report["violations"].get<std::size_t>()
     << ", zero-error ratio=" << oc.report["zero_error_ratio_bound"].get<double>()
     << ", measured ratio_pre=" << oc.report["measured"]["ratio_pre"].get<double>()
     << " <= bound=" << oc.report["measured"]["ratio_bound"].get<double>();
  return {oc.pass, ss.str()};
}

Outcome c09_compressor_quality() {
  RunConfig cfg = load("verify_core.json");
  CompressorQualityReport rep = compressor_quality(cfg.verify.compressor_seeds, 8, cfg.seed);
  bool pass = rep.ordering_ok && rep.exactness_ok;
  std::ostringstream ss;
  ss << rep.seeds << " seeds: mean rsvd err=" << rep.mean_rsvd_err
     << " < mean rp err=" << rep.mean_rp_err
     << "; rank<=k exactness=" << rep.rsvd_exactness_max_rel << " (tol 1e-10)";
  return {pass, ss.str()};
}

Outcome c10_training_analogue() {
  std::ifstream is(g_root + "/configs/expected_results.json");
  if (!is) return {false, "missing expected_results.json"};
  nlohmann::json exp;
  is >> exp;
  const auto& c10 = exp.at("criterion10");
  std::size_t window = c10.at("trailing_window").get<std::size_t>();
  double max_ratio = c10.at("all_linear_max_ratio").get<double>();
  double min_ratio = c10.at("softmax_min_ratio").get<double>();

  TrainResult sft = train_loop(load("train_sft.json"));
  TrainResult lin = train_loop(load("train_all_linear.json"));
  TrainResult sm = train_loop(load("train_softmax.json"));
  double sft_tail = trailing_mean(sft.losses, window);
  double lin_ratio = trailing_mean(lin.losses, window) / sft_tail;
  double sm_ratio = trailing_mean(sm.losses, window) / sft_tail;
  bool pass = lin_ratio <= max_ratio && sm_ratio >= min_ratio;
  std::ostringstream ss;
  ss << "sft tail=" << sft_tail << ", all_linear/sft=" << lin_ratio << " (max " << max_ratio
     << "), softmax/sft=" << sm_ratio << " (min " << min_ratio << ")";
  return {pass, ss.str()};
}

Outcome c11_memory_accounting() {
  RunConfig cfg = load("optimizer_check.json");
  CheckOutcome oc = check_memory(cfg);
  bool pass = oc.pass;

  // Closed-form ratio check against the live tensors: factored slots must
  // occupy (m+d)k/(md) of their dense size, factored gradients (out+in)k/(out*in).
  Dataset ds = generate_data(cfg.data);
  ModelConfig mc = cfg.model;
  mc.batch = cfg.training.batch_size;
  Tape t = build_toy_transformer(mc, cfg.seed);
  CompressionPolicy pol = make_policy(t, cfg.compression);
  forward(t, first_batch(cfg, ds, mc.batch), pol, {cfg.seed, 0, false});
  BackwardOptions bo;
  bo.cocompress = true;
  BackwardResult br = backward(t, bo);
  std::size_t factored_slots = 0, factored_grads = 0;
  for (const SlotState& s : t.slots) {
    if (!s.filled || !s.factored) continue;
    ++factored_slots;
    std::size_t live = s.fac->u.numel() + s.fac->v.numel();
    if (live != (s.saved_rows + s.saved_cols) * s.fac->rank) pass = false;
  }
  for (const auto& [name, g] : br.grads) {
    if (!std::holds_alternative<FactoredGradient>(g)) continue;
    ++factored_grads;
    const FactoredGradient& fg = std::get<FactoredGradient>(g);
    std::size_t out = fg.l.rows, in = fg.r.rows;
    if (fg.l.numel() + fg.r.numel() != (out + in) * fg.rank) pass = false;
  }
  if (factored_slots == 0 || factored_grads == 0) pass = false;
  std::ostringstream ss;
  ss << "recount exact=" << (oc.report["modes"]["compressed"]["exact_match"].get<bool>() ? 1 : 0)
     << ", batch sweep ok=" << (oc.report["batch_sweep_ok"].get<bool>() ? 1 : 0)
     << ", closed-form ratios hold on " << factored_slots << " slots / " << factored_grads
     << " gradients";
  return {pass, ss.str()};
}

Outcome c12_optimizer_strategies() {
  RunConfig cfg = load("optimizer_check.json");
  CheckOutcome oc = check_optimizer(cfg);
  std::ostringstream ss;
  ss << "strategy(i) max step dev=" << oc.report["strategy_i_max_step_dev"].get<double>()
     << " (tol 1e-12) over " << oc.report["strategy_i_steps"].get<std::size_t>()
     << " steps; state bytes=" << oc.report["lowrank_state_bytes"].get<std::size_t>()
     << " == closed form=" << oc.report["lowrank_state_bytes_closed_form"].get<std::size_t>()
     << "; galore loss " << oc.report["galore_head_mean_loss"].get<double>() << " -> "
     << oc.report["galore_tail_mean_loss"].get<double>();
  return {oc.pass, ss.str()};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  int only = 0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--root") == 0 && i + 1 < argc) g_root = argv[++i];
    if (std::strcmp(argv[i], "--only") == 0 && i + 1 < argc) only = std::atoi(argv[++i]);
  }

  std::vector<Criterion> criteria = {
      {1, "gradient-correctness", c01_gradient_correctness},
      {2, "linear-input-gradient-exactness", c02_linear_input_gradient_exactness},
      {3, "linear-unbiasedness", c03_linear_unbiasedness},
      {4, "nonlinear-bias", c04_nonlinear_bias},
      {5, "error-propagation", c05_error_propagation},
      {6, "cocompression-exactness", c06_cocompression_exactness},
      {7, "variance-decomposition", c07_variance_decomposition},
      {8, "bound-ratio-consistency", c08_bound_ratio},
      {9, "rsvd-rp-quality-ordering", c09_compressor_quality},
      {10, "training-analogue", c10_training_analogue},
      {11, "memory-accounting", c11_memory_accounting},
      {12, "optimizer-strategy-consistency", c12_optimizer_strategies},
  };

  bool all_pass = true;
  for (const Criterion& c : criteria) {
    if (only != 0 && c.id != only) continue;
    auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %02d %s: %s (%.1fs)\n", out.pass ? "PASS" : "FAIL", c.id, c.name,
                out.detail.c_str(), secs);
    std::fflush(stdout);
    all_pass = all_pass && out.pass;
  }
  return all_pass ? 0 : 1;
}
