#pragma once

#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "actcomp/data.hpp"
#include "actcomp/model.hpp"
#include "actcomp/optim.hpp"
#include "actcomp/tape.hpp"

namespace actcomp {

struct CompressionConfig {
  std::vector<std::string> groups;  // Table-1 labels; empty (or just "SFT") = no compression
  CompressorSpec base{CompressorKind::RSVD, 8, 8, 1};
  std::map<std::string, CompressorSpec> per_group;  // label-specific overrides
};

struct OptimizerConfig {
  std::string strategy = "dense";  // "dense" | "galore_style"
  AdamHyper hyper;
  std::size_t proj_refresh = 200;
};

struct TrainingConfig {
  std::size_t steps = 500;
  std::size_t batch_size = 8;
};

struct MemoryConfig {
  std::size_t word_bytes = 8;
  std::size_t others_bytes = 0;
};

struct VerifyConfig {
  std::size_t bias_trials = 10000;
  std::size_t bias_oracle_trials = 1000000;
  std::size_t variance_draws = 10000;
  std::size_t cocompress_draws = 100;
  std::size_t bound_draws = 1000;
  std::size_t compressor_seeds = 100;
  double fd_step = 1e-5;
};

struct RunConfig {
  std::uint64_t seed = 42;
  std::string output_dir = "out";
  bool cocompress = false;
  ModelConfig model;
  SyntheticTask data;
  CompressionConfig compression;
  OptimizerConfig optimizer;
  TrainingConfig training;
  MemoryConfig memory;
  VerifyConfig verify;
};

namespace cfg_detail {

// Unknown keys are rejected outright: a silent typo in a group label or a
// hyperparameter name would invalidate an experiment.
inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                       const std::string& ctx) {
  if (!j.is_object()) throw ConfigError("config: '" + ctx + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + ctx);
  }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T dflt) {
  if (!j.contains(key)) return dflt;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config: bad value for '") + key + "'");
  }
}

inline CompressorKind parse_kind(const std::string& s) {
  if (s == "none") return CompressorKind::None;
  if (s == "rsvd") return CompressorKind::RSVD;
  if (s == "gaussian_rp") return CompressorKind::GaussianRP;
  throw ConfigError("config: unknown compressor kind '" + s + "'");
}

inline CompressorSpec parse_spec(const nlohmann::json& j, const std::string& ctx,
                                 const CompressorSpec& base, bool strict_keys = true) {
  if (strict_keys) check_keys(j, {"kind", "rank", "oversampling", "power_iters"}, ctx);
  CompressorSpec s = base;
  if (j.contains("kind")) s.kind = parse_kind(j.at("kind").get<std::string>());
  s.rank = get_or<std::size_t>(j, "rank", s.rank);
  s.oversampling = get_or<std::size_t>(j, "oversampling", s.oversampling);
  s.power_iters = get_or<std::size_t>(j, "power_iters", s.power_iters);
  s.validate();
  return s;
}

}  // namespace cfg_detail

inline RunConfig parse_config(const nlohmann::json& j) {
  using namespace cfg_detail;
  check_keys(j,
             {"seed", "output_dir", "cocompress", "model", "data", "compression", "optimizer",
              "training", "memory", "verify"},
             "config");
  RunConfig c;
  c.seed = get_or<std::uint64_t>(j, "seed", 42);
  c.output_dir = get_or<std::string>(j, "output_dir", "out");
  c.cocompress = get_or<bool>(j, "cocompress", false);

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, {"depth", "d_model", "n_heads", "d_ff", "vocab", "seq_len", "init_std", "rms_eps"},
               "model");
    c.model.depth = get_or<std::size_t>(m, "depth", c.model.depth);
    c.model.d_model = get_or<std::size_t>(m, "d_model", c.model.d_model);
    c.model.n_heads = get_or<std::size_t>(m, "n_heads", c.model.n_heads);
    c.model.d_ff = get_or<std::size_t>(m, "d_ff", c.model.d_ff);
    c.model.vocab = get_or<std::size_t>(m, "vocab", c.model.vocab);
    c.model.seq_len = get_or<std::size_t>(m, "seq_len", c.model.seq_len);
    c.model.init_std = get_or<double>(m, "init_std", c.model.init_std);
    c.model.rms_eps = get_or<double>(m, "rms_eps", c.model.rms_eps);
  }

  if (j.contains("data")) {
    const auto& d = j.at("data");
    check_keys(d, {"kind", "n_samples", "seed", "peak_prob"}, "data");
    std::string kind = get_or<std::string>(d, "kind", "markov_lm");
    if (kind == "markov_lm")
      c.data.kind = TaskKind::MarkovLM;
    else if (kind == "copy_task")
      c.data.kind = TaskKind::CopyTask;
    else
      throw ConfigError("config: unknown data kind '" + kind + "'");
    c.data.n_samples = get_or<std::size_t>(d, "n_samples", c.data.n_samples);
    c.data.seed = get_or<std::uint64_t>(d, "seed", c.data.seed);
    c.data.peak_prob = get_or<double>(d, "peak_prob", c.data.peak_prob);
  }
  c.data.vocab = c.model.vocab;
  c.data.seq_len = c.model.seq_len;

  if (j.contains("compression")) {
    const auto& k = j.at("compression");
    check_keys(k, {"groups", "kind", "rank", "oversampling", "power_iters", "per_group"},
               "compression");
    c.compression.base = parse_spec(k, "compression", c.compression.base, false);
    if (k.contains("groups")) {
      for (const auto& g : k.at("groups")) {
        std::string label = g.get<std::string>();
        const auto& known = operator_group_labels();
        bool ok = false;
        for (const auto& l : known) ok = ok || l == label;
        if (!ok) throw ConfigError("config: unknown operator group '" + label + "'");
        c.compression.groups.push_back(label);
      }
    }
    if (k.contains("per_group")) {
      for (auto it = k.at("per_group").begin(); it != k.at("per_group").end(); ++it) {
        const auto& known = operator_group_labels();
        bool ok = false;
        for (const auto& l : known) ok = ok || l == it.key();
        if (!ok) throw ConfigError("config: unknown operator group '" + it.key() + "'");
        c.compression.per_group[it.key()] =
            parse_spec(it.value(), "per_group." + it.key(), c.compression.base);
      }
    }
  }

  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    check_keys(o, {"strategy", "lr", "beta1", "beta2", "eps", "weight_decay", "proj_refresh"},
               "optimizer");
    c.optimizer.strategy = get_or<std::string>(o, "strategy", c.optimizer.strategy);
    if (c.optimizer.strategy != "dense" && c.optimizer.strategy != "galore_style")
      throw ConfigError("config: optimizer.strategy must be 'dense' or 'galore_style'");
    c.optimizer.hyper.lr = get_or<double>(o, "lr", c.optimizer.hyper.lr);
    c.optimizer.hyper.beta1 = get_or<double>(o, "beta1", c.optimizer.hyper.beta1);
    c.optimizer.hyper.beta2 = get_or<double>(o, "beta2", c.optimizer.hyper.beta2);
    c.optimizer.hyper.eps = get_or<double>(o, "eps", c.optimizer.hyper.eps);
    c.optimizer.hyper.weight_decay = get_or<double>(o, "weight_decay", c.optimizer.hyper.weight_decay);
    c.optimizer.proj_refresh = get_or<std::size_t>(o, "proj_refresh", c.optimizer.proj_refresh);
    c.optimizer.hyper.validate();
    if (c.optimizer.proj_refresh < 1) throw ConfigError("config: proj_refresh must be >= 1");
  }

  if (j.contains("training")) {
    const auto& tr = j.at("training");
    check_keys(tr, {"steps", "batch_size"}, "training");
    c.training.steps = get_or<std::size_t>(tr, "steps", c.training.steps);
    c.training.batch_size = get_or<std::size_t>(tr, "batch_size", c.training.batch_size);
  }

  if (j.contains("memory")) {
    const auto& m = j.at("memory");
    check_keys(m, {"word_bytes", "others_bytes"}, "memory");
    c.memory.word_bytes = get_or<std::size_t>(m, "word_bytes", c.memory.word_bytes);
    c.memory.others_bytes = get_or<std::size_t>(m, "others_bytes", c.memory.others_bytes);
    if (c.memory.word_bytes < 1) throw ConfigError("config: word_bytes must be >= 1");
  }

  if (j.contains("verify")) {
    const auto& v = j.at("verify");
    check_keys(v,
               {"bias_trials", "bias_oracle_trials", "variance_draws", "cocompress_draws",
                "bound_draws", "compressor_seeds", "fd_step"},
               "verify");
    c.verify.bias_trials = get_or<std::size_t>(v, "bias_trials", c.verify.bias_trials);
    c.verify.bias_oracle_trials =
        get_or<std::size_t>(v, "bias_oracle_trials", c.verify.bias_oracle_trials);
    c.verify.variance_draws = get_or<std::size_t>(v, "variance_draws", c.verify.variance_draws);
    c.verify.cocompress_draws = get_or<std::size_t>(v, "cocompress_draws", c.verify.cocompress_draws);
    c.verify.bound_draws = get_or<std::size_t>(v, "bound_draws", c.verify.bound_draws);
    c.verify.compressor_seeds = get_or<std::size_t>(v, "compressor_seeds", c.verify.compressor_seeds);
    c.verify.fd_step = get_or<double>(v, "fd_step", c.verify.fd_step);
  }

  c.model.validate();
  c.data.validate();
  if (c.training.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (c.training.batch_size > c.data.n_samples)
    throw ConfigError("config: batch_size must not exceed data.n_samples");
  return c;
}

// Loads a config file; ACTCOMP_SEED in the environment overrides the seed.
inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: parse error in " + path + ": " + e.what());
  }
  RunConfig c = parse_config(j);
  if (const char* env = std::getenv("ACTCOMP_SEED")) {
    try {
      c.seed = static_cast<std::uint64_t>(std::stoull(env));
    } catch (...) {
      throw ConfigError("config: ACTCOMP_SEED is not an integer");
    }
  }
  return c;
}

// Expand the configured group labels into a per-node policy for a tape.
inline CompressionPolicy make_policy(const Tape& t, const CompressionConfig& cc) {
  std::vector<std::pair<std::string, CompressorSpec>> groups;
  for (const std::string& label : cc.groups) {
    if (label == "SFT") continue;  // SFT selects no nodes
    auto it = cc.per_group.find(label);
    groups.emplace_back(label, it != cc.per_group.end() ? it->second : cc.base);
  }
  return policy_from_groups(t, groups);
}

}  // namespace actcomp
