#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "actcomp/config.hpp"
#include "actcomp/data.hpp"
#include "actcomp/train.hpp"

using namespace actcomp;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("dataset generation is deterministic") {
  SyntheticTask task;
  task.vocab = 8;
  task.seq_len = 16;
  task.n_samples = 10;
  task.seed = 5;
  Dataset a = generate_data(task);
  Dataset b = generate_data(task);
  CHECK(a.sequences == b.sequences);
  task.seed = 6;
  Dataset c = generate_data(task);
  CHECK(a.sequences != c.sequences);
}

TEST_CASE("degenerate vocab is rejected") {
  SyntheticTask task;
  task.vocab = 1;
  CHECK_THROWS_AS(generate_data(task), ConfigError);
}

TEST_CASE("copy task repeats the prefix after the delimiter") {
  SyntheticTask task;
  task.kind = TaskKind::CopyTask;
  task.vocab = 8;
  task.seq_len = 9;
  task.n_samples = 4;
  Dataset ds = generate_data(task);
  std::size_t prefix = 4;
  for (const auto& seq : ds.sequences) {
    REQUIRE(seq.size() == 10);
    CHECK(seq[prefix] == 0);
    for (std::size_t p = 0; p < prefix; ++p) CHECK(seq[p] >= 1);
    for (std::size_t p = prefix + 1; p < seq.size(); ++p)
      CHECK(seq[p] == seq[(p - prefix - 1) % prefix]);
  }
}

TEST_CASE("markov entropy rate sits below the order-0 baseline") {
  SyntheticTask task;
  task.vocab = 8;
  task.seq_len = 16;
  task.n_samples = 64;
  task.peak_prob = 0.95;
  Dataset ds = generate_data(task);
  double rate = markov_entropy_rate(ds.transition);
  double h0 = order0_baseline_loss(ds, task.vocab);
  CHECK(rate < h0);
  CHECK(rate > 0.0);
}

TEST_CASE("training beats the order-0 baseline on a near-deterministic chain") {
  nlohmann::json j = {
      {"seed", 42},
      {"model",
       {{"depth", 1}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}, {"vocab", 8}, {"seq_len", 16}}},
      {"data", {{"kind", "markov_lm"}, {"n_samples", 32}, {"seed", 11}, {"peak_prob", 0.95}}},
      {"optimizer", {{"lr", 0.02}}},
      {"training", {{"steps", 120}, {"batch_size", 8}}},
  };
  RunConfig cfg = parse_config(j);
  Dataset ds = generate_data(cfg.data);
  double h0 = order0_baseline_loss(ds, cfg.data.vocab);
  TrainResult res = train_loop(cfg);
  CHECK(trailing_mean(res.losses, 20) < h0);
}

TEST_CASE("config rejects unknown keys and bad labels") {
  CHECK_THROWS_AS(parse_config({{"sedd", 42}}), ConfigError);
  CHECK_THROWS_AS(parse_config({{"model", {{"dmodel", 8}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config({{"compression", {{"groups", {"attn_in"}}}}}), ConfigError);
  CHECK_THROWS_AS(parse_config({{"optimizer", {{"strategy", "sgd"}}}}), ConfigError);
  nlohmann::json too_big = {{"training", {{"steps", 1}, {"batch_size", 100}}},
                            {"data", {{"n_samples", 10}}}};
  CHECK_THROWS_AS(parse_config(too_big), ConfigError);
}

TEST_CASE("config defaults follow the protocol") {
  RunConfig cfg = parse_config(nlohmann::json::object());
  CHECK(cfg.seed == 42);
  CHECK(cfg.optimizer.hyper.lr == doctest::Approx(2e-5));
  CHECK(cfg.compression.base.rank == 8);
  CHECK(cfg.optimizer.hyper.beta1 == doctest::Approx(0.9));
  CHECK(cfg.optimizer.hyper.beta2 == doctest::Approx(0.999));
  CHECK(cfg.optimizer.proj_refresh == 200);
}

TEST_CASE("per-group overrides and SFT label") {
  nlohmann::json j = {{"compression",
                       {{"groups", {"All_Linear"}},
                        {"kind", "rsvd"},
                        {"rank", 8},
                        {"per_group", {{"All_Linear", {{"kind", "gaussian_rp"}, {"rank", 4}}}}}}}};
  RunConfig cfg = parse_config(j);
  Tape t = build_toy_transformer(cfg.model, 1);
  CompressionPolicy pol = make_policy(t, cfg.compression);
  CHECK(!pol.empty());
  for (const auto& [nid, spec] : pol.per_node) {
    CHECK(spec.kind == CompressorKind::GaussianRP);
    CHECK(spec.rank == 4);
  }

  nlohmann::json sft = {{"compression", {{"groups", {"SFT"}}}}};
  RunConfig cfg2 = parse_config(sft);
  CHECK(make_policy(t, cfg2.compression).empty());
}

TEST_CASE("ACTCOMP_SEED environment override") {
  std::filesystem::path dir = std::filesystem::temp_directory_path() / "actcomp_cfg_test";
  std::filesystem::create_directories(dir);
  std::filesystem::path cfgp = dir / "c.json";
  write_text_file(cfgp, "{\"seed\": 7}\n");
  CHECK(load_config(cfgp.string()).seed == 7);
  setenv("ACTCOMP_SEED", "1234", 1);
  CHECK(load_config(cfgp.string()).seed == 1234);
  unsetenv("ACTCOMP_SEED");
}

TEST_CASE("steps=0 emits headers only") {
  nlohmann::json j = {{"model", {{"vocab", 8}}},
                      {"data", {{"n_samples", 4}}},
                      {"training", {{"steps", 0}, {"batch_size", 2}}}};
  RunConfig cfg = parse_config(j);
  TrainResult res = train_loop(cfg);
  CHECK(res.csv == "step,loss,act_err,grad_norm\n");
  CHECK(res.losses.empty());
  CHECK(res.memory.total > 0);
}

TEST_CASE("end-to-end determinism: identical runs produce identical artifacts") {
  nlohmann::json j = {
      {"seed", 42},
      {"output_dir", (std::filesystem::temp_directory_path() / "actcomp_det_a").string()},
      {"model",
       {{"depth", 1}, {"d_model", 8}, {"n_heads", 2}, {"d_ff", 16}, {"vocab", 8}, {"seq_len", 8}}},
      {"data", {{"kind", "markov_lm"}, {"n_samples", 16}, {"seed", 3}}},
      {"compression", {{"groups", {"All_Linear"}}, {"kind", "rsvd"}, {"rank", 4}}},
      {"optimizer", {{"lr", 0.01}}},
      {"training", {{"steps", 20}, {"batch_size", 4}}},
      {"cocompress", true},
  };
  RunConfig a = parse_config(j);
  run_train_cmd(a);
  j["output_dir"] = (std::filesystem::temp_directory_path() / "actcomp_det_b").string();
  RunConfig b = parse_config(j);
  run_train_cmd(b);
  CHECK(slurp(std::filesystem::path(a.output_dir) / "loss.csv") ==
        slurp(std::filesystem::path(b.output_dir) / "loss.csv"));
  CHECK(slurp(std::filesystem::path(a.output_dir) / "memory.json") ==
        slurp(std::filesystem::path(b.output_dir) / "memory.json"));
  CHECK(slurp(std::filesystem::path(a.output_dir) / "checkpoint.bin") ==
        slurp(std::filesystem::path(b.output_dir) / "checkpoint.bin"));
}

TEST_CASE("empty groups and the SFT label train identically to uncompressed") {
  nlohmann::json j = {
      {"seed", 42},
      {"model", {{"vocab", 8}, {"seq_len", 8}}},
      {"data", {{"n_samples", 8}}},
      {"optimizer", {{"lr", 0.01}}},
      {"training", {{"steps", 10}, {"batch_size", 2}}},
  };
  RunConfig plain = parse_config(j);
  j["compression"] = {{"groups", {"SFT"}}};
  RunConfig sft = parse_config(j);
  TrainResult a = train_loop(plain);
  TrainResult b = train_loop(sft);
  CHECK(a.csv == b.csv);
}

TEST_CASE("gen-data and report-memory commands write their artifacts") {
  nlohmann::json j = {
      {"output_dir", (std::filesystem::temp_directory_path() / "actcomp_cmd_test").string()},
      {"model", {{"vocab", 8}, {"seq_len", 8}}},
      {"data", {{"n_samples", 16}}},
      {"compression", {{"groups", {"All_Linear"}}, {"rank", 4}}},
      {"training", {{"steps", 1}, {"batch_size", 2}}},
  };
  RunConfig cfg = parse_config(j);
  run_gen_data_cmd(cfg);
  CHECK(std::filesystem::exists(std::filesystem::path(cfg.output_dir) / "tokens.csv"));
  run_report_memory_cmd(cfg, {2, 4});
  CHECK(std::filesystem::exists(std::filesystem::path(cfg.output_dir) / "memory_sweep.csv"));
  CHECK(std::filesystem::exists(std::filesystem::path(cfg.output_dir) / "memory_sweep.json"));
  CHECK_THROWS_AS(run_report_memory_cmd(cfg, {}), ConfigError);
}

TEST_SUITE_END();
