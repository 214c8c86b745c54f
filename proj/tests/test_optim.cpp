#include <doctest.h>

#include "actcomp/config.hpp"
#include "actcomp/optim.hpp"
#include "actcomp/train.hpp"

using namespace actcomp;

TEST_SUITE_BEGIN("optim");

TEST_CASE("zero gradient with no decay leaves the parameter unchanged") {
  RngState rng(1);
  Matrix p = gaussian_matrix(3, 4, 1.0, rng);
  Matrix orig = p;
  DenseAdamState st = DenseAdamState::zeros_like(p);
  AdamHyper h;
  h.lr = 1e-2;
  adamw_dense_step(p, Matrix(3, 4), st, h);
  CHECK(bitwise_equal(p, orig));
}

TEST_CASE("single scalar step matches the hand trace") {
  // g = 1, zero state, beta1 = 0.9, beta2 = 0.999, t = 1:
  //   m = 0.1, v = 0.001, m_hat = 1, v_hat = 1,
  //   update = -lr * 1 / (1 + eps).
  Matrix p(1, 1);
  p.at(0, 0) = 0.5;
  Matrix g(1, 1);
  g.at(0, 0) = 1.0;
  DenseAdamState st = DenseAdamState::zeros_like(p);
  AdamHyper h;
  h.lr = 0.1;
  adamw_dense_step(p, g, st, h);
  double expect = 0.5 - 0.1 * (1.0 / (1.0 + h.eps));
  CHECK(p.at(0, 0) == doctest::Approx(expect).epsilon(1e-15));
  CHECK(st.m.at(0, 0) == doctest::Approx(0.1));
  CHECK(st.v.at(0, 0) == doctest::Approx(0.001));
}

TEST_CASE("decoupled decay shrinks the parameter under zero gradient") {
  Matrix p(1, 1);
  p.at(0, 0) = 2.0;
  DenseAdamState st = DenseAdamState::zeros_like(p);
  AdamHyper h;
  h.lr = 0.1;
  h.weight_decay = 0.5;
  adamw_dense_step(p, Matrix(1, 1), st, h);
  CHECK(p.at(0, 0) == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)));
}

TEST_CASE("non-finite gradients are rejected") {
  Matrix p(1, 1);
  DenseAdamState st = DenseAdamState::zeros_like(p);
  Matrix g(1, 1);
  g.a[0] = std::numeric_limits<double>::quiet_NaN();
  AdamHyper h;
  CHECK_THROWS_AS(adamw_dense_step(p, g, st, h), NumericalFailure);
}

TEST_CASE("galore first step with orthonormal factors projects to l") {
  RngState rng(2);
  std::size_t out = 6, in = 8, k = 3;
  Matrix p = gaussian_matrix(out, in, 1.0, rng);
  // Orthonormal r (as RSVD produces): V^T V = I so G_lr = l exactly.
  Matrix r = qr_thin(gaussian_matrix(in, k, 1.0, rng)).q;
  FactoredGradient fg{gaussian_matrix(out, k, 1.0, rng), r, k};
  LowRankAdamState st;
  st.refresh_period = 10;
  AdamHyper h;
  h.lr = 0.1;
  Matrix before = p;
  galore_style_step(p, fg, st, h);
  // One Adam step on G_lr = l from zero state: direction = sign-ish l/(|l|+..)
  Matrix g_lr = matmul(fg.l, matmul_tn(fg.r, r));
  CHECK(rel_fro_err(g_lr, fg.l) < 1e-12);
  CHECK(st.age == 1);
  CHECK(!bitwise_equal(p, before));
}

TEST_CASE("galore zero gradient only decays") {
  RngState rng(3);
  Matrix p = gaussian_matrix(4, 6, 1.0, rng);
  Matrix before = p;
  FactoredGradient fg{Matrix(4, 2), Matrix(6, 2), 2};
  LowRankAdamState st;
  AdamHyper h;
  h.lr = 0.1;
  h.weight_decay = 0.25;
  galore_style_step(p, fg, st, h);
  CHECK(rel_fro_err(p, scale(before, 1.0 - 0.1 * 0.25)) < 1e-15);
}

TEST_CASE("galore resets state on rank mismatch with a warning record") {
  RngState rng(4);
  Matrix p = gaussian_matrix(4, 6, 1.0, rng);
  LowRankAdamState st;
  st.refresh_period = 100;
  AdamHyper h;
  FactoredGradient f2{gaussian_matrix(4, 2, 1.0, rng), gaussian_matrix(6, 2, 1.0, rng), 2};
  galore_style_step(p, f2, st, h);
  CHECK(st.rank == 2);
  FactoredGradient f3{gaussian_matrix(4, 3, 1.0, rng), gaussian_matrix(6, 3, 1.0, rng), 3};
  galore_style_step(p, f3, st, h);
  CHECK(st.rank == 3);
  CHECK(st.reset_warnings == 1);
  CHECK(st.m_lr.cols == 3);
}

TEST_CASE("projector refreshes and moments reset on schedule") {
  RngState rng(5);
  Matrix p = gaussian_matrix(4, 6, 1.0, rng);
  LowRankAdamState st;
  st.refresh_period = 2;
  AdamHyper h;
  FactoredGradient fa{gaussian_matrix(4, 2, 1.0, rng), gaussian_matrix(6, 2, 1.0, rng), 2};
  FactoredGradient fb{gaussian_matrix(4, 2, 1.0, rng), gaussian_matrix(6, 2, 1.0, rng), 2};
  galore_style_step(p, fa, st, h);
  CHECK(bitwise_equal(st.projector, fa.r));
  galore_style_step(p, fb, st, h);
  CHECK(bitwise_equal(st.projector, fa.r));  // still inside the window
  CHECK(st.age == 0);                        // wrapped; next step refreshes
  galore_style_step(p, fb, st, h);
  CHECK(bitwise_equal(st.projector, fb.r));
  CHECK(st.t == 1);  // moments and their correction counter were reset
}

TEST_CASE("training smoke: loss decreases under both strategies") {
  nlohmann::json j = {
      {"seed", 42},
      {"model",
       {{"depth", 1}, {"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}, {"vocab", 8}, {"seq_len", 8}}},
      {"data", {{"kind", "markov_lm"}, {"n_samples", 32}, {"seed", 7}, {"peak_prob", 0.9}}},
      {"compression", {{"groups", {"All_Linear"}}, {"kind", "rsvd"}, {"rank", 4}}},
      {"optimizer", {{"strategy", "dense"}, {"lr", 0.01}}},
      {"training", {{"steps", 50}, {"batch_size", 4}}},
      {"cocompress", true},
  };
  for (const char* strategy : {"dense", "galore_style"}) {
    j["optimizer"]["strategy"] = strategy;
    RunConfig cfg = parse_config(j);
    TrainResult res = train_loop(cfg);
    REQUIRE(res.losses.size() == 50);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 10; ++i) head += res.losses[i] / 10.0;
    for (int i = 40; i < 50; ++i) tail += res.losses[i] / 10.0;
    INFO(strategy);
    CHECK(tail < head);
  }
}

TEST_CASE("optimizer byte formulas") {
  std::vector<ParamShape> one = {{1024, 1024, true}};
  OptimizerBytes dense = dense_adam_bytes(one, 4);
  CHECK(dense.total == 8388608);
  OptimizerBytes lr = lowrank_adam_bytes(one, 32, 4);
  CHECK(lr.moment_bytes == 2 * 1024 * 32 * 4);
  CHECK(lr.projector_bytes == 1024 * 32 * 4);
  CHECK(lr.total == 262144 + 131072);
  CHECK(lr.beneficial);

  // k = in is never beneficial.
  std::vector<ParamShape> small = {{16, 8, true}};
  OptimizerBytes bad = lowrank_adam_bytes(small, 8, 4);
  CHECK(bad.total >= dense_adam_bytes(small, 4).total);
  CHECK(!bad.beneficial);

  // With no low-rank-eligible parameters the strategies cost the same.
  std::vector<ParamShape> none = {{16, 8, false}, {4, 4, false}};
  CHECK(lowrank_adam_bytes(none, 4, 8).total == dense_adam_bytes(none, 8).total);
}

TEST_SUITE_END();
