#pragma once

#include <string>
#include <vector>

#include "actcomp/matrix.hpp"
#include "actcomp/rng.hpp"

namespace actcomp {

enum class TaskKind { MarkovLM, CopyTask };

struct SyntheticTask {
  TaskKind kind = TaskKind::MarkovLM;
  std::size_t vocab = 16;
  std::size_t seq_len = 32;
  std::size_t n_samples = 64;
  std::uint64_t seed = 1234;
  double peak_prob = 0.9;  // markov_lm: probability mass on each state's preferred successor

  void validate() const {
    if (vocab < 2) throw ConfigError("SyntheticTask: vocab must be >= 2");
    if (seq_len < 1 || n_samples < 1)
      throw ConfigError("SyntheticTask: seq_len and n_samples must be positive");
    if (!(peak_prob > 0.0) || !(peak_prob < 1.0))
      throw ConfigError("SyntheticTask: peak_prob must lie in (0, 1)");
  }
};

struct Dataset {
  std::vector<std::vector<int>> sequences;  // n_samples rows of seq_len + 1 tokens
  Matrix transition;                        // markov_lm: vocab x vocab row-stochastic chain
  TaskKind kind = TaskKind::MarkovLM;
};

namespace detail {

inline int sample_categorical(const Matrix& probs, std::size_t row, RngState& rng) {
  double u = rng.next_unit();
  double acc = 0.0;
  for (std::size_t j = 0; j < probs.cols; ++j) {
    acc += probs.at(row, j);
    if (u < acc) return static_cast<int>(j);
  }
  return static_cast<int>(probs.cols - 1);
}

}  // namespace detail

// markov_lm: a fixed random first-order chain — each state sends peak_prob to
// one preferred successor and spreads the rest uniformly. copy_task: random
// prefix, delimiter 0, prefix repeated; the target is the usual shifted
// sequence either way.
inline Dataset generate_data(const SyntheticTask& task) {
  task.validate();
  Dataset ds;
  ds.kind = task.kind;
  const std::size_t len = task.seq_len + 1;
  ds.sequences.assign(task.n_samples, std::vector<int>(len, 0));

  RngState chain_rng = derive_stream(task.seed, stream_tag::data, 0);
  if (task.kind == TaskKind::MarkovLM) {
    ds.transition = Matrix(task.vocab, task.vocab);
    double rest = (1.0 - task.peak_prob) / static_cast<double>(task.vocab - 1);
    for (std::size_t s = 0; s < task.vocab; ++s) {
      std::size_t pref = chain_rng.next_below(task.vocab);
      for (std::size_t j = 0; j < task.vocab; ++j)
        ds.transition.at(s, j) = (j == pref) ? task.peak_prob : rest;
    }
    for (std::size_t i = 0; i < task.n_samples; ++i) {
      RngState rng = derive_stream(task.seed, stream_tag::data, 1, i);
      int state = static_cast<int>(rng.next_below(task.vocab));
      ds.sequences[i][0] = state;
      for (std::size_t p = 1; p < len; ++p) {
        state = detail::sample_categorical(ds.transition, static_cast<std::size_t>(state), rng);
        ds.sequences[i][p] = state;
      }
    }
  } else {
    // Tokens 1..vocab-1 are symbols, 0 is the delimiter.
    std::size_t prefix = task.seq_len / 2;
    if (prefix < 1) prefix = 1;
    for (std::size_t i = 0; i < task.n_samples; ++i) {
      RngState rng = derive_stream(task.seed, stream_tag::data, 1, i);
      std::vector<int>& seq = ds.sequences[i];
      for (std::size_t p = 0; p < prefix && p < len; ++p)
        seq[p] = 1 + static_cast<int>(rng.next_below(task.vocab - 1));
      if (prefix < len) seq[prefix] = 0;
      for (std::size_t p = prefix + 1; p < len; ++p) seq[p] = seq[(p - prefix - 1) % prefix];
    }
  }
  return ds;
}

// Entropy rate of the generating chain in nats: sum_s pi_s * H(row_s), with
// the stationary distribution from power iteration.
inline double markov_entropy_rate(const Matrix& transition) {
  const std::size_t v = transition.rows;
  std::vector<double> pi(v, 1.0 / static_cast<double>(v));
  for (int it = 0; it < 2000; ++it) {
    std::vector<double> nxt(v, 0.0);
    for (std::size_t s = 0; s < v; ++s)
      for (std::size_t j = 0; j < v; ++j) nxt[j] += pi[s] * transition.at(s, j);
    double delta = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      delta += std::abs(nxt[j] - pi[j]);
      pi[j] = nxt[j];
    }
    if (delta < 1e-14) break;
  }
  double h = 0.0;
  for (std::size_t s = 0; s < v; ++s) {
    double row_h = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      double p = transition.at(s, j);
      if (p > 0.0) row_h -= p * std::log(p);
    }
    h += pi[s] * row_h;
  }
  return h;
}

// Loss of the best order-0 (unigram) predictor on the dataset's target
// positions: the entropy of the empirical marginal.
inline double order0_baseline_loss(const Dataset& ds, std::size_t vocab) {
  std::vector<double> counts(vocab, 0.0);
  double total = 0.0;
  for (const auto& seq : ds.sequences)
    for (std::size_t p = 1; p < seq.size(); ++p) {
      counts[static_cast<std::size_t>(seq[p])] += 1.0;
      total += 1.0;
    }
  double h = 0.0;
  for (double c : counts) {
    if (c > 0.0) {
      double p = c / total;
      h -= p * std::log(p);
    }
  }
  return h;
}

}  // namespace actcomp
