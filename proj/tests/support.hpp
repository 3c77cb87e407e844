#pragma once

// Fixtures shared by the unit and acceptance tests.

#include <cmath>
#include <random>

#include "vibprune/model.hpp"

namespace vibprune_test {

using namespace vibprune;

inline ModelConfig tiny_config(std::size_t width = 8, std::size_t layers = 2, std::size_t heads = 2,
                               std::size_t ffn = 12, bool causal = false) {
  ModelConfig c;
  c.vocab_size = 10;
  c.max_seq = 6;
  c.width = width;
  c.layers = layers;
  c.heads = heads;
  c.ffn_dim = ffn;
  c.num_classes = 3;
  c.causal = causal;
  return c;
}

inline TokenBatch random_tokens(const ModelConfig& c, std::size_t batch, std::size_t seq, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, static_cast<int>(c.vocab_size) - 1);
  TokenBatch t{batch, seq, std::vector<std::int32_t>(batch * seq)};
  for (auto& id : t.ids) id = u(rng);
  return t;
}

/// Teacher with every weight redrawn at `stddev`, so masking has visible effects.
inline GatedTransformer random_teacher(const ModelConfig& c, std::uint64_t seed, double stddev = 0.4) {
  GatedTransformer t = build_teacher(c, seed);
  std::mt19937_64 rng(seed * 7919 + 1);
  std::normal_distribution<double> n(0, stddev);
  for (auto& [name, w] : t.named_weights())
    for (real& v : w.data()) v = static_cast<real>(n(rng));
  return t;
}

/// Puts every gate unit in a clean hard state: kept units get |mu| in [0.5, 1.5]
/// with sigma 0.1, dropped units get mu 0. At least one width dim and one
/// sub-layer stay alive so the result can be extracted.
inline void random_hard_gates(GatedTransformer& s, std::uint64_t seed, double keep_prob = 0.6) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(keep_prob);
  std::uniform_real_distribution<double> mag(0.5, 1.5);
  auto fill = [&](VibGate& g) {
    for (std::size_t j = 0; j < g.unit_count(); ++j) {
      const bool k = keep(rng);
      const double m = mag(rng) * (keep(rng) ? 1 : -1);
      g.mu().data()[j] = static_cast<real>(k ? m : 0.0);
      g.log_sigma().data()[j] = static_cast<real>(std::log(0.1));
    }
  };
  for (auto& [name, g] : s.gates->named()) fill(*g);
  s.gates->width->mu().data()[rng() % s.config.width] = 1;
  auto& l = s.gates->layers[rng() % s.config.layers];
  if (rng() % 2)
    l.layer_mha.mu().data()[0] = 1;
  else
    l.layer_ffn.mu().data()[0] = 1;
}

}  // namespace vibprune_test
