#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "vibprune/model.hpp"
#include "vibprune/objective.hpp"

using namespace vibprune;

namespace {

ModelConfig small_config(bool causal = false) {
  ModelConfig c;
  c.vocab_size = 10;
  c.max_seq = 6;
  c.width = 8;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 12;
  c.num_classes = 3;
  c.causal = causal;
  return c;
}

TokenBatch random_tokens(const ModelConfig& c, std::size_t batch, std::size_t seq, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_int_distribution<int> u(0, static_cast<int>(c.vocab_size) - 1);
  TokenBatch t{batch, seq, std::vector<std::int32_t>(batch * seq)};
  for (auto& id : t.ids) id = u(rng);
  return t;
}

// Weights scaled up from the std-0.02 init so gate effects are not lost in rounding.
GatedTransformer random_teacher(const ModelConfig& c, std::uint64_t seed) {
  GatedTransformer t = build_teacher(c, seed);
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<double> n(0, 0.4);
  for (auto& [name, w] : t.named_weights())
    for (real& v : w.data()) v = static_cast<real>(n(rng));
  return t;
}

GatedTransformer identity_student(const GatedTransformer& teacher) {
  return build_student(teacher, {1.0, 0.0, 0.1, 3}, GateBetas::uniform(1e-3));
}

std::vector<real> logits(const GatedTransformer& m, const TokenBatch& t, ForwardMode mode = ForwardMode::kMean) {
  const Tensor out = forward(m, t, {mode, 0.0, false}).logits;
  return {out.data().begin(), out.data().end()};
}

void perturb(Tensor& w, std::size_t rows, std::size_t cols, bool column, std::size_t index, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n(0, 3);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      if ((column ? c : r) == index) w.data()[r * cols + c] += static_cast<real>(n(rng));
}

}  // namespace

TEST(ModelBuild, GateCountsFollowPlacement) {
  ModelConfig c;
  c.width = 32;
  c.layers = 2;
  c.heads = 4;
  c.ffn_dim = 64;
  const GatedTransformer s = identity_student(build_teacher(c, 0));
  // z_layer,i is stored as two 1-unit gates (MHA and FFN); as one gate per
  // layer the count is 1 + 4 L.
  EXPECT_EQ(s.gates->named().size(), 11u);
  EXPECT_EQ(s.gates->named().size() - c.layers, 9u);
  EXPECT_EQ(s.gates->total_units(), 236u);
  EXPECT_EQ(s.gates->width->unit_count(), 32u);
  EXPECT_EQ(s.gates->layers[1].heads.unit_count(), 4u);
  EXPECT_EQ(s.gates->layers[1].intermediate.unit_count(), 64u);
  EXPECT_EQ(s.gates->layers[1].output.unit_count(), 32u);
  EXPECT_EQ(s.gates->layers[0].layer_mha.unit_count(), 1u);
}

TEST(ModelBuild, TeacherIsDeterministic) {
  const auto a = build_teacher(small_config(), 5).named_weights();
  const auto b = build_teacher(small_config(), 5).named_weights();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_TRUE(std::equal(a[i].second.data().begin(), a[i].second.data().end(), b[i].second.data().begin()));
  }
}

TEST(ModelBuild, InvalidConfigIsContractError) {
  ModelConfig c = small_config();
  c.heads = 3;
  EXPECT_THROW(build_teacher(c, 0), Error);
  c = small_config();
  c.layers = 0;
  EXPECT_THROW(build_teacher(c, 0), Error);
}

TEST(ModelBuild, StudentCopiesTeacherDeeply) {
  GatedTransformer t = build_teacher(small_config(), 1);
  const GatedTransformer s = identity_student(t);
  t.tok_emb.data()[0] += 1;
  EXPECT_NE(s.tok_emb.data()[0], t.tok_emb.data()[0]);
}

TEST(ModelForward, FreshTeacherIsFinite) {
  const ModelConfig c = small_config();
  for (real v : logits(build_teacher(c, 2), random_tokens(c, 4, 6, 1))) EXPECT_TRUE(std::isfinite(v));
}

TEST(ModelForward, IdentityGatesReproduceTeacher) {
  const ModelConfig c = small_config();
  const GatedTransformer t = random_teacher(c, 2);
  const TokenBatch x = random_tokens(c, 4, 6, 1);
  EXPECT_EQ(logits(identity_student(t), x), logits(t, x));
}

TEST(ModelForward, ZeroBetasGiveZeroVib) {
  const GatedTransformer s =
      build_student(build_teacher(small_config(), 0), {1, 0.3, 0.1, 0}, GateBetas::uniform(0.0));
  EXPECT_EQ(vib_loss(s).item(), 0.0);
}

TEST(ModelForward, TokenOutsideVocabulary) {
  const ModelConfig c = small_config();
  TokenBatch x = random_tokens(c, 1, 3, 0);
  x.ids[1] = static_cast<std::int32_t>(c.vocab_size);
  try {
    forward(build_teacher(c, 0), x, {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kData);
  }
}

TEST(ModelForward, HandComputedSingleToken) {
  ModelConfig c;
  c.vocab_size = 3;
  c.max_seq = 2;
  c.width = 2;
  c.layers = 1;
  c.heads = 1;
  c.ffn_dim = 2;
  c.num_classes = 2;
  GatedTransformer m = build_teacher(c, 0);
  int k = 0;
  for (auto& [name, w] : m.named_weights())
    for (real& v : w.data()) v = static_cast<real>(0.3 * std::sin(1.7 * ++k) + (name.find("ln") != std::string::npos ? 1 : 0));

  auto W = [](const Tensor& t, std::size_t r, std::size_t col) { return static_cast<double>(t.data()[r * 2 + col]); };
  auto b = [](const Tensor& t, std::size_t i) { return static_cast<double>(t.data()[i]); };
  auto ln = [&](std::array<double, 2> x, const Tensor& g, const Tensor& beta) {
    const double mu = (x[0] + x[1]) / 2;
    const double var = ((x[0] - mu) * (x[0] - mu) + (x[1] - mu) * (x[1] - mu)) / 2;
    const double r = 1 / std::sqrt(var + 1e-5);
    return std::array<double, 2>{(x[0] - mu) * r * b(g, 0) + b(beta, 0), (x[1] - mu) * r * b(g, 1) + b(beta, 1)};
  };
  auto affine = [&](std::array<double, 2> x, const Tensor& w, const Tensor& bias) {
    return std::array<double, 2>{x[0] * W(w, 0, 0) + x[1] * W(w, 1, 0) + b(bias, 0),
                                 x[0] * W(w, 0, 1) + x[1] * W(w, 1, 1) + b(bias, 1)};
  };
  auto gelu = [](double x) {
    return 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
  };

  const auto& L = m.layers[0];
  std::array<double, 2> x{W(m.tok_emb, 1, 0) + W(m.pos_emb, 0, 0), W(m.tok_emb, 1, 1) + W(m.pos_emb, 0, 1)};
  // One token attends only to itself, so the context is its value vector.
  const auto v = affine(ln(x, L.ln1_weight, L.ln1_bias), L.wv_weight, L.wv_bias);
  const auto attn = affine(v, L.wo_weight, L.wo_bias);
  x = {x[0] + attn[0], x[1] + attn[1]};
  auto u = affine(ln(x, L.ln2_weight, L.ln2_bias), L.wu_weight, L.wu_bias);
  u = {gelu(u[0]), gelu(u[1])};
  const auto h = affine(u, L.wd_weight, L.wd_bias);
  x = {x[0] + h[0], x[1] + h[1]};
  const auto expected = affine(ln(x, m.lnf_weight, m.lnf_bias), m.cls_weight, m.cls_bias);

  const auto got = logits(m, TokenBatch{1, 1, {1}});
  EXPECT_NEAR(got[0], expected[0], 1e-6);
  EXPECT_NEAR(got[1], expected[1], 1e-6);
}

TEST(ModelForward, LayerGatesOffLeaveEmbeddingPath) {
  const ModelConfig c = small_config();
  GatedTransformer s = build_student(random_teacher(c, 4), {1, 0.2, 0.1, 8}, GateBetas::uniform(0));
  for (auto& g : s.gates->layers) {
    g.layer_mha.mu().data()[0] = 0;
    g.layer_ffn.mu().data()[0] = 0;
  }
  const TokenBatch x = random_tokens(c, 3, 5, 2);
  const auto got = logits(s, x);

  // classifier(pool(z_m * lnf(z_m * embedding)))
  const auto& zm = s.gates->width->mu().data();
  for (std::size_t bi = 0; bi < 3; ++bi) {
    std::vector<double> e(c.width);
    for (std::size_t j = 0; j < c.width; ++j)
      e[j] = (s.tok_emb.data()[x.ids[bi * 5] * c.width + j] + s.pos_emb.data()[j]) * zm[j];
    double mu = 0, var = 0;
    for (double v : e) mu += v / c.width;
    for (double v : e) var += (v - mu) * (v - mu) / c.width;
    for (std::size_t k = 0; k < c.num_classes; ++k) {
      double acc = s.cls_bias.data()[k];
      for (std::size_t j = 0; j < c.width; ++j) {
        const double y = ((e[j] - mu) / std::sqrt(var + 1e-5) * s.lnf_weight.data()[j] + s.lnf_bias.data()[j]) * zm[j];
        acc += y * s.cls_weight.data()[j * c.num_classes + k];
      }
      EXPECT_NEAR(got[bi * c.num_classes + k], acc, 1e-9);
    }
  }
}

TEST(ModelForward, ZeroHeadGateIgnoresHeadWeights) {
  const ModelConfig c = small_config();
  GatedTransformer s = build_student(random_teacher(c, 6), {1, 0.2, 0.1, 1}, GateBetas::uniform(0));
  const std::size_t h = 1, dh = c.head_dim(), d = c.width;
  s.gates->layers[0].heads.mu().data()[h] = 0;
  const TokenBatch x = random_tokens(c, 3, 6, 3);
  const auto before = logits(s, x);
  auto& w = s.layers[0];
  for (std::size_t col = h * dh; col < (h + 1) * dh; ++col) {
    perturb(w.wq_weight, d, d, true, col, 1);
    perturb(w.wk_weight, d, d, true, col, 2);
    perturb(w.wv_weight, d, d, true, col, 3);
    perturb(w.wo_weight, d, d, false, col, 4);
    w.wq_bias.data()[col] += 2;
    w.wv_bias.data()[col] -= 2;
  }
  EXPECT_EQ(logits(s, x), before);
}

TEST(ModelForward, ZeroFfnGatesIgnoreTheirWeights) {
  const ModelConfig c = small_config();
  GatedTransformer s = build_student(random_teacher(c, 7), {1, 0.2, 0.1, 2}, GateBetas::uniform(0));
  s.gates->layers[1].intermediate.mu().data()[4] = 0;
  s.gates->layers[1].output.mu().data()[2] = 0;
  const TokenBatch x = random_tokens(c, 2, 6, 4);
  const auto before = logits(s, x);
  auto& w = s.layers[1];
  perturb(w.wu_weight, c.width, c.ffn_dim, true, 4, 5);
  perturb(w.wd_weight, c.ffn_dim, c.width, false, 4, 6);
  perturb(w.wd_weight, c.ffn_dim, c.width, true, 2, 7);
  w.wu_bias.data()[4] += 3;
  w.wd_bias.data()[2] += 3;
  EXPECT_EQ(logits(s, x), before);
}

TEST(ModelForward, ZeroWidthGateIgnoresEmbeddingColumn) {
  const ModelConfig c = small_config();
  GatedTransformer s = build_student(random_teacher(c, 8), {1, 0.2, 0.1, 3}, GateBetas::uniform(0));
  const std::size_t j = 5;
  s.gates->width->mu().data()[j] = 0;
  const TokenBatch x = random_tokens(c, 2, 6, 5);
  const auto before = logits(s, x);
  perturb(s.tok_emb, c.vocab_size, c.width, true, j, 8);
  perturb(s.pos_emb, c.max_seq, c.width, true, j, 9);
  for (auto& w : s.layers) {
    w.wo_bias.data()[j] += 4;
    w.wd_bias.data()[j] -= 4;
    perturb(w.wq_weight, c.width, c.width, false, j, 10);
    perturb(w.wu_weight, c.width, c.ffn_dim, false, j, 11);
  }
  perturb(s.cls_weight, c.width, c.num_classes, false, j, 12);
  EXPECT_EQ(logits(s, x), before);
}

TEST(ModelForward, ZeroLayerGateIgnoresSubLayer) {
  const ModelConfig c = small_config();
  GatedTransformer s = build_student(random_teacher(c, 9), {1, 0.2, 0.1, 4}, GateBetas::uniform(0));
  s.gates->layers[0].layer_ffn.mu().data()[0] = 0;
  const TokenBatch x = random_tokens(c, 2, 6, 6);
  const auto before = logits(s, x);
  for (auto* t : {&s.layers[0].wu_weight, &s.layers[0].wd_weight, &s.layers[0].ln2_weight, &s.layers[0].wd_bias})
    for (real& v : t->data()) v += 1.5;
  EXPECT_EQ(logits(s, x), before);
}

TEST(ModelForward, CausalHiddenStatesIgnoreTheFuture) {
  const ModelConfig c = small_config(true);
  const GatedTransformer s = build_student(random_teacher(c, 10), {1, 0.2, 0.1, 5}, GateBetas::uniform(0));
  TokenBatch x = random_tokens(c, 1, 6, 7);
  const auto a = forward(s, x, {ForwardMode::kMean});
  const std::size_t p = 2;
  for (std::size_t s2 = p + 1; s2 < 6; ++s2) x.ids[s2] = (x.ids[s2] + 3) % static_cast<int>(c.vocab_size);
  const auto b = forward(s, x, {ForwardMode::kMean});
  for (std::size_t l = 0; l < c.layers; ++l)
    for (std::size_t pos = 0; pos <= p; ++pos)
      for (std::size_t j = 0; j < c.width; ++j)
        EXPECT_EQ(a.hidden_states[l].data()[pos * c.width + j], b.hidden_states[l].data()[pos * c.width + j]);
  EXPECT_NE(a.hidden_states[1].data()[5 * c.width], b.hidden_states[1].data()[5 * c.width]);
}

TEST(ModelForward, AttentionRowsSumToOne) {
  for (bool causal : {false, true}) {
    const ModelConfig c = small_config(causal);
    const auto trace = forward(random_teacher(c, 11), random_tokens(c, 3, 5, 8), {ForwardMode::kEval, 0, true});
    ASSERT_EQ(trace.attention_probs.size(), c.layers);
    const Tensor& p = trace.attention_probs[1];
    ASSERT_EQ(p.shape(), (Shape{3, c.heads, 5, 5}));
    for (std::size_t r = 0; r < p.numel() / 5; ++r) {
      double total = 0;
      for (std::size_t k = 0; k < 5; ++k) total += p.data()[r * 5 + k];
      EXPECT_NEAR(total, 1.0, 1e-5);
    }
  }
}

TEST(ModelForward, MeanModeIsDeterministicAndTrainModeFollowsNoise) {
  const ModelConfig c = small_config();
  const GatedTransformer s = build_student(random_teacher(c, 12), {1, 0.2, 0.3, 6}, GateBetas::uniform(0));
  const TokenBatch x = random_tokens(c, 2, 4, 9);
  EXPECT_EQ(logits(s, x), logits(s, x));
  NoiseSource n1(4), n2(4), n3(5);
  const auto a = forward(s, x, {ForwardMode::kTrain}, &n1).logits;
  const auto b = forward(s, x, {ForwardMode::kTrain}, &n2).logits;
  const auto d = forward(s, x, {ForwardMode::kTrain}, &n3).logits;
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
  EXPECT_FALSE(std::equal(a.data().begin(), a.data().end(), d.data().begin()));
  EXPECT_THROW(forward(s, x, {ForwardMode::kTrain}), Error);
}

TEST(ModelForward, CrossEntropyGradcheck) {
  const ModelConfig c = small_config();
  GatedTransformer s = build_student(build_teacher(c, 13), {0.5, 0.3, 0.5, 7}, GateBetas::uniform(0));
  const TokenBatch x = random_tokens(c, 3, 6, 10);
  const std::vector<std::int32_t> labels{0, 2, 1};
  std::vector<Tensor> params;
  for (auto& [name, t] : s.named_parameters()) params.push_back(t);
  const double err = gradcheck(
      [&](std::uint64_t seed) {
        NoiseSource noise(seed);
        return task_cross_entropy(forward(s, x, {ForwardMode::kTrain}, &noise).logits, labels);
      },
      params, 3e-5, 17);
  EXPECT_LT(err, 1e-3);
}
