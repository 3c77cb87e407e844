// Built at float32, the precision checkpoints are stored and served in.

#include <gtest/gtest.h>

#include "json.hpp"

#include "support.hpp"
#include "vibprune/extract.hpp"
#include "vibprune/pipeline.hpp"

using namespace vibprune;
using namespace vibprune_test;

namespace {

double max_gap(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - b.data()[i]));
  return worst;
}

Tensor masked_logits(const GatedTransformer& s, const TokenBatch& x) { return forward(s, x, {ForwardMode::kEval}).logits; }

bool same(const Tensor& a, const Tensor& b) {
  if (a.defined() != b.defined()) return false;
  if (!a.defined()) return true;
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(Extract, NothingMaskedReproducesTeacher) {
  const ModelConfig c = tiny_config(16, 2, 4, 24);
  const GatedTransformer t = random_teacher(c, 1, 0.2);
  GatedTransformer s = build_student(t, {1.0, 0.0, 0.1, 0}, GateBetas::uniform(0));
  binarize(s, 0);
  const DenseModel d = extract_dense(s);
  EXPECT_EQ(d.width(), c.width);
  EXPECT_EQ(d.layers.size(), c.layers);
  EXPECT_EQ(d.layers[0].attention->kept_heads.size(), c.heads);
  EXPECT_EQ(param_count(d), param_count(dense_from_teacher(t)));
  const TokenBatch x = random_tokens(c, 8, 6, 2);
  EXPECT_LT(max_gap(dense_forward(d, x), forward(t, x, {}).logits), 1e-6);
}

TEST(Extract, OneHeadMasked) {
  const ModelConfig c = tiny_config(16, 2, 2, 24);
  GatedTransformer s = build_student(random_teacher(c, 2, 0.2), {1.0, 0.2, 0.1, 1}, GateBetas::uniform(0));
  s.gates->layers[1].heads.mu().data()[0] = 0;
  binarize(s, 0);
  const DenseModel d = extract_dense(s);
  ASSERT_TRUE(d.layers[1].attention.has_value());
  EXPECT_EQ(d.layers[1].attention->kept_heads, (std::vector<std::size_t>{1}));
  EXPECT_EQ(d.layers[0].attention->kept_heads.size(), 2u);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const TokenBatch x = random_tokens(c, 1, 1 + seed % 6, seed);
    EXPECT_LT(max_gap(dense_forward(d, x), masked_logits(s, x)), 1e-5);
  }
}

TEST(Extract, DeadLayerIsDeleted) {
  const ModelConfig c = tiny_config(16, 2, 2, 24);
  GatedTransformer s = build_student(random_teacher(c, 3, 0.2), {1.0, 0.2, 0.1, 2}, GateBetas::uniform(0));
  s.gates->layers[1].layer_mha.mu().data()[0] = 0;
  s.gates->layers[1].layer_ffn.mu().data()[0] = 0;
  s.gates->layers[0].layer_ffn.mu().data()[0] = 0;
  binarize(s, 0);
  const DenseModel d = extract_dense(s);
  ASSERT_EQ(d.layers.size(), 1u);
  EXPECT_EQ(d.layers[0].source_layer, 0u);
  EXPECT_TRUE(d.layers[0].attention.has_value());
  EXPECT_FALSE(d.layers[0].ffn.has_value());
  const TokenBatch x = random_tokens(c, 10, 6, 4);
  EXPECT_LT(max_gap(dense_forward(d, x), masked_logits(s, x)), 1e-5);
  const ExtractReport r = extract_report(d);
  EXPECT_EQ(r.layers_kept, (std::vector<std::size_t>{0}));
  EXPECT_EQ(r.heads_kept_per_layer, (std::vector<std::size_t>{2, 0}));
  EXPECT_EQ(r.inter_kept_per_layer, (std::vector<std::size_t>{0, 0}));
}

TEST(Extract, RandomAssignmentsMatchMaskedModel) {
  for (bool causal : {false, true}) {
    const ModelConfig c = tiny_config(16, 2, 4, 32, causal);
    const GatedTransformer t = random_teacher(c, 4, 0.2);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      GatedTransformer s = build_student(t, {}, GateBetas::uniform(0));
      random_hard_gates(s, seed + 100);
      binarize(s, 0);
      const DenseModel d = extract_dense(s);
      const TokenBatch x = random_tokens(c, 100, 6, seed);
      EXPECT_LT(max_gap(dense_forward(d, x), masked_logits(s, x)), 1e-5) << "seed " << seed;
    }
  }
}

TEST(Extract, Idempotent) {
  const ModelConfig c = tiny_config(16, 2, 4, 32);
  GatedTransformer s = build_student(random_teacher(c, 5, 0.2), {}, GateBetas::uniform(0));
  random_hard_gates(s, 7);
  binarize(s, 0);
  const DenseModel a = extract_dense(s);
  const DenseModel b = extract_dense(a);
  EXPECT_EQ(a.kept_width, b.kept_width);
  EXPECT_EQ(a.norm_width, b.norm_width);
  EXPECT_TRUE(same(a.tok_emb, b.tok_emb) && same(a.pos_emb, b.pos_emb) && same(a.cls_weight, b.cls_weight) &&
              same(a.cls_bias, b.cls_bias) && same(a.lnf_weight, b.lnf_weight));
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].attention.has_value(), b.layers[i].attention.has_value());
    if (a.layers[i].attention) {
      EXPECT_EQ(a.layers[i].attention->kept_heads, b.layers[i].attention->kept_heads);
      EXPECT_TRUE(same(a.layers[i].attention->wq, b.layers[i].attention->wq));
      EXPECT_TRUE(same(a.layers[i].attention->wo, b.layers[i].attention->wo));
    }
    if (a.layers[i].ffn) {
      EXPECT_EQ(a.layers[i].ffn->out_index, b.layers[i].ffn->out_index);
      EXPECT_TRUE(same(a.layers[i].ffn->wd, b.layers[i].ffn->wd));
    }
  }
  EXPECT_EQ(param_count(a), param_count(b));
}

TEST(Extract, DegenerateModels) {
  const ModelConfig c = tiny_config();
  const GatedTransformer t = random_teacher(c, 6);
  GatedTransformer s = build_student(t, {}, GateBetas::uniform(0));
  std::fill(s.gates->width->mu().data().begin(), s.gates->width->mu().data().end(), real(0));
  binarize(s, 0);
  try {
    extract_dense(s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDegenerateModel);
  }

  GatedTransformer u = build_student(t, {}, GateBetas::uniform(0));
  EXPECT_THROW(extract_dense(u), Error);  // not binarized
}

TEST(ParamCount, RegressionConstant) {
  ModelConfig c;
  c.vocab_size = 64;
  c.max_seq = 32;
  c.width = 32;
  c.layers = 2;
  c.heads = 4;
  c.ffn_dim = 64;
  c.num_classes = 2;
  // (64+32)*32 embeddings + 2 * (4*32^2 + 4*32 + 2*32*64 + 64 + 32 + 4*32 norm terms)
  // + 2*32 final norm + 32*2 classifier weights
  const DenseModel d = dense_from_teacher(build_teacher(c, 0));
  EXPECT_EQ(param_count(d), 20288u);
  EXPECT_EQ(build_count_model(c, SparsityMetric::kParameters).total_base, 20288.0);
}

TEST(FlopCount, ScalingInSequenceLength) {
  ModelConfig c = tiny_config(16, 1, 2, 32);
  c.max_seq = 64;
  const DenseModel d = dense_from_teacher(build_teacher(c, 0));
  // f(S) = a S^2 + b S + e: the second difference is constant and positive.
  const double f1 = static_cast<double>(flop_count(d, 8)), f2 = static_cast<double>(flop_count(d, 16));
  const double f3 = static_cast<double>(flop_count(d, 24)), f4 = static_cast<double>(flop_count(d, 32));
  EXPECT_GT(f3 - 2 * f2 + f1, 0.0);
  EXPECT_EQ(f3 - 2 * f2 + f1, f4 - 2 * f3 + f2);
  EXPECT_EQ(build_count_model(c, SparsityMetric::kFlops, 24).total_base, f3);
}

TEST(ExtractReport, SidecarFields) {
  const ModelConfig c = tiny_config(16, 2, 4, 32);
  GatedTransformer s = build_student(random_teacher(c, 8, 0.2), {}, GateBetas::uniform(0));
  random_hard_gates(s, 3);
  const StructureKeep keep = StructureKeep::from_hard_masks(s, 0);
  binarize(s, 0);
  const DenseModel d = extract_dense(s);
  const ExtractReport r = extract_report(d);
  EXPECT_EQ(r.d_kept, d.width());
  EXPECT_EQ(r.params, param_count(d));
  EXPECT_EQ(r.flops, flop_count(d, c.max_seq));
  const CountModel counts = build_count_model(c, SparsityMetric::kParameters);
  EXPECT_NEAR(r.sparsity_params, 1 - kept_count(counts, keep) / counts.total_base, 1e-12);

  const auto j = nlohmann::json::parse(report_json(r));
  for (const char* key : {"d_kept", "heads_kept_per_layer", "inter_kept_per_layer", "out_kept_per_layer",
                          "layers_kept", "params", "flops", "sparsity_params", "sparsity_flops"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["params"].get<std::size_t>(), r.params);
}
