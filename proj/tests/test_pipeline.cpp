#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "support.hpp"
#include "vibprune/pipeline.hpp"

using namespace vibprune;
using namespace vibprune_test;

namespace {

TaskSpec small_task() {
  TaskSpec t;
  t.kind = TaskKind::kMajorityPair;
  t.vocab_size = 8;
  t.payload_len = 8;
  t.seed = 4;
  t.set_total(600);
  return t;
}

ModelConfig small_model(const TaskSpec& t) {
  ModelConfig c;
  c.vocab_size = t.vocab_size;
  c.max_seq = t.seq_len();
  c.width = 16;
  c.layers = 2;
  c.heads = 2;
  c.ffn_dim = 32;
  c.num_classes = 2;
  return c;
}

RunConfig quick_run(Variant v = Variant::kVTrans) {
  RunConfig r = RunConfig::for_variant(v);
  r.epochs_prune = 2;
  r.epochs_finetune = 1;
  r.batch_size = 32;
  r.lr_gates = 1e-2;
  r.target = 0.4;
  r.seed = 9;
  if (v != Variant::kVTrans) r.subset_fraction = 0.2;
  return r;
}

// One trained teacher shared by every test in the file.
class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    data_ = new DatasetSplits(generate(small_task()));
    TeacherTrainConfig tc;
    tc.epochs = 4;
    tc.seed = 1;
    teacher_ = new GatedTransformer(train_teacher(small_model(data_->spec), data_->train, tc));
  }
  static void TearDownTestSuite() {
    delete data_;
    delete teacher_;
  }

  static std::map<std::string, std::vector<real>> snapshot(const GatedTransformer& m) {
    std::map<std::string, std::vector<real>> out;
    for (const auto& [name, t] : m.named_parameters()) out[name] = {t.data().begin(), t.data().end()};
    return out;
  }

  static DatasetSplits* data_;
  static GatedTransformer* teacher_;
};

DatasetSplits* PipelineTest::data_ = nullptr;
GatedTransformer* PipelineTest::teacher_ = nullptr;

Dataset labelled(std::size_t ones, std::size_t zeros) {
  Dataset d;
  d.seq = 1;
  for (std::size_t i = 0; i < ones + zeros; ++i) {
    d.tokens.push_back(static_cast<std::int32_t>(i));
    d.labels.push_back(i < ones ? 1 : 0);
  }
  return d;
}

}  // namespace

TEST(Subset, Examples) {
  const Dataset d = labelled(500, 500);
  EXPECT_EQ(subset(d, 0.03, 1).size(), 30u);
  const Dataset ten = subset(d, 0.1, 1);
  EXPECT_EQ(std::count(ten.labels.begin(), ten.labels.end(), 1), 50);
  EXPECT_EQ(std::count(ten.labels.begin(), ten.labels.end(), 0), 50);
  const Dataset all = subset(d, 1.0, 1);
  EXPECT_EQ(all.tokens, d.tokens);
  EXPECT_EQ(subset(d, 1e-6, 1).size(), 1u);
}

TEST(Subset, DeterministicAndOrdered) {
  const Dataset d = labelled(300, 700);
  const auto a = subset_indices(d, 0.05, 3), b = subset_indices(d, 0.05, 3), c = subset_indices(d, 0.05, 4);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
}

TEST(RunConfigContract, VariantDefaultsAndValidation) {
  EXPECT_EQ(RunConfig::for_variant(Variant::kVTrans).subset_fraction, 1.0);
  EXPECT_EQ(RunConfig::for_variant(Variant::kFast).subset_fraction, 0.03);
  EXPECT_EQ(RunConfig::for_variant(Variant::kFaster).subset_fraction, 0.03);
  RunConfig r;
  r.subset_fraction = 0.5;
  EXPECT_THROW(r.validate(), Error);  // vtrans needs the full data
  r = RunConfig::for_variant(Variant::kFast);
  r.subset_fraction = 0;
  EXPECT_THROW(r.validate(), Error);
  r = RunConfig{};
  r.target = 1.0;
  EXPECT_THROW(r.validate(), Error);
  r = RunConfig{};
  r.lr_final_scale = 0;
  EXPECT_THROW(r.validate(), Error);
  r.lr_final_scale = 1;  // constant rates
  EXPECT_NO_THROW(r.validate());
  for (Variant v : {Variant::kVTrans, Variant::kFast, Variant::kFaster}) EXPECT_EQ(parse_variant(variant_name(v)), v);
}

TEST(FreezePolicyContract, Predicates) {
  const FreezePolicy faster = FreezePolicy::for_variant(Variant::kFaster);
  const FreezePolicy full = FreezePolicy::for_variant(Variant::kFast);
  for (const char* n : {"gate.heads.0.mu", "layer.1.ln2.weight", "lnf.bias", "layer.0.wq.bias", "cls.bias"})
    EXPECT_TRUE(faster.trainable(n)) << n;
  for (const char* n : {"layer.0.wq.weight", "emb.tok", "emb.pos", "cls.weight", "layer.1.wd.weight"}) {
    EXPECT_FALSE(faster.trainable(n)) << n;
    EXPECT_TRUE(full.trainable(n)) << n;
  }
}

TEST(Binarize, Example) {
  VibGate g = VibGate::from_parameters(GateSite::kHeads, 0, Tensor::from({2}, {1.2, 0.7}, true),
                                       Tensor::from({2}, {static_cast<real>(std::log(1.2) - 0.5),
                                                          static_cast<real>(std::log(0.7) + 0.5)},
                                                    true));
  EXPECT_NEAR(g.log_alpha()[0], 1.0, 1e-5);
  EXPECT_NEAR(g.log_alpha()[1], -1.0, 1e-5);
  g.binarize(0);
  EXPECT_EQ(g.frozen_mask(), (std::vector<real>{real(1.2), 0}));
}

TEST(Binarize, IdempotentAndCommutesWithEvalForward) {
  const ModelConfig c = tiny_config();
  GatedTransformer s = build_student(random_teacher(c, 1), {1, 0.3, 0.5, 2}, GateBetas::uniform(0));
  random_hard_gates(s, 5);
  // Some units sit near the threshold rather than in a clean state.
  s.gates->layers[0].intermediate.log_sigma().data()[0] = s.gates->layers[0].intermediate.mu().data()[0] != 0 ? 0.3f : 0;
  const TokenBatch x = random_tokens(c, 4, 6, 3);
  const Tensor before = forward(s, x, {ForwardMode::kEval, 0.1}).logits;
  binarize(s, 0.1);
  const Tensor after = forward(s, x, {ForwardMode::kEval, 0.1}).logits;
  EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
  const auto masks = s.gates->layers[1].heads.frozen_mask();
  binarize(s, 0.1);
  EXPECT_EQ(s.gates->layers[1].heads.frozen_mask(), masks);
  EXPECT_THROW(binarize(s, 0.2), Error);
  // Frozen masks ignore later parameter edits and the forward mode.
  s.gates->width->mu().data()[0] = 42;
  const Tensor train = forward(s, x, {ForwardMode::kTrain}).logits;
  EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), train.data().begin()));
}

TEST(Binarize, AllLayersDeadIsDegenerate) {
  GatedTransformer s = build_student(random_teacher(tiny_config(), 1), {}, GateBetas::uniform(0));
  for (auto& l : s.gates->layers) {
    l.layer_mha.mu().data()[0] = 0;
    l.layer_ffn.mu().data()[0] = 0;
  }
  try {
    binarize(s, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDegenerateModel);
  }
}

TEST_F(PipelineTest, TeacherLearnsTheTask) { EXPECT_GE(accuracy(*teacher_, data_->val), 0.9); }

TEST_F(PipelineTest, FasterFreezesEveryOtherWeight) {
  const RunConfig run = quick_run(Variant::kFaster);
  GatedTransformer s = make_student(*teacher_, run);
  const auto before = snapshot(s);
  const Dataset train = training_data(data_->train, run);
  const TeacherCache cache(*teacher_, train);
  PruneState state = make_prune_state(s, run, train.size());
  const auto metrics = prune_phase(s, cache, train, state, run);
  EXPECT_FALSE(metrics.empty());
  const FreezePolicy policy = FreezePolicy::for_variant(run.variant);
  for (const auto& [name, values] : snapshot(s)) {
    const bool changed = values != before.at(name);
    EXPECT_EQ(changed, policy.trainable(name)) << name;
  }
}

TEST_F(PipelineTest, VTransUpdatesEveryTensor) {
  const RunConfig run = quick_run();
  GatedTransformer s = make_student(*teacher_, run);
  const auto before = snapshot(s);
  const TeacherCache cache(*teacher_, data_->train);
  PruneState state = make_prune_state(s, run, data_->train.size());
  prune_phase(s, cache, data_->train, state, run);
  for (const auto& [name, values] : snapshot(s)) EXPECT_NE(values, before.at(name)) << name;
}

TEST_F(PipelineTest, MetricsStreamIsWellFormed) {
  const RunConfig run = quick_run(Variant::kFast);
  GatedTransformer s = make_student(*teacher_, run);
  const Dataset train = training_data(data_->train, run);
  EXPECT_EQ(train.size(), 96u);
  const TeacherCache cache(*teacher_, train);
  PruneState state = make_prune_state(s, run, train.size());
  std::vector<StepMetrics> streamed;
  const auto metrics = prune_phase(s, cache, train, state, run, [&](const StepMetrics& m) { streamed.push_back(m); });
  ASSERT_EQ(streamed.size(), metrics.size());
  EXPECT_EQ(metrics.size(), run.epochs_prune * ((train.size() + run.batch_size - 1) / run.batch_size));
  for (std::size_t i = 0; i < metrics.size(); ++i) {
    EXPECT_EQ(metrics[i].step, i);
    EXPECT_EQ(metrics[i].phase, Phase::kPrune);
    EXPECT_TRUE(std::isfinite(metrics[i].loss_total));
    EXPECT_GE(metrics[i].lambda2, 0.0);
    EXPECT_GE(metrics[i].s_e, 0.0);
    EXPECT_LE(metrics[i].s_e, 1.0);
  }
  EXPECT_NEAR(metrics.back().t_cur, run.target, 1e-12);
}

TEST_F(PipelineTest, DivergenceNamesTheStep) {
  const RunConfig run = quick_run(Variant::kFaster);
  GatedTransformer s = make_student(*teacher_, run);
  s.layers[0].wq_weight.data()[0] = std::numeric_limits<real>::quiet_NaN();
  const Dataset train = training_data(data_->train, run);
  const TeacherCache cache(*teacher_, train);
  PruneState state = make_prune_state(s, run, train.size());
  try {
    prune_phase(s, cache, train, state, run);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kNumericDivergence);
    EXPECT_NE(std::string(e.what()).find("prune step 0"), std::string::npos) << e.what();
  }
}

TEST_F(PipelineTest, FinetuneLeavesMaskedEntriesAlone) {
  RunConfig run = quick_run();
  run.epochs_finetune = 2;
  GatedTransformer s = make_student(*teacher_, run);
  random_hard_gates(s, 12, 0.7);
  binarize(s, run.tau);
  const auto before = snapshot(s);
  const TeacherCache cache(*teacher_, data_->train);
  DistillConfig distill = DistillConfig::create(s.config.width, s.config.layers, run.eta);
  finetune_phase(s, cache, data_->train, distill, run);
  std::size_t masked = 0, moved = 0;
  for (const auto& [name, values] : snapshot(s)) {
    if (is_gate_parameter(name)) {
      EXPECT_EQ(values, before.at(name)) << name;
      continue;
    }
    const auto survive = survival_mask(s, name);
    ASSERT_EQ(survive.size(), values.size()) << name;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!survive[i]) {
        ++masked;
        EXPECT_EQ(values[i], before.at(name)[i]) << name << "[" << i << "]";
      } else if (values[i] != before.at(name)[i]) {
        ++moved;
      }
    }
  }
  EXPECT_GT(masked, 0u);
  EXPECT_GT(moved, 0u);
}

TEST_F(PipelineTest, ZeroFinetuneEpochsChangeNothing) {
  RunConfig run = quick_run();
  run.epochs_finetune = 0;
  GatedTransformer s = make_student(*teacher_, run);
  binarize(s, run.tau);
  const auto before = snapshot(s);
  const TeacherCache cache(*teacher_, data_->train);
  DistillConfig distill = DistillConfig::create(s.config.width, s.config.layers, run.eta);
  EXPECT_TRUE(finetune_phase(s, cache, data_->train, distill, run).empty());
  EXPECT_EQ(snapshot(s), before);
}

TEST_F(PipelineTest, NoTargetNoBetaKeepsAlmostEverything) {
  RunConfig run = quick_run();
  run.target = 0;
  run.betas = GateBetas::uniform(0);
  GatedTransformer s = make_student(*teacher_, run);
  const TeacherCache cache(*teacher_, data_->train);
  PruneState state = make_prune_state(s, run, data_->train.size());
  prune_phase(s, cache, data_->train, state, run);
  std::size_t dropped = 0, total = 0;
  for (const auto& [name, g] : s.gates->named()) {
    for (auto m : g->hard_mask(run.tau)) dropped += m == 0;
    total += g->unit_count();
  }
  EXPECT_LT(static_cast<double>(dropped), 0.05 * static_cast<double>(total));
}

TEST_F(PipelineTest, FullPipelineIsDeterministic) {
  const RunConfig run = quick_run(Variant::kFast);
  const PipelineResult a = run_pipeline(*teacher_, data_->train, data_->val, run);
  const PipelineResult b = run_pipeline(*teacher_, data_->train, data_->val, run);
  EXPECT_EQ(a.accuracy_dense, b.accuracy_dense);
  EXPECT_EQ(a.report.params, b.report.params);
  ASSERT_EQ(a.prune_metrics.size(), b.prune_metrics.size());
  for (std::size_t i = 0; i < a.prune_metrics.size(); ++i) {
    EXPECT_EQ(a.prune_metrics[i].loss_total, b.prune_metrics[i].loss_total);
    EXPECT_EQ(a.prune_metrics[i].s_e, b.prune_metrics[i].s_e);
  }
  EXPECT_EQ(snapshot(a.student), snapshot(b.student));
  // The dense model reproduces the finetuned masked student.
  EXPECT_NEAR(a.accuracy_dense, a.accuracy_finetuned, 1e-12);
}
