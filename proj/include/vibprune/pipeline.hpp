#pragma once

// Training loops: teacher training, the pruning phase with the Lagrangian
// sparsity controller, mask binarization, and masked finetuning. Three
// variants differ in data fraction and in which tensors train:
//
//   vtrans : full data, all weights and gates
//   fast   : data subset, all weights and gates
//   faster : data subset, gates plus norm and bias parameters only

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vibprune/data.hpp"
#include "vibprune/extract.hpp"
#include "vibprune/objective.hpp"
#include "vibprune/optim.hpp"

VIBPRUNE_NAMESPACE_BEGIN

enum class Variant { kVTrans, kFast, kFaster };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

enum class Phase { kTeacher, kPrune, kFinetune };
std::string_view phase_name(Phase p);

struct RunConfig {
  Variant variant = Variant::kVTrans;
  std::size_t epochs_prune = 10;
  std::size_t epochs_finetune = 3;
  std::size_t batch_size = 32;
  double lr_weights = 3e-4;
  double lr_gates = 3e-3;
  double lambda_lr = 0.01;
  double subset_fraction = 1.0;
  std::uint64_t seed = 0;
  double tau = 0.0;
  double temperature = 1.0;
  double target = 0.5;
  SparsityMetric metric = SparsityMetric::kParameters;
  double eta = 0.5;
  GateBetas betas;
  GateInit gate_init;
  double weight_decay = 0.01;
  double warmup_fraction = 0.3;
  // Pruning learning rates decay linearly from the end of the target ramp to
  // this multiple of their base value at the last step; 1 keeps them constant.
  double lr_final_scale = 0.1;
  std::size_t ref_seq = 0;  // flops reference length, 0 = model max_seq
  bool reverse_kl = false;

  /// subset_fraction 0.03 for fast and faster, 1 for vtrans.
  static RunConfig for_variant(Variant variant);
  void validate() const;
};

struct FreezePolicy {
  std::function<bool(const std::string&)> trainable;

  static FreezePolicy for_variant(Variant variant);
};

bool is_norm_parameter(const std::string& name);
bool is_bias_parameter(const std::string& name);
bool is_gate_parameter(const std::string& name);

struct StepMetrics {
  std::size_t step = 0;
  Phase phase = Phase::kPrune;
  double loss_total = 0, loss_task = 0, loss_vib = 0, loss_pred = 0, loss_layer = 0, loss_sparsity = 0;
  double s_e = 0, t_cur = 0, lambda1 = 0, lambda2 = 0;
  std::optional<double> val_accuracy;
};

using MetricsSink = std::function<void(const StepMetrics&)>;

/// Teacher logits and hidden states for every example, computed once in eval mode.
class TeacherCache {
 public:
  TeacherCache(const GatedTransformer& teacher, const Dataset& data);
  Tensor logits(std::span<const std::size_t> indices) const;
  std::vector<Tensor> hiddens(std::span<const std::size_t> indices) const;

 private:
  std::size_t seq_, width_, classes_;
  std::vector<real> logits_;
  std::vector<std::vector<real>> hiddens_;
};

struct PruneState {
  DistillConfig distill;
  SparsityController controller;
  CountModel counts;
};

/// Controller with the ramp spanning warmup_fraction of all pruning steps.
PruneState make_prune_state(const GatedTransformer& student, const RunConfig& config, std::size_t train_size);

/// Runs epochs_prune epochs. Throws numeric divergence naming the step when a
/// loss turns non-finite.
std::vector<StepMetrics> prune_phase(GatedTransformer& student, const TeacherCache& teacher, const Dataset& train,
                                     PruneState& state, const RunConfig& config, const MetricsSink& sink = {});

/// Freezes every gate at mu * hard_mask(tau). Degenerate model error when no
/// sub-layer of any layer survives.
void binarize(GatedTransformer& student, double tau);

/// Per-entry 1 where every hard mask the entry depends on is 1.
std::vector<std::uint8_t> survival_mask(const GatedTransformer& student, const std::string& name);

std::vector<StepMetrics> finetune_phase(GatedTransformer& student, const TeacherCache& teacher, const Dataset& train,
                                        DistillConfig& distill, const RunConfig& config,
                                        const MetricsSink& sink = {});

/// Label-stratified sample of max(1, round(fraction N)) rows, in original order.
std::vector<std::size_t> subset_indices(const Dataset& data, double fraction, std::uint64_t seed);
Dataset subset(const Dataset& data, double fraction, std::uint64_t seed);

struct TeacherTrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
};

GatedTransformer train_teacher(const ModelConfig& model, const Dataset& train, const TeacherTrainConfig& config,
                               const MetricsSink& sink = {});

/// Eval-mode accuracy (gates at mu * hard mask).
double accuracy(const GatedTransformer& model, const Dataset& data, double tau = 0.0);
double accuracy(const DenseModel& model, const Dataset& data);

/// The rows pruning and finetuning train on: all of `train` for vtrans, the
/// stratified subset otherwise.
Dataset training_data(const Dataset& train, const RunConfig& config);

/// Student over the teacher with gates seeded from config.seed and gate_init.seed.
GatedTransformer make_student(const GatedTransformer& teacher, const RunConfig& config);

struct PipelineResult {
  GatedTransformer student;
  DenseModel dense;
  ExtractReport report;
  double accuracy_binarized = 0;
  double accuracy_finetuned = 0;
  double accuracy_dense = 0;
  std::vector<StepMetrics> prune_metrics;
  std::vector<StepMetrics> finetune_metrics;
};

/// Build student, prune, binarize, finetune, extract. Accuracies are on `eval`.
PipelineResult run_pipeline(const GatedTransformer& teacher, const Dataset& train, const Dataset& eval,
                            const RunConfig& config, const MetricsSink& sink = {});

VIBPRUNE_NAMESPACE_END
