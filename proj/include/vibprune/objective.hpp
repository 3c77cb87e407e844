#pragma once

// Pruning objective: task loss, VIB penalty, prediction and layer
// distillation, and the Lagrangian sparsity penalty on expected sparsity.

#include <optional>
#include <span>
#include <vector>

#include "vibprune/model.hpp"

VIBPRUNE_NAMESPACE_BEGIN

// ---- distillation ----

struct DistillConfig {
  double eta = 0.5;
  Tensor w_layer;                            // (d, d), starts at identity
  std::vector<std::size_t> teacher_layers;   // distilled teacher layer indices
  bool reverse_kl = false;                   // KL(p_t || p_s) instead of KL(p_s || p_t)

  /// w_layer = I, every teacher layer distilled.
  static DistillConfig create(std::size_t width, std::size_t teacher_layer_count, double eta = 0.5);
};

/// Mean over the batch of -log softmax(logits)[label].
Tensor task_cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels);

/// Batch mean of KL(p_s || p_t); teacher logits are treated as constants.
Tensor pred_distill(const Tensor& student_logits, const Tensor& teacher_logits, bool reverse = false);

/// For each teacher hidden i, the alive student layer j minimizing
/// MSE(H_s^j W, H_t^i). Ties go to the smaller j. Computed without gradients.
std::vector<std::size_t> layer_map(const std::vector<Tensor>& student_hiddens,
                                   const std::vector<Tensor>& teacher_hiddens, const Tensor& w_layer,
                                   const std::vector<bool>& alive);

/// sum_i MSE(H_s^{m(i)} W, H_t^i)
Tensor layer_distill(const std::vector<Tensor>& student_hiddens, const std::vector<Tensor>& teacher_hiddens,
                     const Tensor& w_layer, const std::vector<std::size_t>& mapping);

/// Student layer j is alive while soft_keep of its FFN layer gate exceeds 0.5.
std::vector<bool> alive_layers(const GatedTransformer& student, double tau, double temperature);

// ---- VIB ----

/// sum over gates of beta * kl_term.
Tensor vib_loss(const GatedTransformer& student);

// ---- sparsity accounting ----

enum class SparsityMetric { kParameters, kFlops };

std::string_view metric_name(SparsityMetric metric);
SparsityMetric parse_metric(std::string_view name);

/// Base counts attached to each gated group. The kept count of a structure is
///
///   global_m * M + sum_l [ a_l (mha_m M + H_l (mha_hm M + mha_h))
///                         + f_l (ffn_m M + ffn_mi M I_l + ffn_i I_l
///                                + ffn_io I_l O_l + ffn_o O_l) ]
///
/// with M = sum of width keeps, H_l = sum of head keeps, I_l = sum of
/// intermediate keeps, O_l = sum_j out_j m_j and a_l, f_l the layer keeps.
/// Gate parameters and the classifier bias are not counted.
struct CountModel {
  SparsityMetric metric = SparsityMetric::kParameters;
  ModelConfig config;
  std::size_t ref_seq = 0;

  double global_m = 0;
  double mha_m = 0, mha_hm = 0, mha_h = 0;
  double ffn_m = 0, ffn_mi = 0, ffn_i = 0, ffn_io = 0, ffn_o = 0;
  double total_base = 0;
};

/// ref_seq only matters for the flops metric; 0 means config.max_seq.
CountModel build_count_model(const ModelConfig& config, SparsityMetric metric, std::size_t ref_seq = 0);

/// Per-unit keep values of every gate, in [0, 1].
struct StructureKeep {
  std::vector<double> width;
  struct Layer {
    std::vector<double> heads, intermediate, output;
    double mha = 1, ffn = 1;
  };
  std::vector<Layer> layers;

  static StructureKeep full(const ModelConfig& config);
  static StructureKeep from_hard_masks(const GatedTransformer& student, double tau);
};

double kept_count(const CountModel& counts, const StructureKeep& keep);

/// 1 - expected kept / total_base with keeps = soft_keep(gate, tau, temperature).
Tensor expected_sparsity(const GatedTransformer& student, const CountModel& counts, double tau,
                         double temperature);

// ---- Lagrangian control ----

class SparsityController {
 public:
  SparsityMetric metric = SparsityMetric::kParameters;
  double target = 0.5;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double lambda_lr = 0.01;
  std::size_t warmup_steps = 0;
  std::size_t step = 0;

  /// Linear ramp from 0 to target over warmup_steps.
  double current_target() const;
  void validate() const;
};

/// lambda1 (s_e - t) + lambda2 (s_e - t)^2, lambdas constant.
Tensor sparsity_loss(const SparsityController& controller, const Tensor& expected);

/// Ascent step on both multipliers, lambda2 clamped at zero; advances the ramp.
void update_lagrangian(SparsityController& controller, double expected);

// ---- total ----

struct LossTerms {
  Tensor task, vib, pred, layer, sparsity;
};

/// task + eta pred + (1 - eta) layer + vib + sparsity; undefined terms count as zero.
Tensor total_loss(const LossTerms& terms, double eta);

VIBPRUNE_NAMESPACE_END
