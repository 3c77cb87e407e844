#pragma once

// Pre-norm transformer encoder with optional causal attention and VIB gates.
//
// Gate placement per layer i (student only):
//   width gate z_m      : every write into the residual stream (embedding,
//                         attention output, FFN output) and every layer-norm
//                         output, so a dropped width dim is zero everywhere
//   head gate z_a       : one unit per head, scales that head's context
//   intermediate z_inter: FFN hidden units after gelu
//   output z_out        : FFN output dims
//   layer gates         : scalar per sample on the whole MHA / FFN branch
//
// The teacher is the same network with no gates.

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vibprune/gates.hpp"
#include "vibprune/tensor.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t max_seq = 16;
  std::size_t width = 32;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 64;
  std::size_t num_classes = 2;
  bool causal = false;
  double dropout = 0.0;

  std::size_t head_dim() const { return width / heads; }
  /// Throws contract error when a dim is zero or width % heads != 0.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Tensor ln1_weight, ln1_bias;
  Tensor wq_weight, wq_bias, wk_weight, wk_bias, wv_weight, wv_bias;
  Tensor wo_weight, wo_bias;
  Tensor ln2_weight, ln2_bias;
  Tensor wu_weight, wu_bias, wd_weight, wd_bias;
};

struct LayerGates {
  VibGate heads;
  VibGate intermediate;
  VibGate output;
  VibGate layer_mha;
  VibGate layer_ffn;
};

struct GateSet {
  std::optional<VibGate> width;
  std::vector<LayerGates> layers;

  /// Checkpoint-name / gate pairs in a fixed order: width gate first, then per
  /// layer heads, intermediate, output, layer_mha, layer_ffn.
  std::vector<std::pair<std::string, const VibGate*>> named() const;
  std::vector<std::pair<std::string, VibGate*>> named();
  std::size_t total_units() const;
};

/// Per-site beta before optional division by the gate's unit count.
struct GateBetas {
  std::array<double, kGateSiteCount> per_site{1e-3, 1e-3, 1e-3, 1e-3, 1e-3, 1e-3};
  bool divide_by_units = true;

  static GateBetas uniform(double beta, bool divide_by_units = true);
  double for_gate(GateSite site, std::size_t units) const;
};

enum class ForwardMode {
  kTrain,  // stochastic gates; per (sample, token) noise, per-sample layer gates
  kMean,   // gates at mu
  kEval,   // gates at mu * hard_mask
};

struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;  // row-major (batch, seq)
};

struct ForwardOptions {
  ForwardMode mode = ForwardMode::kEval;
  double tau = 0.0;
  bool record_attention = false;
};

struct ForwardTrace {
  Tensor logits;                       // (batch, classes)
  std::vector<Tensor> hidden_states;   // per layer, (batch, seq, width), post-FFN residual
  std::vector<Tensor> attention_probs; // per layer, (batch, heads, seq, seq); only when recorded
  Tensor embedding_output;             // (batch, seq, width)
};

/// Handles inside share storage on copy; use clone() for an independent model.
class GatedTransformer {
 public:
  ModelConfig config;
  Tensor tok_emb;   // (V, d)
  Tensor pos_emb;   // (P, d)
  std::vector<LayerWeights> layers;
  Tensor lnf_weight, lnf_bias;
  Tensor cls_weight, cls_bias;  // (d, C), (C)
  std::optional<GateSet> gates;

  bool is_student() const { return gates.has_value(); }
  bool binarized() const;

  /// Model weights only, in checkpoint naming ("emb.tok", "layer.0.wq.weight", ...).
  std::vector<std::pair<std::string, Tensor>> named_weights() const;
  /// Weights followed by gate parameters ("gate.<site>.<index>.mu" / ".log_sigma").
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  GatedTransformer clone() const;
};

/// Scaled-normal (std 0.02) weights, zero biases, unit norms. Deterministic in seed.
GatedTransformer build_teacher(const ModelConfig& config, std::uint64_t seed);

/// Deep copy of the teacher's weights with fresh gates at every placement site.
GatedTransformer build_student(const GatedTransformer& teacher, const GateInit& gate_init,
                               const GateBetas& betas);

ForwardTrace forward(const GatedTransformer& model, const TokenBatch& tokens, const ForwardOptions& options,
                     NoiseSource* noise = nullptr);

/// Constant (heads, width) matrix that repeats each head's gate over its head_dim outputs.
Tensor head_expansion(std::size_t heads, std::size_t head_dim);

VIBPRUNE_NAMESPACE_END
