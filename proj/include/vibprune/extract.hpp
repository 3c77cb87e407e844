#pragma once

// Dense extraction: physically removes masked width dims, heads, FFN units,
// FFN outputs and sub-layers from a binarized student, folding each kept
// gate's mean into the weights so the dense network computes the same logits.

#include <optional>
#include <string>
#include <vector>

#include "vibprune/model.hpp"
#include "vibprune/objective.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct DenseAttention {
  std::vector<std::size_t> kept_heads;  // source head indices
  Tensor ln_weight, ln_bias;            // (d')
  Tensor wq, bq, wk, bk, wv, bv;        // (d', J' d_h), (J' d_h)
  Tensor wo, bo;                        // (J' d_h, d'), (d')
};

struct DenseFeedForward {
  std::vector<std::size_t> kept_intermediate;  // source unit indices
  std::vector<std::size_t> out_index;          // positions in the kept width the FFN writes to
  Tensor ln_weight, ln_bias;                   // (d')
  Tensor wu, bu;                               // (d', r'), (r')
  Tensor wd, bd;                               // (r', |out|), (|out|)
};

struct DenseLayer {
  std::size_t source_layer = 0;
  std::optional<DenseAttention> attention;
  std::optional<DenseFeedForward> ffn;
};

struct DenseModel {
  ModelConfig source;                  // config of the model this was extracted from
  std::vector<std::size_t> kept_width; // source width indices
  std::size_t norm_width = 0;          // layer-norm divisor; dropped dims are structural zeros
  Tensor tok_emb, pos_emb;             // (V, d'), (P, d')
  std::vector<DenseLayer> layers;
  Tensor lnf_weight, lnf_bias;
  Tensor cls_weight, cls_bias;         // (d', C), (C)

  std::size_t width() const { return kept_width.size(); }
};

/// Requires every gate binarized. Throws degenerate model error when no width
/// dim or no sub-layer survives.
DenseModel extract_dense(const GatedTransformer& student);

/// An already dense model extracts to an identical copy.
DenseModel extract_dense(const DenseModel& dense);

/// A teacher viewed as a dense model with nothing removed.
DenseModel dense_from_teacher(const GatedTransformer& teacher);

/// Countable parameters by enumeration of the tensors present, excluding the
/// classifier bias.
std::size_t param_count(const DenseModel& dense);
/// FLOPs of one sequence of length seq_len, same conventions as CountModel.
std::size_t flop_count(const DenseModel& dense, std::size_t seq_len);

/// Logits (batch, classes). No gradients are recorded.
Tensor dense_forward(const DenseModel& dense, const TokenBatch& tokens);

/// Kept/total ratios of the dense structure, in the form the pruning report uses.
StructureKeep dense_structure(const DenseModel& dense);

struct ExtractReport {
  std::size_t d_kept = 0;
  std::vector<std::size_t> heads_kept_per_layer;   // indexed by source layer
  std::vector<std::size_t> inter_kept_per_layer;
  std::vector<std::size_t> out_kept_per_layer;
  std::vector<std::size_t> layers_kept;            // source indices of layers with any alive sub-layer
  std::size_t params = 0;
  std::size_t flops = 0;
  double sparsity_params = 0;
  double sparsity_flops = 0;
};

/// Counts against the unpruned source architecture at ref_seq (0 = max_seq).
ExtractReport extract_report(const DenseModel& dense, std::size_t ref_seq = 0);
std::string report_json(const ExtractReport& report);

VIBPRUNE_NAMESPACE_END
