#pragma once

// Read-only probes over trained models: attention mass on chosen tokens and
// relative positions, pairwise Jensen-Shannon divergence between heads, and
// the per-layer pruning pattern.

#include <span>
#include <string>
#include <vector>

#include "vibprune/data.hpp"
#include "vibprune/extract.hpp"
#include "vibprune/model.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct AttentionStats {
  std::size_t layers = 0, heads = 0;
  // Indexed layer * heads + head.
  std::vector<double> token_mass;
  std::vector<double> previous, current, next;

  double at(const std::vector<double>& field, std::size_t layer, std::size_t head) const {
    return field[layer * heads + head];
  }
};

/// Eval-mode attention averaged over every (example, query). Offsets that fall
/// outside the sequence are skipped. Data error on an empty dataset.
AttentionStats token_attention(const GatedTransformer& model, const Dataset& data,
                               std::span<const std::int32_t> token_ids, double tau = 0.0);

struct HeadId {
  std::size_t layer = 0, head = 0;
  bool operator==(const HeadId&) const = default;
};

struct HeadDivergenceMatrix {
  std::vector<HeadId> heads;  // surviving heads only
  std::vector<double> values; // heads.size()^2, row-major
  std::size_t token_count = 0;  // mean * token_count gives the unnormalized sum

  double at(std::size_t i, std::size_t j) const { return values[i * heads.size() + j]; }
};

/// Natural-log JS divergence of two distributions over the same support.
double js_divergence(std::span<const double> p, std::span<const double> q);

HeadDivergenceMatrix head_js(const GatedTransformer& model, const Dataset& data, double tau = 0.0);

struct PatternLayer {
  std::size_t index = 0;
  bool mha_alive = false, ffn_alive = false;
  std::size_t heads_kept = 0, inter_kept = 0, out_kept = 0;
  double heads_ratio = 0, inter_ratio = 0, out_ratio = 0;

  bool alive() const { return mha_alive || ffn_alive; }
};

struct PruningPattern {
  std::size_t width = 0, kept_width = 0;
  double width_ratio = 0;
  std::vector<PatternLayer> layers;
};

/// Uses frozen masks when binarized, hard masks at tau otherwise. Units under a
/// dead sub-layer count as removed, and FFN outputs only count on kept width,
/// so the counts agree with what extract_dense builds.
PruningPattern pruning_pattern(const GatedTransformer& model, double tau = 0.0);
PruningPattern pruning_pattern(const DenseModel& dense);
PruningPattern pruning_pattern(const ModelConfig& config, const StructureKeep& keep);

std::string attention_json(const AttentionStats& stats);
std::string divergence_json(const HeadDivergenceMatrix& matrix);
std::string pattern_json(const PruningPattern& pattern);

VIBPRUNE_NAMESPACE_END
