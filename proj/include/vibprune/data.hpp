#pragma once

// Synthetic sequence-classification tasks with deterministic labels.
//
// Every sequence is [CLS] payload... [SEP]; token 0 is CLS, token 1 is SEP
// and task tokens start at 2.
//
//   majority_pair : label = count(A) > count(B); ties never generated
//   marked_parity : label = parity of P1 tokens right after marker tokens
//   signal_dims   : tokens carry latent k-dim vectors; label is the sign of a
//                   linear rule on their mean, so a width-k code suffices

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vibprune/model.hpp"

VIBPRUNE_NAMESPACE_BEGIN

inline constexpr std::int32_t kClsToken = 0;
inline constexpr std::int32_t kSepToken = 1;

enum class TaskKind : std::uint8_t { kMajorityPair = 0, kMarkedParity = 1, kSignalDims = 2 };

std::string_view task_name(TaskKind kind);
TaskKind parse_task(std::string_view name);

struct TaskSpec {
  TaskKind kind = TaskKind::kMajorityPair;
  std::size_t vocab_size = 16;
  std::size_t payload_len = 12;  // sequence length is payload_len + 2
  std::size_t train_size = 1600, val_size = 200, test_size = 200;
  std::uint64_t seed = 0;

  // majority_pair
  std::int32_t token_a = 2, token_b = 3;
  double pair_fraction = 0.7;  // share of payload positions holding A or B

  // marked_parity
  std::int32_t marker = 2, payload0 = 3, payload1 = 4;
  std::size_t max_markers = 3;
  double distractor_rate = 0.0;  // chance a free slot holds a stray payload token

  // signal_dims
  std::size_t intrinsic_dim = 8;
  double margin = 0.05;  // rejected when |rule| / rule scale is below this

  std::size_t seq_len() const { return payload_len + 2; }
  /// 80/10/10 split of `total`.
  void set_total(std::size_t total);
  /// Throws contract error for infeasible specs.
  void validate() const;
};

struct Dataset {
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;  // (size, seq) row-major
  std::vector<std::int32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const std::int32_t> row(std::size_t i) const { return {tokens.data() + i * seq, seq}; }
  TokenBatch batch(std::span<const std::size_t> indices) const;
  std::vector<std::int32_t> batch_labels(std::span<const std::size_t> indices) const;
  /// Rows in the given order.
  Dataset select(std::span<const std::size_t> indices) const;
};

struct DatasetSplits {
  TaskSpec spec;
  Dataset train, val, test;
};

/// The label rule of the spec's task applied to one framed sequence.
std::int32_t label_of(const TaskSpec& spec, std::span<const std::int32_t> tokens);

/// Deterministic in spec.seed; every split holds floor/ceil halves of each class.
DatasetSplits generate(const TaskSpec& spec);

/// Header {magic "VIBD", version, kind, V, seq, sizes, seed}, u16 tokens, u8 labels.
void save_dataset(const std::string& path, const DatasetSplits& data);
/// Knob fields other than those in the header keep their defaults.
DatasetSplits load_dataset(const std::string& path);

VIBPRUNE_NAMESPACE_END
