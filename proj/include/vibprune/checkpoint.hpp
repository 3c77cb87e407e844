#pragma once

// Named-tensor checkpoints: "VIBP", u32 version, u32 count, then per tensor
// u16 name length, name bytes, u8 ndim, u32 dims, f32 payload. Little-endian.

#include <string>
#include <vector>

#include "vibprune/extract.hpp"
#include "vibprune/model.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct NamedArray {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

using Checkpoint = std::vector<NamedArray>;

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

const NamedArray& find_array(const Checkpoint& checkpoint, const std::string& name);
bool has_array(const Checkpoint& checkpoint, const std::string& name);

/// Model weights, gate parameters, and "meta.*" arrays holding the config,
/// gate betas and binarization threshold.
Checkpoint to_checkpoint(const GatedTransformer& model);
GatedTransformer model_from_checkpoint(const Checkpoint& checkpoint);

Checkpoint to_checkpoint(const DenseModel& dense);
DenseModel dense_from_checkpoint(const Checkpoint& checkpoint);
/// True when the checkpoint holds an extracted dense model.
bool is_dense_checkpoint(const Checkpoint& checkpoint);

VIBPRUNE_NAMESPACE_END
