#pragma once

// AdamW with per-parameter learning rate, weight decay and an optional
// per-entry update mask. Masked entries are never touched, so their bytes stay
// identical across steps.

#include <string>
#include <vector>

#include "vibprune/tensor.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct OptimParam {
  std::string name;
  Tensor tensor;
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::vector<std::uint8_t> update_mask;  // empty = every entry updates
};

class AdamW {
 public:
  explicit AdamW(std::vector<OptimParam> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// Applies one update from the accumulated gradients, then clears them.
  /// Parameters without a gradient are skipped.
  void step();
  void zero_grad();
  /// Multiplies every base learning rate, for schedules.
  void set_lr_scale(double scale) { lr_scale_ = scale; }
  std::size_t steps() const { return t_; }
  const std::vector<OptimParam>& params() const { return params_; }

 private:
  std::vector<OptimParam> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  double lr_scale_ = 1.0;
};

VIBPRUNE_NAMESPACE_END
