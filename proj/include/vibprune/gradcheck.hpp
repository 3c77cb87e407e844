#pragma once

// Finite-difference checks of every loss component on a small gated student.
// Meaningful in the double build; float32 round-off alone exceeds the bounds.

#include <string>
#include <vector>

#include "vibprune/model.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct LossGradcheck {
  std::string component;  // task, vib, kl_term, pred, layer, sparsity
  double max_relative_error = 0;
  double threshold = 0;
  std::size_t entries = 0;
  std::string worst_parameter;
  double worst_analytic = 0, worst_numeric = 0;

  bool passed() const { return max_relative_error < threshold; }
};

struct GradcheckSetup {
  ModelConfig model{.vocab_size = 8, .max_seq = 6, .width = 8, .layers = 2, .heads = 2, .ffn_dim = 12};
  std::size_t batch = 3;
  std::uint64_t seed = 0;
  // Entries with near-zero gradient (attention weights at init scale) put the
  // round-off floor of the relative error near eps^-1 * 1e-16 / 1e-8, while
  // truncation grows as eps^2; 3e-5 sits between the two.
  double eps = 3e-5;
  double weight_scale = 1.0;  // multiplies the teacher init
};

/// Gate noise is drawn from a fixed seed inside every evaluation, so the
/// stochastic forward is a deterministic function of the parameters.
std::vector<LossGradcheck> gradcheck_losses(const GradcheckSetup& setup = {});

VIBPRUNE_NAMESPACE_END
