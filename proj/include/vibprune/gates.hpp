#pragma once

// Variational information bottleneck gates.
//
// A gate multiplies a group of structural units by z = mu + eps * sigma with
// eps ~ N(0, 1) drawn per (sample, token, unit). sigma is stored as log_sigma.
// alpha = mu^2 / sigma^2 measures how informative a unit is; a unit is kept
// when log(alpha) > tau.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "vibprune/tensor.hpp"

VIBPRUNE_NAMESPACE_BEGIN

enum class GateSite : std::uint8_t {
  kEmbeddingWidth,
  kHeads,
  kFfnIntermediate,
  kFfnOutput,
  kLayerMha,
  kLayerFfn,
};

inline constexpr std::size_t kGateSiteCount = 6;

std::string_view gate_site_name(GateSite site);
GateSite parse_gate_site(std::string_view name);

struct GateInit {
  double mu_mean = 1.0;
  double mu_std = 0.01;
  double sigma_init = 0.1;
  std::uint64_t seed = 0;
};

enum class MaskMode { kStochastic, kMean };

/// Standard-normal noise with a fixed draw order.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : engine_(seed) {}
  Tensor normal(Shape shape);
  double uniform();
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

class VibGate {
 public:
  /// Draws mu ~ N(mu_mean, mu_std^2) from `init.seed`; log_sigma = log(sigma_init).
  static VibGate create(std::size_t unit_count, GateSite site, double beta, const GateInit& init);
  /// Wraps existing parameter tensors (e.g. loaded from a checkpoint).
  static VibGate from_parameters(GateSite site, double beta, Tensor mu, Tensor log_sigma);

  std::size_t unit_count() const { return mu_.numel(); }
  GateSite site() const { return site_; }
  double beta() const { return beta_; }
  void set_beta(double beta);

  Tensor& mu() { return mu_; }
  const Tensor& mu() const { return mu_; }
  Tensor& log_sigma() { return log_sigma_; }
  const Tensor& log_sigma() const { return log_sigma_; }

  /// epsilon has shape (batch, seq, units) in stochastic mode; the result has
  /// that shape in both modes. Differentiable through mu and log_sigma.
  Tensor sample_mask(const Tensor& epsilon, MaskMode mode) const;

  /// sum_j log(1 + mu_j^2 / sigma_j^2), without beta.
  Tensor kl_term() const;

  std::vector<double> alpha() const;
  std::vector<double> log_alpha() const;
  /// 0 where log(alpha) <= tau, else 1.
  std::vector<std::uint8_t> hard_mask(double tau) const;
  /// sigmoid((log alpha - tau) / temperature), differentiable.
  Tensor soft_keep(double tau, double temperature) const;
  /// mu * hard_mask as a constant vector.
  std::vector<real> mean_hard(double tau) const;

  /// Freezes the forward contribution to mean_hard(tau) and stops gradients.
  void binarize(double tau);
  bool binarized() const { return frozen_.has_value(); }
  std::optional<double> binarized_tau() const { return frozen_tau_; }
  /// Valid only when binarized.
  const std::vector<real>& frozen_mask() const;

  VibGate clone() const;

 private:
  VibGate(GateSite site, double beta, Tensor mu, Tensor log_sigma);

  GateSite site_;
  double beta_;
  Tensor mu_;
  Tensor log_sigma_;
  std::optional<std::vector<real>> frozen_;
  std::optional<double> frozen_tau_;
};

VIBPRUNE_NAMESPACE_END
