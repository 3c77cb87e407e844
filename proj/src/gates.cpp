#include "vibprune/gates.hpp"

#include <array>
#include <cmath>
#include <limits>

VIBPRUNE_NAMESPACE_BEGIN

namespace {

constexpr std::array<std::string_view, kGateSiteCount> kSiteNames = {
    "embedding_width", "heads", "ffn_intermediate", "ffn_output", "layer_mha", "layer_ffn"};

// log(mu^2) - 2 log_sigma, -inf when mu == 0.
double log_alpha_of(real mu, real log_sigma) {
  if (mu == 0) return -std::numeric_limits<double>::infinity();
  return 2.0 * std::log(std::abs(static_cast<double>(mu))) - 2.0 * static_cast<double>(log_sigma);
}

}  // namespace

std::string_view gate_site_name(GateSite site) { return kSiteNames[static_cast<std::size_t>(site)]; }

GateSite parse_gate_site(std::string_view name) {
  for (std::size_t i = 0; i < kSiteNames.size(); ++i)
    if (kSiteNames[i] == name) return static_cast<GateSite>(i);
  throw Error(ErrorKind::kFormat, "unknown gate site '" + std::string(name) + "'");
}

Tensor NoiseSource::normal(Shape shape) {
  std::vector<real> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<real>(normal_(engine_));
  return Tensor::from(std::move(shape), std::move(values));
}

double NoiseSource::uniform() { return uniform_(engine_); }

VibGate::VibGate(GateSite site, double beta, Tensor mu, Tensor log_sigma)
    : site_(site), beta_(beta), mu_(std::move(mu)), log_sigma_(std::move(log_sigma)) {}

VibGate VibGate::create(std::size_t unit_count, GateSite site, double beta, const GateInit& init) {
  if (unit_count == 0) throw Error(ErrorKind::kContract, "gate needs at least one unit");
  if (init.mu_std < 0) throw Error(ErrorKind::kContract, "mu_std must be non-negative");
  if (!(init.sigma_init > 0)) throw Error(ErrorKind::kContract, "sigma_init must be positive");
  if (beta < 0) throw Error(ErrorKind::kContract, "beta must be non-negative");
  std::mt19937_64 engine(init.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<real> mu(unit_count);
  for (auto& v : mu) {
    const double draw = normal(engine);
    v = static_cast<real>(init.mu_mean + init.mu_std * draw);
  }
  std::vector<real> log_sigma(unit_count, static_cast<real>(std::log(init.sigma_init)));
  return VibGate(site, beta, Tensor::from({unit_count}, std::move(mu), true),
                 Tensor::from({unit_count}, std::move(log_sigma), true));
}

VibGate VibGate::from_parameters(GateSite site, double beta, Tensor mu, Tensor log_sigma) {
  if (mu.dim() != 1 || mu.shape() != log_sigma.shape() || mu.numel() == 0)
    throw Error(ErrorKind::kShape, "gate parameters must be matching non-empty vectors, got " +
                                       shape_string(mu.shape()) + " and " + shape_string(log_sigma.shape()));
  if (beta < 0) throw Error(ErrorKind::kContract, "beta must be non-negative");
  return VibGate(site, beta, std::move(mu), std::move(log_sigma));
}

void VibGate::set_beta(double beta) {
  if (beta < 0) throw Error(ErrorKind::kContract, "beta must be non-negative");
  beta_ = beta;
}

Tensor VibGate::sample_mask(const Tensor& epsilon, MaskMode mode) const {
  const std::size_t units = unit_count();
  if (epsilon.dim() != 3 || epsilon.size(-1) != units)
    throw Error(ErrorKind::kShape, "sample_mask: epsilon " + shape_string(epsilon.shape()) +
                                       " must be (batch, seq, " + std::to_string(units) + ")");
  if (frozen_) {
    return Tensor::from(epsilon.shape(), [&] {
      std::vector<real> out(epsilon.numel());
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*frozen_)[i % units];
      return out;
    }());
  }
  if (mode == MaskMode::kMean) return add(Tensor::zeros(epsilon.shape()), mu_);
  return add(mul(epsilon, exp(log_sigma_)), mu_);
}

Tensor VibGate::kl_term() const {
  // log(1 + mu^2 * exp(-2 log_sigma))
  const Tensor ratio = mul(square(mu_), exp(scale(log_sigma_, real(-2))));
  return sum(log(add_scalar(ratio, real(1))));
}

std::vector<double> VibGate::log_alpha() const {
  std::vector<double> out(unit_count());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = log_alpha_of(mu_.data()[j], log_sigma_.data()[j]);
  return out;
}

std::vector<double> VibGate::alpha() const {
  std::vector<double> out(unit_count());
  for (std::size_t j = 0; j < out.size(); ++j) {
    const double mu = mu_.data()[j];
    const double sigma = std::exp(static_cast<double>(log_sigma_.data()[j]));
    out[j] = (mu * mu) / (sigma * sigma);
  }
  return out;
}

std::vector<std::uint8_t> VibGate::hard_mask(double tau) const {
  const auto la = log_alpha();
  std::vector<std::uint8_t> out(la.size());
  for (std::size_t j = 0; j < la.size(); ++j) out[j] = la[j] > tau ? 1 : 0;
  return out;
}

std::vector<real> VibGate::mean_hard(double tau) const {
  const auto hard = hard_mask(tau);
  std::vector<real> out(hard.size());
  for (std::size_t j = 0; j < hard.size(); ++j) out[j] = hard[j] ? mu_.data()[j] : real(0);
  return out;
}

Tensor VibGate::soft_keep(double tau, double temperature) const {
  if (!(temperature > 0)) throw Error(ErrorKind::kContract, "soft_keep temperature must be positive");
  const std::size_t n = unit_count();
  std::vector<real> keep(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double z = (log_alpha_of(mu_.data()[j], log_sigma_.data()[j]) - tau) / temperature;
    keep[j] = static_cast<real>(z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)));
  }
  const Tensor mu = mu_;
  const Tensor log_sigma = log_sigma_;
  return make_result("soft_keep", {n}, std::move(keep), {mu, log_sigma}, [mu, log_sigma, temperature](Node& o) {
    // d keep / d log_alpha = keep (1 - keep) / temperature
    for (std::size_t j = 0; j < o.data.size(); ++j) {
      const double s = o.data[j];
      const double m = mu.data()[j];
      if (m == 0) continue;
      const double common = o.grad[j] * s * (1.0 - s) / temperature;
      if (mu.requires_grad()) mu.node()->grad_buffer()[j] += static_cast<real>(common * 2.0 / m);
      if (log_sigma.requires_grad()) log_sigma.node()->grad_buffer()[j] += static_cast<real>(-2.0 * common);
    }
  });
}

void VibGate::binarize(double tau) {
  if (frozen_) {
    if (frozen_tau_ == tau) return;
    throw Error(ErrorKind::kContract, "gate already binarized with a different tau");
  }
  frozen_ = mean_hard(tau);
  frozen_tau_ = tau;
  mu_.set_requires_grad(false);
  log_sigma_.set_requires_grad(false);
  mu_.zero_grad();
  log_sigma_.zero_grad();
}

const std::vector<real>& VibGate::frozen_mask() const {
  if (!frozen_) throw Error(ErrorKind::kContract, "gate is not binarized");
  return *frozen_;
}

VibGate VibGate::clone() const {
  VibGate copy(site_, beta_, mu_.clone(), log_sigma_.clone());
  copy.frozen_ = frozen_;
  copy.frozen_tau_ = frozen_tau_;
  return copy;
}

VIBPRUNE_NAMESPACE_END
