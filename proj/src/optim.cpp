#include "vibprune/optim.hpp"

#include <cmath>

VIBPRUNE_NAMESPACE_BEGIN

AdamW::AdamW(std::vector<OptimParam> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    if (!p.update_mask.empty() && p.update_mask.size() != p.tensor.numel())
      throw Error(ErrorKind::kShape, "update mask of '" + p.name + "' does not match its tensor");
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    auto& p = params_[pi];
    if (!p.tensor.has_grad()) continue;
    auto data = p.tensor.data();
    const auto grad = p.tensor.grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
    const bool masked = !p.update_mask.empty();
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (masked && !p.update_mask[i]) continue;
      const double g = grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_) + p.weight_decay * data[i];
      data[i] = static_cast<real>(data[i] - lr_scale_ * p.lr * update);
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

VIBPRUNE_NAMESPACE_END
