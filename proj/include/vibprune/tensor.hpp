#pragma once

// Minimal reverse-mode autodiff over dense row-major tensors.
//
// A Tensor is a shared handle to a Node. Leaf tensors created with
// requires_grad=true are parameters; every primitive below records a Node
// with a backward closure when any of its inputs requires grad and grad mode
// is enabled. backward() accumulates into leaf gradients and then releases the
// recorded graph.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vibprune/common.hpp"
#include "vibprune/error.hpp"

VIBPRUNE_NAMESPACE_BEGIN

struct Node {
  Shape shape;
  std::vector<real> data;
  std::vector<real> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward;

  /// Zero-initialized on first use.
  std::span<real> grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real> data, bool requires_grad = false);
  static Tensor scalar(real value);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  /// Negative axes count from the back.
  std::size_t size(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<real> data() { return node_->data; }
  std::span<const real> data() const { return node_->data; }
  real item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const real> grad() const { return node_->grad; }
  std::span<real> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, fresh leaf without graph history.
  Tensor detach() const;
  /// Deep copy of data with the same requires_grad flag, no history.
  Tensor clone() const;

  std::string_view op_name() const { return node_->op; }
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// Disables graph recording for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

std::string shape_string(const Shape& shape);

/// Builds the output of a primitive. `backward` runs with the output node's
/// gradient populated and must accumulate into the inputs that require grad.
/// The graph is only recorded when grad mode is on and some input needs it.
/// Throws numeric error when `data` holds a non-finite value.
Tensor make_result(std::string_view op, Shape shape, std::vector<real> data,
                   std::vector<Tensor> inputs, std::function<void(Node& out)> backward);

// ---- primitives ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, real factor);
Tensor add_scalar(const Tensor& a, real value);
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, Shape leading);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_lastdim(const Tensor& x);
/// norm_width = 0 normalizes over the last dim. A larger value treats the
/// missing entries as structural zeros when computing mean and variance.
Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps = 1e-5, std::size_t norm_width = 0);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor square(const Tensor& x);
Tensor concat_lastdim(const std::vector<Tensor>& parts);
Tensor slice_lastdim(const Tensor& x, std::size_t begin, std::size_t end);
Tensor transpose_last2(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
/// Entries above the diagonal of the trailing square block are replaced by
/// `fill` and receive no gradient.
Tensor causal_mask_fill(const Tensor& scores, real fill = real(-1e9));
/// x[..., index, :] -> shape (..., d)
Tensor select_row(const Tensor& x, std::size_t index);

// ---- gradient checking ----

struct GradcheckReport {
  double max_relative_error = 0.0;
  std::size_t entries = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares backward() against central differences of `loss_fn(seed)` for
/// every entry of every tensor in `params`. The same seed is passed to every
/// evaluation so stochastic losses see frozen noise. Relative error per entry
/// is |a - n| / max(1e-8, |a| + |n|).
GradcheckReport gradcheck_report(const std::function<Tensor(std::uint64_t)>& loss_fn,
                                 std::vector<Tensor> params, double eps, std::uint64_t seed);

double gradcheck(const std::function<Tensor(std::uint64_t)>& loss_fn,
                 std::vector<Tensor> params, double eps, std::uint64_t seed);

VIBPRUNE_NAMESPACE_END
