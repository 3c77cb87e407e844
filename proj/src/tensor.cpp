#include "vibprune/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "vibprune/kernels.hpp"

VIBPRUNE_NAMESPACE_BEGIN

namespace k = kernels::parallel;

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw Error(ErrorKind::kShape, std::string(op) + ": " + detail);
}

std::size_t normalize_axis(int axis, std::size_t ndim) {
  const int n = static_cast<int>(ndim);
  const int a = axis < 0 ? axis + n : axis;
  if (a < 0 || a >= n) throw Error(ErrorKind::kShape, "axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(a);
}

bool needs_grad(const Tensor& t) { return t.defined() && t.requires_grad(); }

Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t n = std::max(a.size(), b.size());
  Shape out(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
    const std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_error(op, "cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat index into `in` for every flat index of `out`; empty when identical.
std::vector<std::uint32_t> broadcast_map(const Shape& out, const Shape& in) {
  if (in == out) return {};
  const std::size_t n_out = shape_numel(out);
  std::vector<std::uint32_t> map(n_out);
  const std::size_t n_in = shape_numel(in);
  if (n_in == 1) return map;
  const std::size_t nd = out.size();
  const std::size_t offset = nd - in.size();
  std::vector<std::size_t> stride(nd, 0);
  std::size_t s = 1;
  for (std::size_t i = nd; i-- > offset;) {
    const std::size_t dim = in[i - offset];
    stride[i] = dim == 1 ? 0 : s;
    s *= dim;
  }
  std::vector<std::size_t> counter(nd, 0);
  std::size_t idx = 0;
  for (std::size_t flat = 0; flat < n_out; ++flat) {
    map[flat] = static_cast<std::uint32_t>(idx);
    for (std::size_t d = nd; d-- > 0;) {
      ++counter[d];
      idx += stride[d];
      if (counter[d] < out[d]) break;
      idx -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

}  // namespace

std::span<real> Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), real(0));
  return grad;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), real(0), requires_grad);
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->data.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<real> data, bool requires_grad) {
  if (shape_numel(shape) != data.size())
    shape_error("from", "shape " + shape_string(shape) + " needs " +
                            std::to_string(shape_numel(shape)) + " values, got " +
                            std::to_string(data.size()));
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(real value) { return full({}, value); }

std::size_t Tensor::size(int axis) const { return node_->shape[normalize_axis(axis, dim())]; }

real Tensor::item() const {
  if (numel() != 1) throw Error(ErrorKind::kContract, "item() on tensor of shape " + shape_string(shape()));
  return node_->data[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone() const { return from(shape(), node_->data, node_->requires_grad); }

void Tensor::backward() const {
  if (numel() != 1)
    throw Error(ErrorKind::kContract, "backward needs a scalar loss, got shape " + shape_string(shape()));
  if (!requires_grad())
    throw Error(ErrorKind::kContract, "loss does not depend on any tensor that requires grad");

  // Iterative post-order DFS over the recorded graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad.assign(1, real(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward && !node->grad.empty()) node->backward();
  }
  for (Node* node : order) {
    if (!node->backward) continue;
    node->backward = nullptr;
    node->inputs.clear();
    if (node != node_.get()) std::vector<real>().swap(node->grad);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor make_result(std::string_view op, Shape shape, std::vector<real> data,
                   std::vector<Tensor> inputs, std::function<void(Node& out)> backward) {
  for (real v : data) {
    if (!std::isfinite(v)) throw Error(ErrorKind::kNumeric, std::string(op) + " produced a non-finite value");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool record = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(), needs_grad);
  if (record) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const auto& in : inputs) node->inputs.push_back(in.node_ptr());
    Node* self = node.get();
    node->backward = [self, fn = std::move(backward)]() { fn(*self); };
  }
  return Tensor(std::move(node));
}

// ---- primitives ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.dim() < 2 || b.dim() < 2)
    shape_error("matmul", "operands need rank >= 2, got " + shape_string(a.shape()) + " and " +
                              shape_string(b.shape()));
  const std::size_t m = a.size(-2), kk = a.size(-1), kb = b.size(-2), n = b.size(-1);
  if (kk != kb)
    shape_error("matmul", "inner dims differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));

  if (b.dim() == 2) {
    const std::size_t rows = a.numel() / kk;
    std::vector<real> out(rows * n);
    k::gemm_nn(a.data().data(), b.data().data(), out.data(), rows, kk, n, false);
    return make_result("matmul", with_last(a.shape(), n), std::move(out), {a, b},
                       [a, b, rows, kk, n](Node& o) {
                         if (needs_grad(a)) {
                           k::gemm_nt(o.grad.data(), b.data().data(), a.node()->grad_buffer().data(),
                                      rows, n, kk, true);
                         }
                         if (needs_grad(b)) {
                           k::gemm_tn(a.data().data(), o.grad.data(), b.node()->grad_buffer().data(),
                                      rows, kk, n, true);
                         }
                       });
  }

  const Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  const Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (lead_a != lead_b)
    shape_error("matmul", "batch dims differ: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  const std::size_t batch = shape_numel(lead_a);
  std::vector<real> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i)
    k::gemm_nn(a.data().data() + i * m * kk, b.data().data() + i * kk * n, out.data() + i * m * n, m,
               kk, n, false);
  return make_result(
      "matmul", with_last(a.shape(), n), std::move(out), {a, b}, [a, b, batch, m, kk, n](Node& o) {
        for (std::size_t i = 0; i < batch; ++i) {
          const real* dout = o.grad.data() + i * m * n;
          if (needs_grad(a))
            k::gemm_nt(dout, b.data().data() + i * kk * n, a.node()->grad_buffer().data() + i * m * kk,
                       m, n, kk, true);
          if (needs_grad(b))
            k::gemm_tn(a.data().data() + i * m * kk, dout, b.node()->grad_buffer().data() + i * kk * n,
                       m, kk, n, true);
        }
      });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_broadcast(std::string_view op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = broadcast_shape(op, a.shape(), b.shape());
  auto amap = std::make_shared<std::vector<std::uint32_t>>(broadcast_map(out_shape, a.shape()));
  auto bmap = std::make_shared<std::vector<std::uint32_t>>(broadcast_map(out_shape, b.shape()));
  const std::size_t n = shape_numel(out_shape);
  std::vector<real> out(n);
  const real* pa = a.data().data();
  const real* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t ia = amap->empty() ? i : (*amap)[i];
    const std::size_t ib = bmap->empty() ? i : (*bmap)[i];
    out[i] = fwd(pa[ia], pb[ib]);
  }
  return make_result(op, std::move(out_shape), std::move(out), {a, b},
                     [a, b, amap, bmap, n, bwd](Node& o) {
                       real* ga = needs_grad(a) ? a.node()->grad_buffer().data() : nullptr;
                       real* gb = needs_grad(b) ? b.node()->grad_buffer().data() : nullptr;
                       const real* pa = a.data().data();
                       const real* pb = b.data().data();
                       for (std::size_t i = 0; i < n; ++i) {
                         const std::size_t ia = amap->empty() ? i : (*amap)[i];
                         const std::size_t ib = bmap->empty() ? i : (*bmap)[i];
                         bwd(o.grad[i], pa[ia], pb[ib], ga ? ga + ia : nullptr, gb ? gb + ib : nullptr);
                       }
                     });
}

template <typename Fwd, typename Deriv>
Tensor unary(std::string_view op, const Tensor& x, Fwd fwd, Deriv deriv) {
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(px[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [x, deriv](Node& o) {
    real* gx = x.node()->grad_buffer().data();
    const real* px = x.data().data();
    for (std::size_t i = 0; i < o.data.size(); ++i) gx[i] += o.grad[i] * deriv(px[i], o.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      "add", a, b, [](real x, real y) { return x + y; },
      [](real g, real, real, real* ga, real* gb) {
        if (ga) *ga += g;
        if (gb) *gb += g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      "sub", a, b, [](real x, real y) { return x - y; },
      [](real g, real, real, real* ga, real* gb) {
        if (ga) *ga += g;
        if (gb) *gb -= g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_broadcast(
      "mul", a, b, [](real x, real y) { return x * y; },
      [](real g, real x, real y, real* ga, real* gb) {
        if (ga) *ga += g * y;
        if (gb) *gb += g * x;
      });
}

Tensor scale(const Tensor& a, real factor) {
  return unary(
      "scale", a, [factor](real x) { return x * factor; }, [factor](real, real) { return factor; });
}

Tensor add_scalar(const Tensor& a, real value) {
  return unary(
      "add_scalar", a, [value](real x) { return x + value; }, [](real, real) { return real(1); });
}

Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, Shape leading) {
  if (table.dim() != 2) shape_error("gather_rows", "table must be 2-D, got " + shape_string(table.shape()));
  if (shape_numel(leading) != ids.size())
    shape_error("gather_rows", "leading shape " + shape_string(leading) + " does not hold " +
                                   std::to_string(ids.size()) + " ids");
  const std::size_t rows = table.size(0), d = table.size(1);
  std::vector<real> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= rows)
      throw Error(ErrorKind::kData, "token id " + std::to_string(id) + " outside vocabulary of " +
                                        std::to_string(rows));
    std::copy_n(table.data().data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  leading.push_back(d);
  auto id_copy = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  return make_result("gather_rows", std::move(leading), std::move(out), {table},
                     [table, id_copy, d](Node& o) {
                       real* g = table.node()->grad_buffer().data();
                       for (std::size_t i = 0; i < id_copy->size(); ++i) {
                         real* row = g + static_cast<std::size_t>((*id_copy)[i]) * d;
                         const real* src = o.grad.data() + i * d;
                         for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  std::vector<real> out(x.numel());
  k::gelu(x.data().data(), out.data(), out.size());
  return make_result("gelu", x.shape(), std::move(out), {x}, [x](Node& o) {
    k::gelu_backward(x.data().data(), o.grad.data(), x.node()->grad_buffer().data(), o.data.size());
  });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](real v) {
        const double d = v;
        return static_cast<real>(d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d)));
      },
      [](real, real y) { return y * (real(1) - y); });
}

Tensor softmax_lastdim(const Tensor& x) {
  if (x.dim() < 1) shape_error("softmax_lastdim", "needs rank >= 1");
  const std::size_t cols = x.size(-1), rows = x.numel() / cols;
  std::vector<real> out(x.numel());
  k::softmax_rows(x.data().data(), out.data(), rows, cols);
  return make_result("softmax_lastdim", x.shape(), std::move(out), {x}, [x, rows, cols](Node& o) {
    k::softmax_rows_backward(o.data.data(), o.grad.data(), x.node()->grad_buffer().data(), rows, cols);
  });
}

Tensor log_softmax_lastdim(const Tensor& x) {
  if (x.dim() < 1) shape_error("log_softmax_lastdim", "needs rank >= 1");
  const std::size_t cols = x.size(-1), rows = x.numel() / cols;
  std::vector<real> out(x.numel());
  const real* px = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const real* row = px + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = static_cast<real>(row[j] - lse);
  }
  return make_result("log_softmax_lastdim", x.shape(), std::move(out), {x}, [x, rows, cols](Node& o) {
    real* gx = x.node()->grad_buffer().data();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < cols; ++j) gsum += o.grad[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        const double p = std::exp(static_cast<double>(o.data[r * cols + j]));
        gx[r * cols + j] += static_cast<real>(o.grad[r * cols + j] - p * gsum);
      }
    }
  });
}

Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                          std::size_t norm_width) {
  if (x.dim() < 1) shape_error("layer_norm_lastdim", "needs rank >= 1");
  const std::size_t cols = x.size(-1), rows = x.numel() / cols;
  if (gamma.shape() != Shape{cols} || beta.shape() != Shape{cols})
    shape_error("layer_norm_lastdim", "affine params " + shape_string(gamma.shape()) + "/" +
                                          shape_string(beta.shape()) + " do not match last dim " +
                                          std::to_string(cols));
  if (norm_width == 0) norm_width = cols;
  if (norm_width < cols) shape_error("layer_norm_lastdim", "norm width smaller than last dim");
  std::vector<real> out(x.numel());
  auto xhat = std::make_shared<std::vector<real>>(x.numel());
  auto rstd = std::make_shared<std::vector<real>>(rows);
  k::layer_norm_rows(x.data().data(), gamma.data().data(), beta.data().data(), out.data(),
                     xhat->data(), rstd->data(), rows, cols, norm_width, eps);
  return make_result("layer_norm_lastdim", x.shape(), std::move(out), {x, gamma, beta},
                     [x, gamma, beta, xhat, rstd, rows, cols, norm_width](Node& o) {
                       k::layer_norm_rows_backward(
                           o.grad.data(), xhat->data(), rstd->data(), gamma.data().data(),
                           needs_grad(x) ? x.node()->grad_buffer().data() : nullptr,
                           needs_grad(gamma) ? gamma.node()->grad_buffer().data() : nullptr,
                           needs_grad(beta) ? beta.node()->grad_buffer().data() : nullptr, rows, cols,
                           norm_width);
                     });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (real v : x.data()) total += v;
  return make_result("sum", {}, {static_cast<real>(total)}, {x}, [x](Node& o) {
    const real g = o.grad[0];
    for (real& v : x.node()->grad_buffer()) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) shape_error("mean", "empty tensor");
  double total = 0.0;
  for (real v : x.data()) total += v;
  const double n = static_cast<double>(x.numel());
  return make_result("mean", {}, {static_cast<real>(total / n)}, {x}, [x, n](Node& o) {
    const real g = static_cast<real>(o.grad[0] / n);
    for (real& v : x.node()->grad_buffer()) v += g;
  });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](real v) { return std::log(v); }, [](real v, real) { return real(1) / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](real v) { return v * v; }, [](real v, real) { return real(2) * v; });
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) shape_error("concat_lastdim", "no inputs");
  const Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim() != lead.size() + 1 || !std::equal(lead.begin(), lead.end(), p.shape().begin()))
      shape_error("concat_lastdim", "leading dims differ: " + shape_string(parts[0].shape()) + " vs " +
                                        shape_string(p.shape()));
    widths.push_back(p.size(-1));
    total += widths.back();
  }
  const std::size_t rows = shape_numel(lead);
  std::vector<real> out(rows * total);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      std::copy_n(parts[p].data().data() + r * widths[p], widths[p], out.data() + r * total + off);
      off += widths[p];
    }
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_result("concat_lastdim", std::move(shape), std::move(out), parts,
                     [parts, widths, rows, total](Node& o) {
                       std::size_t off = 0;
                       for (std::size_t p = 0; p < parts.size(); ++p) {
                         if (needs_grad(parts[p])) {
                           real* g = parts[p].node()->grad_buffer().data();
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t j = 0; j < widths[p]; ++j)
                               g[r * widths[p] + j] += o.grad[r * total + off + j];
                         }
                         off += widths[p];
                       }
                     });
}

Tensor slice_lastdim(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.dim() < 1 || begin >= end || end > x.size(-1))
    shape_error("slice_lastdim", "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                     ") invalid for " + shape_string(x.shape()));
  const std::size_t cols = x.size(-1), rows = x.numel() / cols, w = end - begin;
  std::vector<real> out(rows * w);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(x.data().data() + r * cols + begin, w, out.data() + r * w);
  return make_result("slice_lastdim", with_last(x.shape(), w), std::move(out), {x},
                     [x, rows, cols, begin, w](Node& o) {
                       real* g = x.node()->grad_buffer().data();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < w; ++j) g[r * cols + begin + j] += o.grad[r * w + j];
                     });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.dim() < 2) shape_error("transpose_last2", "needs rank >= 2, got " + shape_string(x.shape()));
  const std::size_t r = x.size(-2), c = x.size(-1), batch = x.numel() / (r * c);
  std::vector<real> out(x.numel());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x.data()[b * r * c + i * c + j];
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return make_result("transpose_last2", std::move(shape), std::move(out), {x}, [x, batch, r, c](Node& o) {
    real* g = x.node()->grad_buffer().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[b * r * c + i * c + j] += o.grad[b * r * c + j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    shape_error("reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  std::vector<real> out(x.data().begin(), x.data().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [x](Node& o) {
    real* g = x.node()->grad_buffer().data();
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor causal_mask_fill(const Tensor& scores, real fill) {
  if (scores.dim() < 2 || scores.size(-1) != scores.size(-2))
    shape_error("causal_mask_fill", "needs trailing square block, got " + shape_string(scores.shape()));
  const std::size_t s = scores.size(-1), batch = scores.numel() / (s * s);
  std::vector<real> out(scores.data().begin(), scores.data().end());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = i + 1; j < s; ++j) out[b * s * s + i * s + j] = fill;
  return make_result("causal_mask_fill", scores.shape(), std::move(out), {scores},
                     [scores, batch, s](Node& o) {
                       real* g = scores.node()->grad_buffer().data();
                       for (std::size_t b = 0; b < batch; ++b)
                         for (std::size_t i = 0; i < s; ++i)
                           for (std::size_t j = 0; j <= i; ++j)
                             g[b * s * s + i * s + j] += o.grad[b * s * s + i * s + j];
                     });
}

Tensor select_row(const Tensor& x, std::size_t index) {
  if (x.dim() < 2 || index >= x.size(-2))
    shape_error("select_row", "row " + std::to_string(index) + " invalid for " + shape_string(x.shape()));
  const std::size_t s = x.size(-2), d = x.size(-1), batch = x.numel() / (s * d);
  std::vector<real> out(batch * d);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(x.data().data() + (b * s + index) * d, d, out.data() + b * d);
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.push_back(d);
  return make_result("select_row", std::move(shape), std::move(out), {x}, [x, batch, s, d, index](Node& o) {
    real* g = x.node()->grad_buffer().data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t j = 0; j < d; ++j) g[(b * s + index) * d + j] += o.grad[b * d + j];
  });
}

// ---- gradient checking ----

GradcheckReport gradcheck_report(const std::function<Tensor(std::uint64_t)>& loss_fn,
                                 std::vector<Tensor> params, double eps, std::uint64_t seed) {
  if (!(eps > 0)) throw Error(ErrorKind::kContract, "gradcheck eps must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  const Tensor loss = loss_fn(seed);
  const double base = loss.item();
  loss.backward();

  std::vector<std::vector<real>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params)
    analytic.emplace_back(p.has_grad() ? std::vector<real>(p.grad().begin(), p.grad().end())
                                       : std::vector<real>(p.numel(), real(0)));

  NoGradGuard no_grad;
  const double again = loss_fn(seed).item();
  if (again != base)
    throw Error(ErrorKind::kDeterminism, "loss changed between evaluations with the same seed (" +
                                             std::to_string(base) + " vs " + std::to_string(again) + ")");

  GradcheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const real original = values[i];
      const real up = static_cast<real>(original + eps);
      const real down = static_cast<real>(original - eps);
      values[i] = up;
      const double f_up = loss_fn(seed).item();
      values[i] = down;
      const double f_down = loss_fn(seed).item();
      values[i] = original;
      const double numeric = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
      const double a = analytic[pi][i];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++report.entries;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

double gradcheck(const std::function<Tensor(std::uint64_t)>& loss_fn, std::vector<Tensor> params,
                 double eps, std::uint64_t seed) {
  return gradcheck_report(loss_fn, std::move(params), eps, seed).max_relative_error;
}

VIBPRUNE_NAMESPACE_END
