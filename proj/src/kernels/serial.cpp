#include <vector>

#include "rows.hpp"
#include "vibprune/kernels.hpp"

VIBPRUNE_NAMESPACE_BEGIN
namespace kernels::serial {

void gemm_nn(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) rows::gemm_nn_row(a + i * k, b, c + i * n, k, n, accumulate);
}

void gemm_nt(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  std::vector<real> bt(k * n);
  rows::transpose(b, bt.data(), n, k);
  gemm_nn(a, bt.data(), c, m, k, n, accumulate);
}

void gemm_tn(const real* a, const real* b, real* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  for (std::size_t kk = 0; kk < k; ++kk) rows::gemm_tn_row(a, b, c + kk * n, kk, m, k, n, accumulate);
}

void softmax_rows(const real* x, real* y, std::size_t rows_, std::size_t cols) {
  for (std::size_t i = 0; i < rows_; ++i) rows::softmax_row(x + i * cols, y + i * cols, cols);
}

void softmax_rows_backward(const real* y, const real* dy, real* dx, std::size_t rows_,
                           std::size_t cols) {
  for (std::size_t i = 0; i < rows_; ++i)
    rows::softmax_backward_row(y + i * cols, dy + i * cols, dx + i * cols, cols);
}

void layer_norm_rows(const real* x, const real* gamma, const real* beta, real* y, real* xhat,
                     real* rstd, std::size_t rows_, std::size_t cols, std::size_t norm_width,
                     double eps) {
  for (std::size_t i = 0; i < rows_; ++i)
    rows::layer_norm_row(x + i * cols, gamma, beta, y + i * cols, xhat + i * cols, rstd + i, cols,
                         norm_width, eps);
}

void layer_norm_rows_backward(const real* dy, const real* xhat, const real* rstd,
                              const real* gamma, real* dx, real* dgamma, real* dbeta,
                              std::size_t rows_, std::size_t cols, std::size_t norm_width) {
  for (std::size_t i = 0; i < rows_; ++i) {
    if (dx)
      rows::layer_norm_backward_row(dy + i * cols, xhat + i * cols, rstd[i], gamma, dx + i * cols,
                                    cols, norm_width);
  }
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (dgamma) dgamma[j] += dy[i * cols + j] * xhat[i * cols + j];
      if (dbeta) dbeta[j] += dy[i * cols + j];
    }
  }
}

void gelu(const real* x, real* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = rows::gelu_value(x[i]);
}

void gelu_backward(const real* x, const real* dy, real* dx, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dx[i] += dy[i] * rows::gelu_derivative(x[i]);
}

}  // namespace kernels::serial
VIBPRUNE_NAMESPACE_END
