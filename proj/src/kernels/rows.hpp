#pragma once

// Per-row building blocks shared by the serial and parallel kernels. Both
// drivers call exactly these functions, which is what makes them bit-identical.

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vibprune/common.hpp"

VIBPRUNE_NAMESPACE_BEGIN
namespace kernels::rows {

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline void gemm_nn_row(const real* a_row, const real* b, real* c_row, std::size_t k,
                        std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c_row, c_row + n, real(0));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const real aik = a_row[kk];
    const real* b_row = b + kk * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += aik * b_row[j];
  }
}

// Row `kk` of C = A^T B, summing over the m rows of A and B in order.
inline void gemm_tn_row(const real* a, const real* b, real* c_row, std::size_t kk,
                        std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c_row, c_row + n, real(0));
  for (std::size_t i = 0; i < m; ++i) {
    const real aik = a[i * k + kk];
    const real* b_row = b + i * n;
    for (std::size_t j = 0; j < n; ++j) c_row[j] += aik * b_row[j];
  }
}

inline void transpose(const real* src, real* dst, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

inline void softmax_row(const real* x, real* y, std::size_t cols) {
  real mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  double total = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double e = std::exp(static_cast<double>(x[j]) - static_cast<double>(mx));
    y[j] = static_cast<real>(e);
    total += e;
  }
  const double inv = 1.0 / total;
  for (std::size_t j = 0; j < cols; ++j) y[j] = static_cast<real>(y[j] * inv);
}

inline void softmax_backward_row(const real* y, const real* dy, real* dx, std::size_t cols) {
  double dot = 0.0;
  for (std::size_t j = 0; j < cols; ++j) dot += static_cast<double>(dy[j]) * y[j];
  for (std::size_t j = 0; j < cols; ++j)
    dx[j] += static_cast<real>(y[j] * (static_cast<double>(dy[j]) - dot));
}

inline void layer_norm_row(const real* x, const real* gamma, const real* beta, real* y,
                           real* xhat, real* rstd, std::size_t cols, std::size_t norm_width,
                           double eps) {
  const double width = static_cast<double>(norm_width);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) sum += x[j];
  const double mean = sum / width;
  double sq = static_cast<double>(norm_width - cols) * mean * mean;
  for (std::size_t j = 0; j < cols; ++j) {
    const double d = static_cast<double>(x[j]) - mean;
    sq += d * d;
  }
  const double r = 1.0 / std::sqrt(sq / width + eps);
  *rstd = static_cast<real>(r);
  for (std::size_t j = 0; j < cols; ++j) {
    const double h = (static_cast<double>(x[j]) - mean) * r;
    xhat[j] = static_cast<real>(h);
    y[j] = static_cast<real>(h * gamma[j] + beta[j]);
  }
}

inline void layer_norm_backward_row(const real* dy, const real* xhat, real rstd,
                                    const real* gamma, real* dx, std::size_t cols,
                                    std::size_t norm_width) {
  const double width = static_cast<double>(norm_width);
  double g_sum = 0.0;
  double gx_sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    const double g = static_cast<double>(dy[j]) * gamma[j];
    g_sum += g;
    gx_sum += g * xhat[j];
  }
  const double g_mean = g_sum / width;
  const double gx_mean = gx_sum / width;
  for (std::size_t j = 0; j < cols; ++j) {
    const double g = static_cast<double>(dy[j]) * gamma[j];
    dx[j] += static_cast<real>(rstd * (g - g_mean - xhat[j] * gx_mean));
  }
}

inline real gelu_value(real xv) {
  const double x = xv;
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return static_cast<real>(0.5 * x * (1.0 + t));
}

inline real gelu_derivative(real xv) {
  const double x = xv;
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
  return static_cast<real>(0.5 * (1.0 + t) + 0.5 * x * dt);
}

}  // namespace kernels::rows
VIBPRUNE_NAMESPACE_END
