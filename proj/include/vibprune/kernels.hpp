#pragma once

// Dense row-major kernels behind the tensor primitives.
//
// `serial` is the reference implementation. `parallel` splits the outermost
// independent loop across OpenMP threads and keeps the per-element
// accumulation order of `serial`, so both produce bit-identical results.

#include "vibprune/common.hpp"

VIBPRUNE_NAMESPACE_BEGIN
namespace kernels {

#define VIBPRUNE_KERNEL_DECLS                                                         \
  /* C[m,n] (+)= A[m,k] B[k,n] */                                                     \
  void gemm_nn(const real* a, const real* b, real* c, std::size_t m, std::size_t k,   \
               std::size_t n, bool accumulate);                                       \
  /* C[m,n] (+)= A[m,k] B[n,k]^T */                                                   \
  void gemm_nt(const real* a, const real* b, real* c, std::size_t m, std::size_t k,   \
               std::size_t n, bool accumulate);                                       \
  /* C[k,n] (+)= A[m,k]^T B[m,n] */                                                   \
  void gemm_tn(const real* a, const real* b, real* c, std::size_t m, std::size_t k,   \
               std::size_t n, bool accumulate);                                       \
  void softmax_rows(const real* x, real* y, std::size_t rows, std::size_t cols);      \
  /* dx += y * (dy - <dy, y>) */                                                      \
  void softmax_rows_backward(const real* y, const real* dy, real* dx,                 \
                             std::size_t rows, std::size_t cols);                     \
  /* Statistics divide by norm_width >= cols; the missing norm_width - cols */        \
  /* entries are treated as structural zeros. */                                      \
  void layer_norm_rows(const real* x, const real* gamma, const real* beta, real* y,   \
                       real* xhat, real* rstd, std::size_t rows, std::size_t cols,    \
                       std::size_t norm_width, double eps);                           \
  void layer_norm_rows_backward(const real* dy, const real* xhat, const real* rstd,   \
                                const real* gamma, real* dx, real* dgamma,            \
                                real* dbeta, std::size_t rows, std::size_t cols,      \
                                std::size_t norm_width);                              \
  void gelu(const real* x, real* y, std::size_t n);                                   \
  /* dx += dy * gelu'(x) */                                                           \
  void gelu_backward(const real* x, const real* dy, real* dx, std::size_t n);

namespace serial {
VIBPRUNE_KERNEL_DECLS
}  // namespace serial

namespace parallel {
VIBPRUNE_KERNEL_DECLS
/// Threads OpenMP would use for a parallel region (1 when built without it).
int max_threads();
}  // namespace parallel

#undef VIBPRUNE_KERNEL_DECLS

}  // namespace kernels
VIBPRUNE_NAMESPACE_END
