// The OpenMP kernels must reproduce the serial reference bit for bit.

#include <gtest/gtest.h>

#include <omp.h>

#include <cstring>
#include <random>
#include <tuple>

#include "vibprune/kernels.hpp"

using namespace vibprune;
namespace serial = kernels::serial;
namespace parallel = kernels::parallel;

namespace {

std::vector<real> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::vector<real> v(n);
  for (auto& x : v) x = static_cast<real>(u(rng));
  return v;
}

bool same_bits(const std::vector<real>& a, const std::vector<real>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(real)) == 0;
}

class KernelParity : public ::testing::TestWithParam<std::tuple<std::size_t, std::size_t, std::size_t>> {
 protected:
  void SetUp() override { omp_set_num_threads(4); }
};

}  // namespace

TEST_P(KernelParity, Gemm) {
  const auto [m, k, n] = GetParam();
  const auto a = random_vector(m * k, 1), b = random_vector(k * n, 2), bt = random_vector(n * k, 3);
  const auto start = random_vector(std::max(m, k) * n, 5);
  for (bool acc : {false, true}) {
    std::vector<real> s(start.begin(), start.begin() + static_cast<std::ptrdiff_t>(m * n)), p = s;
    serial::gemm_nn(a.data(), b.data(), s.data(), m, k, n, acc);
    parallel::gemm_nn(a.data(), b.data(), p.data(), m, k, n, acc);
    EXPECT_TRUE(same_bits(s, p)) << "gemm_nn";

    s.assign(start.begin(), start.begin() + static_cast<std::ptrdiff_t>(m * n));
    p = s;
    serial::gemm_nt(a.data(), bt.data(), s.data(), m, k, n, acc);
    parallel::gemm_nt(a.data(), bt.data(), p.data(), m, k, n, acc);
    EXPECT_TRUE(same_bits(s, p)) << "gemm_nt";

    // gemm_tn: A is (m, k) read transposed into a (k, n) result from B (m, n).
    const auto bm = random_vector(m * n, 6);
    s.assign(start.begin(), start.begin() + static_cast<std::ptrdiff_t>(k * n));
    p = s;
    serial::gemm_tn(a.data(), bm.data(), s.data(), m, k, n, acc);
    parallel::gemm_tn(a.data(), bm.data(), p.data(), m, k, n, acc);
    EXPECT_TRUE(same_bits(s, p)) << "gemm_tn";
  }
}

TEST_P(KernelParity, RowKernels) {
  const auto [rows, cols, extra] = GetParam();
  const auto x = random_vector(rows * cols, 7), dy = random_vector(rows * cols, 8);
  const auto gamma = random_vector(cols, 9), beta = random_vector(cols, 10);

  std::vector<real> ys(rows * cols), yp(rows * cols);
  serial::softmax_rows(x.data(), ys.data(), rows, cols);
  parallel::softmax_rows(x.data(), yp.data(), rows, cols);
  EXPECT_TRUE(same_bits(ys, yp)) << "softmax";

  std::vector<real> ds(rows * cols, real(0.5)), dp = ds;
  serial::softmax_rows_backward(ys.data(), dy.data(), ds.data(), rows, cols);
  parallel::softmax_rows_backward(ys.data(), dy.data(), dp.data(), rows, cols);
  EXPECT_TRUE(same_bits(ds, dp)) << "softmax backward";

  const std::size_t width = cols + extra;
  std::vector<real> ns(rows * cols), np(rows * cols), xs(rows * cols), xp(rows * cols), rs(rows), rp(rows);
  serial::layer_norm_rows(x.data(), gamma.data(), beta.data(), ns.data(), xs.data(), rs.data(), rows, cols, width, 1e-5);
  parallel::layer_norm_rows(x.data(), gamma.data(), beta.data(), np.data(), xp.data(), rp.data(), rows, cols, width,
                            1e-5);
  EXPECT_TRUE(same_bits(ns, np) && same_bits(xs, xp) && same_bits(rs, rp)) << "layer norm";

  std::vector<real> dxs(rows * cols), dxp(rows * cols), dgs(cols), dgp(cols), dbs(cols), dbp(cols);
  serial::layer_norm_rows_backward(dy.data(), xs.data(), rs.data(), gamma.data(), dxs.data(), dgs.data(), dbs.data(),
                                   rows, cols, width);
  parallel::layer_norm_rows_backward(dy.data(), xp.data(), rp.data(), gamma.data(), dxp.data(), dgp.data(), dbp.data(),
                                     rows, cols, width);
  EXPECT_TRUE(same_bits(dxs, dxp) && same_bits(dgs, dgp) && same_bits(dbs, dbp)) << "layer norm backward";

  std::vector<real> gs(rows * cols), gp(rows * cols);
  serial::gelu(x.data(), gs.data(), rows * cols);
  parallel::gelu(x.data(), gp.data(), rows * cols);
  EXPECT_TRUE(same_bits(gs, gp)) << "gelu";
  std::vector<real> gbs(rows * cols, real(1)), gbp = gbs;
  serial::gelu_backward(x.data(), dy.data(), gbs.data(), rows * cols);
  parallel::gelu_backward(x.data(), dy.data(), gbp.data(), rows * cols);
  EXPECT_TRUE(same_bits(gbs, gbp)) << "gelu backward";
}

INSTANTIATE_TEST_SUITE_P(Shapes, KernelParity,
                         ::testing::Values(std::make_tuple(1, 1, 1), std::make_tuple(7, 5, 3),
                                           std::make_tuple(64, 16, 9), std::make_tuple(448, 64, 0),
                                           std::make_tuple(129, 33, 65)));

TEST(KernelReference, GemmMatchesNaiveLoop) {
  const std::size_t m = 5, k = 7, n = 3;
  const auto a = random_vector(m * k, 11), b = random_vector(k * n, 12);
  std::vector<real> c(m * n);
  serial::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(a[i * k + p]) * b[p * n + j];
      EXPECT_NEAR(c[i * n + j], acc, 1e-5);
    }
}
