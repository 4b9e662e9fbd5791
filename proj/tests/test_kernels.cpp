#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "mrtint/kernels.hpp"

using namespace mrtint;

namespace {

struct BackendGuard {
  kernels::Backend saved = kernels::active_backend();
  ~BackendGuard() { kernels::set_backend(saved); }
};

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

}  // namespace

TEST_CASE("scalar and avx2 backends agree on every kernel") {
  if (!kernels::cpu_supports_avx2()) return;  // scalar-only host
  BackendGuard guard;
  std::mt19937_64 rng(7);

  for (std::size_t n : {0ul, 1ul, 3ul, 4ul, 7ul, 63ul, 64ul, 65ul, 1000ul, 16384ul}) {
    auto x = random_vec(rng, n), y = random_vec(rng, n);

    kernels::set_backend(kernels::Backend::scalar);
    const double sum_s = kernels::sum(x.data(), n);
    const double dot_s = kernels::dot(x.data(), y.data(), n);
    kernels::set_backend(kernels::Backend::avx2);
    const double sum_v = kernels::sum(x.data(), n);
    const double dot_v = kernels::dot(x.data(), y.data(), n);

    CHECK(sum_v == doctest::Approx(sum_s).epsilon(1e-12));
    CHECK(dot_v == doctest::Approx(dot_s).epsilon(1e-12));
  }

  for (std::size_t cols : {1ul, 2ul, 5ul, 8ul, 11ul}) {
    const std::size_t rows = 997;
    auto x = random_vec(rng, rows * cols);
    auto w = random_vec(rng, rows);
    auto v = random_vec(rng, cols);

    std::vector<double> out_s(rows), out_v(rows);
    std::vector<double> g_s(cols, 0.0), g_v(cols, 0.0);
    std::vector<double> gram_s(cols * cols, 0.0), gram_v(cols * cols, 0.0);
    std::vector<double> axpy_s = w, axpy_v = w;

    kernels::set_backend(kernels::Backend::scalar);
    kernels::mat_vec(x.data(), rows, cols, v.data(), out_s.data());
    kernels::weighted_col_sum(x.data(), w.data(), rows, cols, g_s.data());
    kernels::gram(x.data(), w.data(), rows, cols, gram_s.data());
    kernels::axpy(2.5, w.data(), axpy_s.data(), rows);

    kernels::set_backend(kernels::Backend::avx2);
    kernels::mat_vec(x.data(), rows, cols, v.data(), out_v.data());
    kernels::weighted_col_sum(x.data(), w.data(), rows, cols, g_v.data());
    kernels::gram(x.data(), w.data(), rows, cols, gram_v.data());
    kernels::axpy(2.5, w.data(), axpy_v.data(), rows);

    for (std::size_t i = 0; i < rows; ++i)
      CHECK(out_v[i] == doctest::Approx(out_s[i]).epsilon(1e-12));
    for (std::size_t i = 0; i < cols; ++i)
      CHECK(g_v[i] == doctest::Approx(g_s[i]).epsilon(1e-11));
    for (std::size_t i = 0; i < cols * cols; ++i)
      CHECK(gram_v[i] == doctest::Approx(gram_s[i]).epsilon(1e-11));
    for (std::size_t i = 0; i < rows; ++i)
      CHECK(axpy_v[i] == doctest::Approx(axpy_s[i]).epsilon(1e-12));
  }
}

TEST_CASE("kernel reductions are reproducible run to run") {
  std::mt19937_64 rng(11);
  auto x = random_vec(rng, 100000);
  const double first = kernels::sum(x.data(), x.size());
  for (int i = 0; i < 5; ++i) CHECK(kernels::sum(x.data(), x.size()) == first);
}

TEST_CASE("pairwise sum beats naive accumulation on adversarial input") {
  // large cancellation: pairwise error should stay near machine precision
  std::vector<double> x;
  for (int i = 0; i < 100000; ++i) {
    x.push_back(1e10);
    x.push_back(1.0);
    x.push_back(-1e10);
  }
  const double got = kernels::sum(x.data(), x.size());
  CHECK(got == doctest::Approx(100000.0).epsilon(1e-9));
}

TEST_CASE("reference kernel values") {
  const double x[] = {1.0, 2.0, 3.0};
  const double y[] = {4.0, 5.0, 6.0};
  CHECK(kernels::sum(x, 3) == 6.0);
  CHECK(kernels::dot(x, y, 3) == 32.0);

  // gram of [[1,2],[3,4]] with weights (2, 1)
  const double m[] = {1.0, 2.0, 3.0, 4.0};
  const double w[] = {2.0, 1.0};
  double g[4] = {0, 0, 0, 0};
  kernels::gram(m, w, 2, 2, g);
  CHECK(g[0] == 11.0);  // 2*1*1 + 3*3
  CHECK(g[1] == 16.0);  // 2*1*2 + 3*4
  CHECK(g[2] == 16.0);
  CHECK(g[3] == 24.0);  // 2*4 + 16
}
