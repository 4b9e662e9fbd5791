#include "mrtint/kernels.hpp"

#include <atomic>
#include <cstdlib>

#include "kernels_detail.hpp"

namespace mrtint::kernels {
namespace {

using detail::KernelTable;

bool hardware_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Backend detect_backend() {
  if (std::getenv("MRTINT_FORCE_SCALAR") != nullptr) return Backend::scalar;
  return hardware_avx2() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend> g_backend{detect_backend()};

const KernelTable& table() {
#if defined(__x86_64__) || defined(_M_X64)
  if (g_backend.load(std::memory_order_relaxed) == Backend::avx2)
    return detail::avx2_table();
#endif
  return detail::scalar_table();
}

}  // namespace

bool cpu_supports_avx2() { return hardware_avx2(); }

Backend active_backend() { return g_backend.load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (b == Backend::avx2 && !cpu_supports_avx2()) b = Backend::scalar;
  g_backend.store(b, std::memory_order_relaxed);
}

double sum(const double* x, std::size_t n) { return table().sum(x, n); }

double dot(const double* x, const double* y, std::size_t n) {
  return table().dot(x, y, n);
}

void axpy(double a, const double* x, double* y, std::size_t n) {
  table().axpy(a, x, y, n);
}

void mat_vec(const double* x, std::size_t rows, std::size_t cols,
             const double* v, double* out) {
  table().mat_vec(x, rows, cols, v, out);
}

void weighted_col_sum(const double* x, const double* w, std::size_t rows,
                      std::size_t cols, double* g) {
  table().weighted_col_sum(x, w, rows, cols, g);
}

void gram(const double* x, const double* w, std::size_t rows, std::size_t cols,
          double* g) {
  table().gram(x, w, rows, cols, g);
}

}  // namespace mrtint::kernels
