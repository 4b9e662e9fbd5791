#include "kernels_detail.hpp"

// Scalar reference kernels. These define the semantics the SIMD variants
// are tested against.

namespace mrtint::kernels::detail {
namespace {

constexpr std::size_t kPairwiseBase = 64;

double sum_scalar(const double* x, std::size_t n) {
  if (n <= kPairwiseBase) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
  }
  const std::size_t half = n / 2;
  return sum_scalar(x, half) + sum_scalar(x + half, n - half);
}

double dot_scalar(const double* x, const double* y, std::size_t n) {
  if (n <= kPairwiseBase) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    return acc;
  }
  const std::size_t half = n / 2;
  return dot_scalar(x, y, half) + dot_scalar(x + half, y + half, n - half);
}

void axpy_scalar(double a, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void mat_vec_scalar(const double* x, std::size_t rows, std::size_t cols,
                    const double* v, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) acc += row[c] * v[c];
    out[r] = acc;
  }
}

void weighted_col_sum_scalar(const double* x, const double* w, std::size_t rows,
                             std::size_t cols, double* g) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * cols;
    const double wr = w[r];
    for (std::size_t c = 0; c < cols; ++c) g[c] += wr * row[c];
  }
}

void gram_scalar(const double* x, const double* w, std::size_t rows,
                 std::size_t cols, double* g) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * cols;
    const double wr = w[r];
    for (std::size_t j = 0; j < cols; ++j) {
      const double wj = wr * row[j];
      double* grow = g + j * cols;
      for (std::size_t k = 0; k < cols; ++k) grow[k] += wj * row[k];
    }
  }
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{sum_scalar,    dot_scalar,
                                 axpy_scalar,   mat_vec_scalar,
                                 weighted_col_sum_scalar, gram_scalar};
  return table;
}

}  // namespace mrtint::kernels::detail
