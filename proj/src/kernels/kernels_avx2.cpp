#include "kernels_detail.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

// AVX2/FMA variants. Same pairwise block structure as the scalar kernels;
// within a block the four-lane accumulators are combined once at the end,
// so results agree with the scalar reference to rounding.

namespace mrtint::kernels::detail {
namespace {

constexpr std::size_t kPairwiseBase = 64;

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double sum_block(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double total = hsum(acc);
  for (; i < n; ++i) total += x[i];
  return total;
}

double sum_avx2(const double* x, std::size_t n) {
  if (n <= kPairwiseBase) return sum_block(x, n);
  const std::size_t half = n / 2;
  return sum_avx2(x, half) + sum_avx2(x + half, n - half);
}

double dot_block(const double* x, const double* y, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    acc = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc);
  double total = hsum(acc);
  for (; i < n; ++i) total += x[i] * y[i];
  return total;
}

double dot_avx2(const double* x, const double* y, std::size_t n) {
  if (n <= kPairwiseBase) return dot_block(x, y, n);
  const std::size_t half = n / 2;
  return dot_avx2(x, y, half) + dot_avx2(x + half, y + half, n - half);
}

void axpy_avx2(double a, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void mat_vec_avx2(const double* x, std::size_t rows, std::size_t cols,
                  const double* v, double* out) {
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = dot_block(x + r * cols, v, cols);
  }
}

void weighted_col_sum_avx2(const double* x, const double* w, std::size_t rows,
                           std::size_t cols, double* g) {
  for (std::size_t r = 0; r < rows; ++r) {
    axpy_avx2(w[r], x + r * cols, g, cols);
  }
}

void gram_avx2(const double* x, const double* w, std::size_t rows,
               std::size_t cols, double* g) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * cols;
    const double wr = w[r];
    for (std::size_t j = 0; j < cols; ++j) {
      axpy_avx2(wr * row[j], row, g + j * cols, cols);
    }
  }
}

}  // namespace

const KernelTable& avx2_table() {
  static const KernelTable table{sum_avx2,    dot_avx2,
                                 axpy_avx2,   mat_vec_avx2,
                                 weighted_col_sum_avx2, gram_avx2};
  return table;
}

}  // namespace mrtint::kernels::detail

#endif  // x86-64
