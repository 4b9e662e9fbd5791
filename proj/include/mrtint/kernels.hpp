#pragma once

#include <cstddef>

// Data-parallel arithmetic kernels used in the row-stream inner loops
// (design-matrix products, weighted Gram accumulation, score reductions).
// Every kernel has a scalar reference implementation and, on x86-64, an
// AVX2/FMA variant selected at runtime. The two backends are equivalence
// tested; sums use a fixed-order pairwise scheme so repeated runs of the
// same binary produce bit-identical reductions.

namespace mrtint::kernels {

enum class Backend { scalar, avx2 };

// Backend active for subsequent kernel calls. Defaults to the best variant
// the CPU supports; set_backend exists for tests and benchmarking.
Backend active_backend();
void set_backend(Backend b);
bool cpu_supports_avx2();

// sum of x[0..n), fixed-order pairwise
double sum(const double* x, std::size_t n);

// sum of x[i]*y[i], fixed-order pairwise
double dot(const double* x, const double* y, std::size_t n);

// y[i] += a * x[i]
void axpy(double a, const double* x, double* y, std::size_t n);

// out[r] = dot(X[r,:], v) for row-major X (rows x cols)
void mat_vec(const double* x, std::size_t rows, std::size_t cols,
             const double* v, double* out);

// g[cols] += sum_r w[r] * X[r,:]   (row-major X)
void weighted_col_sum(const double* x, const double* w, std::size_t rows,
                      std::size_t cols, double* g);

// G (row-major cols x cols) += sum_r w[r] * X[r,:] X[r,:]^T
void gram(const double* x, const double* w, std::size_t rows,
          std::size_t cols, double* g);

}  // namespace mrtint::kernels
