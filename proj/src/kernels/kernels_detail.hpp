#pragma once

#include <cstddef>

// Per-backend entry points. kernels_dispatch.cpp wires one set of these
// into the public API based on the runtime CPU check.

namespace mrtint::kernels::detail {

struct KernelTable {
  double (*sum)(const double*, std::size_t);
  double (*dot)(const double*, const double*, std::size_t);
  void (*axpy)(double, const double*, double*, std::size_t);
  void (*mat_vec)(const double*, std::size_t, std::size_t, const double*, double*);
  void (*weighted_col_sum)(const double*, const double*, std::size_t, std::size_t, double*);
  void (*gram)(const double*, const double*, std::size_t, std::size_t, double*);
};

const KernelTable& scalar_table();

#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif

}  // namespace mrtint::kernels::detail
