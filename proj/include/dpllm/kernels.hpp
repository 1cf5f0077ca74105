#pragma once

// Inner-loop arithmetic kernels. Every kernel has a scalar reference
// implementation; an AVX2+FMA variant is compiled into a separate
// translation unit and selected at startup when the CPU supports it.
//
// Set DPLLM_KERNELS=scalar in the environment to force the reference path.

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace dpllm::kernels {

struct KernelTable {
  std::string_view name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, std::size_t n);

  // y[i] += alpha * x[i]
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);

  // y = W x, W row-major rows x cols
  void (*gemv)(const double* w, std::size_t rows, std::size_t cols, const double* x, double* y);

  // dx += W^T dy
  void (*gemv_t_acc)(const double* w, std::size_t rows, std::size_t cols, const double* dy,
                     double* dx);

  // Fused dequantize-and-multiply over nested codes. Row r reconstructs
  // lo[r] + ((code >> shift) + 0.5) * step[r]; y = W_b x.
  void (*gemv_codes)(const std::uint8_t* codes, std::size_t rows, std::size_t cols, unsigned shift,
                     const double* lo, const double* step, const double* x, double* y);

  // dx += W_b^T dy for the same reconstruction.
  void (*gemv_t_codes_acc)(const std::uint8_t* codes, std::size_t rows, std::size_t cols,
                           unsigned shift, const double* lo, const double* step, const double* dy,
                           double* dx);
};

const KernelTable& scalar();

// nullptr when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2();

// Table chosen at first use: best supported variant unless overridden.
const KernelTable& active();

namespace detail {
const KernelTable* avx2_table();
}

}  // namespace dpllm::kernels
