#include <cstddef>
#include <cstdint>

#include "dpllm/kernels.hpp"

namespace dpllm::kernels {
namespace {

double dot_scalar(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    y[i] += alpha * x[i];
  }
}

void gemv_scalar(const double* w, std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    y[r] = dot_scalar(w + r * cols, x, cols);
  }
}

void gemv_t_acc_scalar(const double* w, std::size_t rows, std::size_t cols, const double* dy,
                       double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (dy[r] != 0.0) {
      axpy_scalar(dy[r], w + r * cols, dx, cols);
    }
  }
}

void gemv_codes_scalar(const std::uint8_t* codes, std::size_t rows, std::size_t cols,
                       unsigned shift, const double* lo, const double* step, const double* x,
                       double* y) {
  double sum_x = 0.0;
  for (std::size_t c = 0; c < cols; ++c) {
    sum_x += x[c];
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* q = codes + r * cols;
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      acc += static_cast<double>(q[c] >> shift) * x[c];
    }
    y[r] = lo[r] * sum_x + step[r] * (acc + 0.5 * sum_x);
  }
}

void gemv_t_codes_acc_scalar(const std::uint8_t* codes, std::size_t rows, std::size_t cols,
                             unsigned shift, const double* lo, const double* step, const double* dy,
                             double* dx) {
  // dx[c] += sum_r dy[r] * (lo[r] + 0.5 step[r]) + sum_r dy[r] step[r] q[r][c]
  double base = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    base += dy[r] * (lo[r] + 0.5 * step[r]);
  }
  for (std::size_t c = 0; c < cols; ++c) {
    dx[c] += base;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const double w = dy[r] * step[r];
    if (w == 0.0) {
      continue;
    }
    const std::uint8_t* q = codes + r * cols;
    for (std::size_t c = 0; c < cols; ++c) {
      dx[c] += w * static_cast<double>(q[c] >> shift);
    }
  }
}

constexpr KernelTable kScalarTable{
    "scalar",       dot_scalar,        axpy_scalar, gemv_scalar, gemv_t_acc_scalar,
    gemv_codes_scalar, gemv_t_codes_acc_scalar,
};

}  // namespace

const KernelTable& scalar() { return kScalarTable; }

}  // namespace dpllm::kernels
