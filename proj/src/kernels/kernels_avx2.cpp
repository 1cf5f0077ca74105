// AVX2 + FMA variants. This translation unit is compiled with -mavx2 -mfma;
// nothing here may run before the dispatcher has checked CPU support.

#include <cstddef>
#include <cstdint>
#include <cstring>

#include "dpllm/kernels.hpp"

#if defined(DPLLM_HAVE_AVX2)
#include <immintrin.h>

namespace dpllm::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

// Four codes -> four doubles, shifted right by `shift`.
inline __m256d load_codes4(const std::uint8_t* q, __m128i shift) {
  std::int32_t packed;
  std::memcpy(&packed, q, sizeof(packed));
  __m128i v = _mm_cvtepu8_epi32(_mm_cvtsi32_si128(packed));
  v = _mm_srl_epi32(v, shift);
  return _mm256_cvtepi32_pd(v);
}

double dot_avx2(const double* a, const double* b, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) {
    acc += a[i] * b[i];
  }
  return acc;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) {
    y[i] += alpha * x[i];
  }
}

void gemv_avx2(const double* w, std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    y[r] = dot_avx2(w + r * cols, x, cols);
  }
}

void gemv_t_acc_avx2(const double* w, std::size_t rows, std::size_t cols, const double* dy,
                     double* dx) {
  for (std::size_t r = 0; r < rows; ++r) {
    if (dy[r] != 0.0) {
      axpy_avx2(dy[r], w + r * cols, dx, cols);
    }
  }
}

void gemv_codes_avx2(const std::uint8_t* codes, std::size_t rows, std::size_t cols,
                     unsigned shift, const double* lo, const double* step, const double* x,
                     double* y) {
  const __m128i vshift = _mm_cvtsi32_si128(static_cast<int>(shift));
  double sum_x = 0.0;
  {
    __m256d s = _mm256_setzero_pd();
    std::size_t c = 0;
    for (; c + 4 <= cols; c += 4) {
      s = _mm256_add_pd(s, _mm256_loadu_pd(x + c));
    }
    sum_x = hsum(s);
    for (; c < cols; ++c) {
      sum_x += x[c];
    }
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* q = codes + r * cols;
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t c = 0;
    for (; c + 8 <= cols; c += 8) {
      acc0 = _mm256_fmadd_pd(load_codes4(q + c, vshift), _mm256_loadu_pd(x + c), acc0);
      acc1 = _mm256_fmadd_pd(load_codes4(q + c + 4, vshift), _mm256_loadu_pd(x + c + 4), acc1);
    }
    for (; c + 4 <= cols; c += 4) {
      acc0 = _mm256_fmadd_pd(load_codes4(q + c, vshift), _mm256_loadu_pd(x + c), acc0);
    }
    double acc = hsum(_mm256_add_pd(acc0, acc1));
    for (; c < cols; ++c) {
      acc += static_cast<double>(q[c] >> shift) * x[c];
    }
    y[r] = lo[r] * sum_x + step[r] * (acc + 0.5 * sum_x);
  }
}

void gemv_t_codes_acc_avx2(const std::uint8_t* codes, std::size_t rows, std::size_t cols,
                           unsigned shift, const double* lo, const double* step, const double* dy,
                           double* dx) {
  const __m128i vshift = _mm_cvtsi32_si128(static_cast<int>(shift));
  double base = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    base += dy[r] * (lo[r] + 0.5 * step[r]);
  }
  const __m256d vbase = _mm256_set1_pd(base);
  std::size_t c = 0;
  for (; c + 4 <= cols; c += 4) {
    _mm256_storeu_pd(dx + c, _mm256_add_pd(_mm256_loadu_pd(dx + c), vbase));
  }
  for (; c < cols; ++c) {
    dx[c] += base;
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const double w = dy[r] * step[r];
    if (w == 0.0) {
      continue;
    }
    const __m256d vw = _mm256_set1_pd(w);
    const std::uint8_t* q = codes + r * cols;
    c = 0;
    for (; c + 4 <= cols; c += 4) {
      _mm256_storeu_pd(dx + c,
                       _mm256_fmadd_pd(vw, load_codes4(q + c, vshift), _mm256_loadu_pd(dx + c)));
    }
    for (; c < cols; ++c) {
      dx[c] += w * static_cast<double>(q[c] >> shift);
    }
  }
}

constexpr KernelTable kAvx2Table{
    "avx2",          dot_avx2,        axpy_avx2, gemv_avx2, gemv_t_acc_avx2,
    gemv_codes_avx2, gemv_t_codes_acc_avx2,
};

}  // namespace

const KernelTable* detail::avx2_table() { return &kAvx2Table; }

}  // namespace dpllm::kernels

#else

namespace dpllm::kernels {
const KernelTable* detail::avx2_table() { return nullptr; }
}  // namespace dpllm::kernels

#endif
