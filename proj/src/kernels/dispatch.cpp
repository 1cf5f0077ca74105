#include <cstdlib>
#include <string_view>

#include "dpllm/kernels.hpp"

namespace dpllm::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& pick() {
  if (const char* env = std::getenv("DPLLM_KERNELS"); env != nullptr) {
    if (std::string_view(env) == "scalar") {
      return scalar();
    }
  }
  if (const KernelTable* t = avx2()) {
    return *t;
  }
  return scalar();
}

}  // namespace

const KernelTable* avx2() {
  static const KernelTable* table = cpu_has_avx2() ? detail::avx2_table() : nullptr;
  return table;
}

const KernelTable& active() {
  static const KernelTable& table = pick();
  return table;
}

}  // namespace dpllm::kernels
