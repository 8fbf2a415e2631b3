// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/kernels/kernels.hpp"

#include <cstdlib>
#include <cstring>

namespace vfmseg::kernels {

// Defined in avx2.cpp; nullptr when that TU was built without AVX2 support.
const Backend* avx2_backend_impl();

bool cpu_supports_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const Backend* avx2_backend() {
  if (!cpu_supports_avx2()) return nullptr;
  return avx2_backend_impl();
}

namespace {

const Backend& select() {
  const char* forced = std::getenv("VFMSEG_KERNELS");
  if (forced != nullptr && std::strcmp(forced, "scalar") == 0) {
    return scalar_backend();
  }
  const Backend* avx2 = avx2_backend();
  if (forced != nullptr && std::strcmp(forced, "avx2") == 0 && avx2 == nullptr) {
    return scalar_backend();
  }
  return avx2 != nullptr ? *avx2 : scalar_backend();
}

}  // namespace

const Backend& active() {
  static const Backend& chosen = select();
  return chosen;
}

}  // namespace vfmseg::kernels
