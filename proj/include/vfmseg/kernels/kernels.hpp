// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace vfmseg::kernels {

// Dense double-precision kernels behind every hot loop in the project.
// A Backend is a table of function pointers; `scalar_backend()` is the
// portable reference implementation and `avx2_backend()` is a vectorized
// variant selected at runtime when the CPU supports AVX2+FMA. Both must
// agree to tight tolerance on all inputs (see tests/test_kernels.cpp).
//
// All matrices are row-major; ld* are row strides in elements.
struct Backend {
  const char* name;

  // C = alpha * A(MxK) * B(KxN) + beta * C. beta == 0 overwrites C.
  void (*gemm_nn)(int m, int n, int k, double alpha, const double* a, int lda,
                  const double* b, int ldb, double beta, double* c, int ldc);
  // C = alpha * A(MxK) * B(NxK)^T + beta * C.
  void (*gemm_nt)(int m, int n, int k, double alpha, const double* a, int lda,
                  const double* b, int ldb, double beta, double* c, int ldc);
  // C = alpha * A(KxM)^T * B(KxN) + beta * C.
  void (*gemm_tn)(int m, int n, int k, double alpha, const double* a, int lda,
                  const double* b, int ldb, double beta, double* c, int ldc);

  // y += x
  void (*vadd)(double* y, const double* x, std::size_t n);
  // y = a*x + b*y
  void (*vaxpby)(double* y, double a, const double* x, double b, std::size_t n);
  // y *= a
  void (*vscale)(double* y, double a, std::size_t n);
  // y += a*x
  void (*vaxpy)(double* y, double a, const double* x, std::size_t n);
  double (*vdot)(const double* x, const double* y, std::size_t n);
  double (*vsum)(const double* x, std::size_t n);
  // sum_i (x_i - y_i)^2
  double (*vsqdiff)(const double* x, const double* y, std::size_t n);

  void (*relu)(double* y, const double* x, std::size_t n);
  // dx += (x > 0) * dy
  void (*relu_grad)(double* dx, const double* x, const double* dy,
                    std::size_t n);

  // t = momentum*t + (1-momentum)*s, elementwise
  void (*ema)(double* t, const double* s, double momentum, std::size_t n);

  // Decoupled-weight-decay Adam step with precomputed bias corrections
  // bc1 = 1 - beta1^t, bc2 = 1 - beta2^t:
  //   m = beta1*m + (1-beta1)*g
  //   v = beta2*v + (1-beta2)*g*g
  //   p -= lr * ((m/bc1) / (sqrt(v/bc2) + eps) + wd*p)
  void (*adamw)(double* p, double* m, double* v, const double* g,
                std::size_t n, double lr, double beta1, double beta2,
                double eps, double wd, double bc1, double bc2);
};

const Backend& scalar_backend();

// nullptr when the CPU (or build) lacks AVX2+FMA.
const Backend* avx2_backend();

// Backend picked once per process: AVX2 when available, else scalar.
// Env var VFMSEG_KERNELS=scalar|avx2 forces a choice (avx2 on an
// unsupported CPU falls back to scalar).
const Backend& active();

bool cpu_supports_avx2();

}  // namespace vfmseg::kernels
