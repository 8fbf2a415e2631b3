// SPDX-License-Identifier: Apache-2.0
//
// Reference kernels. Plain loops, fixed summation order (k ascending for
// gemm_nn/gemm_tn, row dot for gemm_nt). The AVX2 backend follows the same
// order so the two stay within rounding distance of each other.

#include "vfmseg/kernels/kernels.hpp"

#include <cmath>
#include <cstring>

namespace vfmseg::kernels {
namespace {

void prescale_rows(int m, int n, double beta, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    double* row = c + static_cast<std::size_t>(i) * ldc;
    if (beta == 0.0) {
      std::memset(row, 0, sizeof(double) * static_cast<std::size_t>(n));
    } else if (beta != 1.0) {
      for (int j = 0; j < n; ++j) row[j] *= beta;
    }
  }
}

void gemm_nn(int m, int n, int k, double alpha, const double* a, int lda,
             const double* b, int ldb, double beta, double* c, int ldc) {
  prescale_rows(m, n, beta, c, ldc);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * lda;
    double* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int p = 0; p < k; ++p) {
      const double aip = alpha * arow[p];
      if (aip == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

void gemm_nt(int m, int n, int k, double alpha, const double* a, int lda,
             const double* b, int ldb, double beta, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * lda;
    double* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * ldb;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = alpha * acc + (beta == 0.0 ? 0.0 : beta * crow[j]);
    }
  }
}

void gemm_tn(int m, int n, int k, double alpha, const double* a, int lda,
             const double* b, int ldb, double beta, double* c, int ldc) {
  prescale_rows(m, n, beta, c, ldc);
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<std::size_t>(p) * lda;
    const double* brow = b + static_cast<std::size_t>(p) * ldb;
    for (int i = 0; i < m; ++i) {
      const double api = alpha * arow[i];
      if (api == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(i) * ldc;
      for (int j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

void vadd(double* y, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += x[i];
}

void vaxpby(double* y, double a, const double* x, double b, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a * x[i] + b * y[i];
}

void vscale(double* y, double a, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] *= a;
}

void vaxpy(double* y, double a, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

double vdot(const double* x, const double* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

double vsum(const double* x, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

double vsqdiff(const double* x, const double* y, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return acc;
}

void relu(double* y, const double* x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad(double* dx, const double* x, const double* dy, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

void ema(double* t, const double* s, double momentum, std::size_t n) {
  const double w = 1.0 - momentum;
  for (std::size_t i = 0; i < n; ++i) t[i] = momentum * t[i] + w * s[i];
}

void adamw(double* p, double* m, double* v, const double* g, std::size_t n,
           double lr, double beta1, double beta2, double eps, double wd,
           double bc1, double bc2) {
  const double om1 = 1.0 - beta1;
  const double om2 = 1.0 - beta2;
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + om1 * g[i];
    v[i] = beta2 * v[i] + om2 * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace

const Backend& scalar_backend() {
  static const Backend backend{
      "scalar", gemm_nn, gemm_nt, gemm_tn, vadd,      vaxpby, vscale,
      vaxpy,    vdot,    vsum,    vsqdiff, relu,      relu_grad,
      ema,      adamw,
  };
  return backend;
}

}  // namespace vfmseg::kernels
