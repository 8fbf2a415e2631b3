// SPDX-License-Identifier: Apache-2.0
//
// AVX2+FMA variants of the hot kernels. This translation unit is compiled
// with -mavx2 -mfma on x86-64 only; callers go through the runtime-dispatched
// table in dispatch.cpp. Accumulation order matches the scalar backend except
// for FMA rounding and the gemm_nt/vdot horizontal reductions, which use
// four-lane partial sums.

#include "vfmseg/kernels/kernels.hpp"

#if defined(__AVX2__) && defined(__FMA__)

#include <immintrin.h>

#include <cmath>
#include <cstring>

namespace vfmseg::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

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
    int p = 0;
    // Two k-steps per pass keeps both FMA ports busy.
    for (; p + 1 < k; p += 2) {
      const double a0 = alpha * arow[p];
      const double a1 = alpha * arow[p + 1];
      const double* b0 = b + static_cast<std::size_t>(p) * ldb;
      const double* b1 = b0 + ldb;
      const __m256d va0 = _mm256_set1_pd(a0);
      const __m256d va1 = _mm256_set1_pd(a1);
      int j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(crow + j);
        vc = _mm256_fmadd_pd(va0, _mm256_loadu_pd(b0 + j), vc);
        vc = _mm256_fmadd_pd(va1, _mm256_loadu_pd(b1 + j), vc);
        _mm256_storeu_pd(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += a0 * b0[j] + a1 * b1[j];
    }
    for (; p < k; ++p) {
      const double a0 = alpha * arow[p];
      const double* b0 = b + static_cast<std::size_t>(p) * ldb;
      const __m256d va0 = _mm256_set1_pd(a0);
      int j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(crow + j);
        vc = _mm256_fmadd_pd(va0, _mm256_loadu_pd(b0 + j), vc);
        _mm256_storeu_pd(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += a0 * b0[j];
    }
  }
}

inline double dot_avx(const double* x, const double* y, std::size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i),
                           acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4),
                           _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i),
                           acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += x[i] * y[i];
  return acc;
}

void gemm_nt(int m, int n, int k, double alpha, const double* a, int lda,
             const double* b, int ldb, double beta, double* c, int ldc) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * lda;
    double* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * ldb;
      const double acc = dot_avx(arow, brow, static_cast<std::size_t>(k));
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
      const __m256d va = _mm256_set1_pd(api);
      int j = 0;
      for (; j + 4 <= n; j += 4) {
        __m256d vc = _mm256_loadu_pd(crow + j);
        vc = _mm256_fmadd_pd(va, _mm256_loadu_pd(brow + j), vc);
        _mm256_storeu_pd(crow + j, vc);
      }
      for (; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

void vadd(double* y, const double* x, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i,
                     _mm256_add_pd(_mm256_loadu_pd(y + i),
                                   _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] += x[i];
}

void vaxpby(double* y, double a, const double* x, double b, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  const __m256d vb = _mm256_set1_pd(b);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d by = _mm256_mul_pd(vb, _mm256_loadu_pd(y + i));
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), by));
  }
  for (; i < n; ++i) y[i] = a * x[i] + b * y[i];
}

void vscale(double* y, double a, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_mul_pd(va, _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] *= a;
}

void vaxpy(double* y, double a, const double* x, std::size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy));
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

double vdot(const double* x, const double* y, std::size_t n) {
  return dot_avx(x, y, n);
}

double vsum(const double* x, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

double vsqdiff(const double* x, const double* y, std::size_t n) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d d =
        _mm256_sub_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i));
    acc = _mm256_fmadd_pd(d, d, acc);
  }
  double s = hsum(acc);
  for (; i < n; ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return s;
}

void relu(double* y, const double* x, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_max_pd(zero, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
}

void relu_grad(double* dx, const double* x, const double* dy, std::size_t n) {
  const __m256d zero = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mask = _mm256_cmp_pd(_mm256_loadu_pd(x + i), zero, _CMP_GT_OQ);
    const __m256d add = _mm256_and_pd(mask, _mm256_loadu_pd(dy + i));
    _mm256_storeu_pd(dx + i, _mm256_add_pd(_mm256_loadu_pd(dx + i), add));
  }
  for (; i < n; ++i) {
    if (x[i] > 0.0) dx[i] += dy[i];
  }
}

void ema(double* t, const double* s, double momentum, std::size_t n) {
  const __m256d vm = _mm256_set1_pd(momentum);
  const __m256d vw = _mm256_set1_pd(1.0 - momentum);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d mt = _mm256_mul_pd(vm, _mm256_loadu_pd(t + i));
    _mm256_storeu_pd(t + i, _mm256_fmadd_pd(vw, _mm256_loadu_pd(s + i), mt));
  }
  const double w = 1.0 - momentum;
  for (; i < n; ++i) t[i] = momentum * t[i] + w * s[i];
}

void adamw(double* p, double* m, double* v, const double* g, std::size_t n,
           double lr, double beta1, double beta2, double eps, double wd,
           double bc1, double bc2) {
  const __m256d vb1 = _mm256_set1_pd(beta1);
  const __m256d vb2 = _mm256_set1_pd(beta2);
  const __m256d vo1 = _mm256_set1_pd(1.0 - beta1);
  const __m256d vo2 = _mm256_set1_pd(1.0 - beta2);
  const __m256d vbc1 = _mm256_set1_pd(1.0 / bc1);
  const __m256d vbc2 = _mm256_set1_pd(1.0 / bc2);
  const __m256d veps = _mm256_set1_pd(eps);
  const __m256d vlr = _mm256_set1_pd(lr);
  const __m256d vwd = _mm256_set1_pd(wd);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d vg = _mm256_loadu_pd(g + i);
    __m256d vm = _mm256_fmadd_pd(vo1, vg, _mm256_mul_pd(vb1, _mm256_loadu_pd(m + i)));
    __m256d vv = _mm256_fmadd_pd(vo2, _mm256_mul_pd(vg, vg),
                                 _mm256_mul_pd(vb2, _mm256_loadu_pd(v + i)));
    _mm256_storeu_pd(m + i, vm);
    _mm256_storeu_pd(v + i, vv);
    const __m256d mhat = _mm256_mul_pd(vm, vbc1);
    const __m256d vhat = _mm256_mul_pd(vv, vbc2);
    const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(vhat), veps);
    const __m256d vp = _mm256_loadu_pd(p + i);
    const __m256d update =
        _mm256_fmadd_pd(vwd, vp, _mm256_div_pd(mhat, denom));
    _mm256_storeu_pd(p + i, _mm256_fnmadd_pd(vlr, update, vp));
  }
  const double om1 = 1.0 - beta1;
  const double om2 = 1.0 - beta2;
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + om1 * g[i];
    v[i] = beta2 * v[i] + om2 * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
  }
}

}  // namespace

const Backend* avx2_backend_impl() {
  static const Backend backend{
      "avx2", gemm_nn, gemm_nt, gemm_tn, vadd,      vaxpby, vscale,
      vaxpy,  vdot,    vsum,    vsqdiff, relu,      relu_grad,
      ema,    adamw,
  };
  return &backend;
}

}  // namespace vfmseg::kernels

#else  // !(__AVX2__ && __FMA__)

namespace vfmseg::kernels {
const Backend* avx2_backend_impl() { return nullptr; }
}  // namespace vfmseg::kernels

#endif
