// SPDX-License-Identifier: Apache-2.0
//
// Autograd ops. Forward paths call into the dispatched kernel backend;
// each op wires a backward closure onto the output tensor when autograd is
// enabled and some input requires grad. Gradient accumulation is guarded per
// input so tensors that do not require grad never allocate a grad buffer.

#include "vfmseg/core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "vfmseg/core/error.hpp"
#include "vfmseg/kernels/kernels.hpp"

namespace vfmseg::ops {

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

const kernels::Backend& K() { return kernels::active(); }

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

void wire(Tensor& out, std::initializer_list<const Tensor*> inputs,
          std::function<void(const TensorImpl&)> fn) {
  if (!autograd_enabled() || !any_requires_grad(inputs)) return;
  auto impl = out.impl();
  impl->requires_grad = true;
  impl->is_leaf = false;
  for (const Tensor* t : inputs) {
    if (t->defined()) impl->parents.push_back(t->impl());
  }
  impl->backward_fn = std::move(fn);
}

// dst.grad += g
void accum(const ImplPtr& dst, const double* g, std::size_t n) {
  if (!dst->requires_grad) return;
  K().vadd(detail::ensure_grad(*dst).data(), g, n);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ContractViolation(std::string(op) + ": shape mismatch " +
                            shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor y = a.clone();
  const auto n = static_cast<std::size_t>(y.numel());
  K().vadd(y.data(), b.data(), n);
  wire(y, {&a, &b}, [ai = a.impl(), bi = b.impl(), n](const TensorImpl& self) {
    accum(ai, self.grad->data(), n);
    accum(bi, self.grad->data(), n);
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor y = a.clone();
  const auto n = static_cast<std::size_t>(y.numel());
  K().vaxpy(y.data(), -1.0, b.data(), n);
  wire(y, {&a, &b}, [ai = a.impl(), bi = b.impl(), n](const TensorImpl& self) {
    accum(ai, self.grad->data(), n);
    if (bi->requires_grad) {
      K().vaxpy(detail::ensure_grad(*bi).data(), -1.0, self.grad->data(), n);
    }
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor y = Tensor::zeros(a.shape());
  const auto n = static_cast<std::size_t>(y.numel());
  const double* ad = a.data();
  const double* bd = b.data();
  double* yd = y.data();
  for (std::size_t i = 0; i < n; ++i) yd[i] = ad[i] * bd[i];
  wire(y, {&a, &b}, [ai = a.impl(), bi = b.impl(), n](const TensorImpl& self) {
    const double* g = self.grad->data();
    if (ai->requires_grad) {
      double* da = detail::ensure_grad(*ai).data();
      const double* bd2 = bi->data->data();
      for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bd2[i];
    }
    if (bi->requires_grad) {
      double* db = detail::ensure_grad(*bi).data();
      const double* ad2 = ai->data->data();
      for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * ad2[i];
    }
  });
  return y;
}

Tensor scale(const Tensor& x, double s) {
  Tensor y = x.clone();
  const auto n = static_cast<std::size_t>(y.numel());
  K().vscale(y.data(), s, n);
  wire(y, {&x}, [xi = x.impl(), s, n](const TensorImpl& self) {
    if (xi->requires_grad) {
      K().vaxpy(detail::ensure_grad(*xi).data(), s, self.grad->data(), n);
    }
  });
  return y;
}

Tensor add_scalar(const Tensor& x, double s) {
  Tensor y = x.clone();
  for (auto& v : y.vec()) v += s;
  const auto n = static_cast<std::size_t>(y.numel());
  wire(y, {&x}, [xi = x.impl(), n](const TensorImpl& self) {
    accum(xi, self.grad->data(), n);
  });
  return y;
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  const std::int64_t d = x.dim(-1);
  if (b.numel() != d) {
    throw ContractViolation("add_rowvec: vector length mismatch");
  }
  Tensor y = x.clone();
  const std::int64_t rows = x.numel() / d;
  double* yd = y.data();
  const double* bd = b.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    K().vadd(yd + r * d, bd, static_cast<std::size_t>(d));
  }
  wire(y, {&x, &b},
       [xi = x.impl(), bi = b.impl(), rows, d](const TensorImpl& self) {
         const double* g = self.grad->data();
         accum(xi, g, static_cast<std::size_t>(rows * d));
         if (bi->requires_grad) {
           double* db = detail::ensure_grad(*bi).data();
           for (std::int64_t r = 0; r < rows; ++r) {
             K().vadd(db, g + r * d, static_cast<std::size_t>(d));
           }
         }
       });
  return y;
}

Tensor add_broadcast_batch(const Tensor& x, const Tensor& p) {
  const std::int64_t batch = x.dim(0);
  const std::int64_t inner = x.numel() / batch;
  if (p.numel() != inner) {
    throw ContractViolation("add_broadcast_batch: inner size mismatch");
  }
  Tensor y = x.clone();
  double* yd = y.data();
  const double* pd = p.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    K().vadd(yd + b * inner, pd, static_cast<std::size_t>(inner));
  }
  wire(y, {&x, &p},
       [xi = x.impl(), pi = p.impl(), batch, inner](const TensorImpl& self) {
         const double* g = self.grad->data();
         accum(xi, g, static_cast<std::size_t>(batch * inner));
         if (pi->requires_grad) {
           double* dp = detail::ensure_grad(*pi).data();
           for (std::int64_t b = 0; b < batch; ++b) {
             K().vadd(dp, g + b * inner, static_cast<std::size_t>(inner));
           }
         }
       });
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ContractViolation("reshape: numel mismatch " + shape_str(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = x.impl()->data;  // zero-copy alias
  Tensor y(std::move(impl));
  const auto n = static_cast<std::size_t>(x.numel());
  wire(y, {&x}, [xi = x.impl(), n](const TensorImpl& self) {
    accum(xi, self.grad->data(), n);
  });
  return y;
}

namespace {

std::vector<std::int64_t> contiguous_strides(const Shape& shape) {
  std::vector<std::int64_t> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

// out[i0',i1',...] = in[perm applied]; returns mapping out_linear -> in_linear
// applied on the fly for both forward and backward.
void permute_copy(const double* src, double* dst, const Shape& in_shape,
                  const std::vector<int>& perm, bool invert) {
  const int nd = static_cast<int>(in_shape.size());
  Shape out_shape(nd);
  for (int i = 0; i < nd; ++i)
    out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
  const auto in_strides = contiguous_strides(in_shape);
  const auto out_strides = contiguous_strides(out_shape);
  const std::int64_t n = shape_numel(in_shape);
  // Walk the output linearly; decode to output coords; map to input offset.
  std::vector<std::int64_t> coord(nd, 0);
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t rem = o;
    std::int64_t in_off = 0;
    for (int i = 0; i < nd; ++i) {
      const std::int64_t c = rem / out_strides[i];
      rem -= c * out_strides[i];
      in_off += c * in_strides[static_cast<std::size_t>(perm[i])];
    }
    if (invert) {
      dst[in_off] += src[o];
    } else {
      dst[o] = src[in_off];
    }
  }
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
  const int nd = x.ndim();
  if (static_cast<int>(perm.size()) != nd) {
    throw ContractViolation("permute: rank mismatch");
  }
  Shape out_shape(static_cast<std::size_t>(nd));
  for (int i = 0; i < nd; ++i) {
    out_shape[static_cast<std::size_t>(i)] =
        x.shape()[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  }
  Tensor y = Tensor::zeros(out_shape);
  permute_copy(x.data(), y.data(), x.shape(), perm, false);
  wire(y, {&x}, [xi = x.impl(), perm](const TensorImpl& self) {
    if (!xi->requires_grad) return;
    permute_copy(self.grad->data(), detail::ensure_grad(*xi).data(), xi->shape,
                 perm, true);
  });
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const std::int64_t k = x.dim(-1);
  if (w.ndim() != 2 || w.dim(0) != k) {
    throw ContractViolation("linear: weight shape " + shape_str(w.shape()) +
                            " incompatible with input " +
                            shape_str(x.shape()));
  }
  const std::int64_t n = w.dim(1);
  const std::int64_t m = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = n;
  Tensor y = Tensor::zeros(out_shape);
  K().gemm_nn(static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              1.0, x.data(), static_cast<int>(k), w.data(),
              static_cast<int>(n), 0.0, y.data(), static_cast<int>(n));
  if (bias.defined()) {
    if (bias.numel() != n) throw ContractViolation("linear: bias size");
    double* yd = y.data();
    const double* bd = bias.data();
    for (std::int64_t r = 0; r < m; ++r) {
      K().vadd(yd + r * n, bd, static_cast<std::size_t>(n));
    }
  }
  wire(y, {&x, &w, &bias},
       [xi = x.impl(), wi = w.impl(),
        bi = bias.defined() ? bias.impl() : nullptr, m, n,
        k](const TensorImpl& self) {
         const double* g = self.grad->data();
         if (xi->requires_grad) {
           K().gemm_nt(static_cast<int>(m), static_cast<int>(k),
                       static_cast<int>(n), 1.0, g, static_cast<int>(n),
                       wi->data->data(), static_cast<int>(n), 1.0,
                       detail::ensure_grad(*xi).data(), static_cast<int>(k));
         }
         if (wi->requires_grad) {
           K().gemm_tn(static_cast<int>(k), static_cast<int>(n),
                       static_cast<int>(m), 1.0, xi->data->data(),
                       static_cast<int>(k), g, static_cast<int>(n), 1.0,
                       detail::ensure_grad(*wi).data(), static_cast<int>(n));
         }
         if (bi && bi->requires_grad) {
           double* db = detail::ensure_grad(*bi).data();
           for (std::int64_t r = 0; r < m; ++r) {
             K().vadd(db, g + r * n, static_cast<std::size_t>(n));
           }
         }
       });
  return y;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0)) {
    throw ContractViolation("bmm: expects [B,M,K]x[B,K,N]");
  }
  const std::int64_t batch = a.dim(0);
  const std::int64_t m = a.dim(1);
  const std::int64_t kk = a.dim(2);
  const std::int64_t n = trans_b ? b.dim(1) : b.dim(2);
  if ((trans_b ? b.dim(2) : b.dim(1)) != kk) {
    throw ContractViolation("bmm: inner dim mismatch");
  }
  Tensor y = Tensor::zeros({batch, m, n});
  const std::int64_t a_sz = m * kk, b_sz = b.dim(1) * b.dim(2), y_sz = m * n;
  for (std::int64_t i = 0; i < batch; ++i) {
    const double* ap = a.data() + i * a_sz;
    const double* bp = b.data() + i * b_sz;
    double* yp = y.data() + i * y_sz;
    if (trans_b) {
      K().gemm_nt(static_cast<int>(m), static_cast<int>(n),
                  static_cast<int>(kk), 1.0, ap, static_cast<int>(kk), bp,
                  static_cast<int>(kk), 0.0, yp, static_cast<int>(n));
    } else {
      K().gemm_nn(static_cast<int>(m), static_cast<int>(n),
                  static_cast<int>(kk), 1.0, ap, static_cast<int>(kk), bp,
                  static_cast<int>(n), 0.0, yp, static_cast<int>(n));
    }
  }
  wire(y, {&a, &b},
       [ai = a.impl(), bi = b.impl(), batch, m, n, kk, a_sz, b_sz, y_sz,
        trans_b](const TensorImpl& self) {
         const double* g = self.grad->data();
         for (std::int64_t i = 0; i < batch; ++i) {
           const double* gp = g + i * y_sz;
           const double* ap = ai->data->data() + i * a_sz;
           const double* bp = bi->data->data() + i * b_sz;
           if (ai->requires_grad) {
             double* da = detail::ensure_grad(*ai).data() + i * a_sz;
             if (trans_b) {
               // y = a b^T: da += g b
               K().gemm_nn(static_cast<int>(m), static_cast<int>(kk),
                           static_cast<int>(n), 1.0, gp, static_cast<int>(n),
                           bp, static_cast<int>(kk), 1.0, da,
                           static_cast<int>(kk));
             } else {
               // da += g b^T
               K().gemm_nt(static_cast<int>(m), static_cast<int>(kk),
                           static_cast<int>(n), 1.0, gp, static_cast<int>(n),
                           bp, static_cast<int>(n), 1.0, da,
                           static_cast<int>(kk));
             }
           }
           if (bi->requires_grad) {
             double* db = detail::ensure_grad(*bi).data() + i * b_sz;
             if (trans_b) {
               // db += g^T a  ([N,M]x[M,K])
               K().gemm_tn(static_cast<int>(n), static_cast<int>(kk),
                           static_cast<int>(m), 1.0, gp, static_cast<int>(n),
                           ap, static_cast<int>(kk), 1.0, db,
                           static_cast<int>(kk));
             } else {
               // db += a^T g
               K().gemm_tn(static_cast<int>(kk), static_cast<int>(n),
                           static_cast<int>(m), 1.0, ap, static_cast<int>(kk),
                           gp, static_cast<int>(n), 1.0, db,
                           static_cast<int>(n));
             }
           }
         }
       });
  return y;
}

Tensor relu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto n = static_cast<std::size_t>(x.numel());
  K().relu(y.data(), x.data(), n);
  wire(y, {&x}, [xi = x.impl(), n](const TensorImpl& self) {
    if (!xi->requires_grad) return;
    K().relu_grad(detail::ensure_grad(*xi).data(), xi->data->data(),
                  self.grad->data(), n);
  });
  return y;
}

Tensor gelu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto n = static_cast<std::size_t>(x.numel());
  const double* xd = x.data();
  double* yd = y.data();
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (std::size_t i = 0; i < n; ++i) {
    yd[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * inv_sqrt2));
  }
  wire(y, {&x}, [xi = x.impl(), n](const TensorImpl& self) {
    if (!xi->requires_grad) return;
    double* dx = detail::ensure_grad(*xi).data();
    const double* xd2 = xi->data->data();
    const double* g = self.grad->data();
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    for (std::size_t i = 0; i < n; ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xd2[i] * 0.7071067811865475244));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd2[i] * xd2[i]);
      dx[i] += g[i] * (cdf + xd2[i] * pdf);
    }
  });
  return y;
}

Tensor tanh_op(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto n = static_cast<std::size_t>(x.numel());
  const double* xd = x.data();
  double* yd = y.data();
  for (std::size_t i = 0; i < n; ++i) yd[i] = std::tanh(xd[i]);
  wire(y, {&x}, [xi = x.impl(), yi = y.impl(), n](const TensorImpl& self) {
    if (!xi->requires_grad) return;
    double* dx = detail::ensure_grad(*xi).data();
    const double* yd2 = yi->data->data();
    const double* g = self.grad->data();
    for (std::size_t i = 0; i < n; ++i) dx[i] += g[i] * (1.0 - yd2[i] * yd2[i]);
  });
  return y;
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  Tensor y = Tensor::zeros(x.shape());
  raw::softmax_rows(x.data(), y.data(), rows, d);
  wire(y, {&x}, [xi = x.impl(), yi = y.impl(), rows, d](const TensorImpl& self) {
    if (!xi->requires_grad) return;
    double* dx = detail::ensure_grad(*xi).data();
    const double* yd = yi->data->data();
    const double* g = self.grad->data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yr = yd + r * d;
      const double* gr = g + r * d;
      double dot = 0.0;
      for (std::int64_t j = 0; j < d; ++j) dot += gr[j] * yr[j];
      double* dr = dx + r * d;
      for (std::int64_t j = 0; j < d; ++j) dr[j] += yr[j] * (gr[j] - dot);
    }
  });
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::int64_t d = x.dim(-1);
  if (gamma.numel() != d || beta.numel() != d) {
    throw ContractViolation("layer_norm: affine param size mismatch");
  }
  const std::int64_t rows = x.numel() / d;
  Tensor y = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(x.numel()));
  auto rstd = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(rows));
  const double* xd = x.data();
  const double* gd = gamma.data();
  const double* bd = beta.data();
  double* yd = y.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * d;
    double mu = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[static_cast<std::size_t>(r)] = rs;
    double* xh = xhat->data() + r * d;
    double* yr = yd + r * d;
    for (std::int64_t j = 0; j < d; ++j) {
      xh[j] = (xr[j] - mu) * rs;
      yr[j] = xh[j] * gd[j] + bd[j];
    }
  }
  wire(y, {&x, &gamma, &beta},
       [xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), xhat, rstd, rows,
        d](const TensorImpl& self) {
         const double* g = self.grad->data();
         const double* gw = gi->data->data();
         if (gi->requires_grad) {
           double* dg = detail::ensure_grad(*gi).data();
           for (std::int64_t r = 0; r < rows; ++r) {
             const double* gr = g + r * d;
             const double* xh = xhat->data() + r * d;
             for (std::int64_t j = 0; j < d; ++j) dg[j] += gr[j] * xh[j];
           }
         }
         if (bi->requires_grad) {
           double* db = detail::ensure_grad(*bi).data();
           for (std::int64_t r = 0; r < rows; ++r) {
             const double* gr = g + r * d;
             for (std::int64_t j = 0; j < d; ++j) db[j] += gr[j];
           }
         }
         if (xi->requires_grad) {
           double* dx = detail::ensure_grad(*xi).data();
           const double inv_d = 1.0 / static_cast<double>(d);
           for (std::int64_t r = 0; r < rows; ++r) {
             const double* gr = g + r * d;
             const double* xh = xhat->data() + r * d;
             const double rs = (*rstd)[static_cast<std::size_t>(r)];
             double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
             for (std::int64_t j = 0; j < d; ++j) {
               const double dxh = gr[j] * gw[j];
               mean_dxhat += dxh;
               mean_dxhat_xhat += dxh * xh[j];
             }
             mean_dxhat *= inv_d;
             mean_dxhat_xhat *= inv_d;
             double* dr = dx + r * d;
             for (std::int64_t j = 0; j < d; ++j) {
               const double dxh = gr[j] * gw[j];
               dr[j] += rs * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
             }
           }
         }
       });
  return y;
}

Tensor sum_all(const Tensor& x) {
  Tensor y = Tensor::scalar(K().vsum(x.data(), static_cast<std::size_t>(x.numel())));
  const auto n = static_cast<std::size_t>(x.numel());
  wire(y, {&x}, [xi = x.impl(), n](const TensorImpl& self) {
    if (!xi->requires_grad) return;
    const double g = self.grad->front();
    double* dx = detail::ensure_grad(*xi).data();
    for (std::size_t i = 0; i < n; ++i) dx[i] += g;
  });
  return y;
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor masked_cross_entropy(const Tensor& logits,
                            std::span<const std::int32_t> labels,
                            std::span<const std::uint8_t> mask, double denom) {
  if (logits.ndim() != 2) {
    throw ContractViolation("masked_cross_entropy: logits must be [P,C]");
  }
  const std::int64_t p = logits.dim(0);
  const std::int64_t c = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != p ||
      (!mask.empty() && static_cast<std::int64_t>(mask.size()) != p)) {
    throw ContractViolation("masked_cross_entropy: label/mask length");
  }
  if (denom <= 0.0) {
    throw ContractViolation("masked_cross_entropy: denom must be positive");
  }
  const double* ld = logits.data();
  // Keep softmax probabilities of active rows for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(p * c), 0.0);
  double total = 0.0;
  for (std::int64_t i = 0; i < p; ++i) {
    if (!mask.empty() && mask[static_cast<std::size_t>(i)] == 0) continue;
    const std::int32_t y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= c) {
      throw ContractViolation("masked_cross_entropy: label id " +
                              std::to_string(y) + " out of range");
    }
    const double* row = ld + i * c;
    double mx = row[0];
    for (std::int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    double* pr = probs->data() + i * c;
    for (std::int64_t j = 0; j < c; ++j) {
      pr[j] = std::exp(row[j] - mx);
      sum += pr[j];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < c; ++j) pr[j] *= inv;
    total += std::log(sum) + mx - row[y];
  }
  Tensor loss = Tensor::scalar(total / denom);
  std::vector<std::int32_t> labels_copy(labels.begin(), labels.end());
  std::vector<std::uint8_t> mask_copy(mask.begin(), mask.end());
  wire(loss, {&logits},
       [li = logits.impl(), probs, labels_copy = std::move(labels_copy),
        mask_copy = std::move(mask_copy), p, c, denom](const TensorImpl& self) {
         if (!li->requires_grad) return;
         const double up = self.grad->front() / denom;
         double* dl = detail::ensure_grad(*li).data();
         for (std::int64_t i = 0; i < p; ++i) {
           if (!mask_copy.empty() && mask_copy[static_cast<std::size_t>(i)] == 0)
             continue;
           const double* pr = probs->data() + i * c;
           double* dr = dl + i * c;
           const std::int32_t y = labels_copy[static_cast<std::size_t>(i)];
           for (std::int64_t j = 0; j < c; ++j) {
             dr[j] += up * (pr[j] - (j == y ? 1.0 : 0.0));
           }
         }
       });
  return loss;
}

Tensor mse_token_mean(const Tensor& pred, const Tensor& target) {
  check_same_shape(pred, target, "mse_token_mean");
  if (target.requires_grad()) {
    throw ContractViolation("mse_token_mean: target must be detached");
  }
  const std::int64_t d = pred.dim(-1);
  const std::int64_t tokens = pred.numel() / d;
  const double sq = K().vsqdiff(pred.data(), target.data(),
                                static_cast<std::size_t>(pred.numel()));
  Tensor loss = Tensor::scalar(sq / static_cast<double>(tokens));
  wire(loss, {&pred, &target},
       [pi = pred.impl(), ti = target.impl(), tokens](const TensorImpl& self) {
         if (!pi->requires_grad) return;
         const double up =
             self.grad->front() * 2.0 / static_cast<double>(tokens);
         double* dp = detail::ensure_grad(*pi).data();
         const double* pd = pi->data->data();
         const double* td = ti->data->data();
         const std::size_t n = pi->data->size();
         for (std::size_t i = 0; i < n; ++i) dp[i] += up * (pd[i] - td[i]);
       });
  return loss;
}

namespace {

void im2col(const double* x, int c, int h, int w, int kh, int kw, int pad,
            double* col) {
  const int oh = h + 2 * pad - kh + 1;
  const int ow = w + 2 * pad - kw + 1;
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        double* dst = col + ((static_cast<std::size_t>(ch) * kh + ki) * kw + kj) *
                                (static_cast<std::size_t>(oh) * ow);
        for (int i = 0; i < oh; ++i) {
          const int si = i + ki - pad;
          for (int j = 0; j < ow; ++j) {
            const int sj = j + kj - pad;
            dst[static_cast<std::size_t>(i) * ow + j] =
                (si >= 0 && si < h && sj >= 0 && sj < w)
                    ? x[(static_cast<std::size_t>(ch) * h + si) * w + sj]
                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, int c, int h, int w, int kh, int kw,
                int pad, double* dx) {
  const int oh = h + 2 * pad - kh + 1;
  const int ow = w + 2 * pad - kw + 1;
  for (int ch = 0; ch < c; ++ch) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const double* src =
            col + ((static_cast<std::size_t>(ch) * kh + ki) * kw + kj) *
                      (static_cast<std::size_t>(oh) * ow);
        for (int i = 0; i < oh; ++i) {
          const int si = i + ki - pad;
          if (si < 0 || si >= h) continue;
          for (int j = 0; j < ow; ++j) {
            const int sj = j + kj - pad;
            if (sj < 0 || sj >= w) continue;
            dx[(static_cast<std::size_t>(ch) * h + si) * w + sj] +=
                src[static_cast<std::size_t>(i) * ow + j];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4 || x.dim(1) != w.dim(1)) {
    throw ContractViolation("conv2d: expects x [B,C,H,W], w [O,C,kh,kw]");
  }
  const int b = static_cast<int>(x.dim(0));
  const int c = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2));
  const int ww = static_cast<int>(x.dim(3));
  const int o = static_cast<int>(w.dim(0));
  const int kh = static_cast<int>(w.dim(2));
  const int kw = static_cast<int>(w.dim(3));
  const int oh = h + 2 * pad - kh + 1;
  const int ow = ww + 2 * pad - kw + 1;
  if (oh <= 0 || ow <= 0) throw ContractViolation("conv2d: kernel too large");
  const int ck = c * kh * kw;
  const int hw = oh * ow;
  Tensor y = Tensor::zeros({b, o, oh, ow});
  std::vector<double> col(static_cast<std::size_t>(ck) * hw);
  const std::size_t x_sz = static_cast<std::size_t>(c) * h * ww;
  const std::size_t y_sz = static_cast<std::size_t>(o) * hw;
  for (int i = 0; i < b; ++i) {
    im2col(x.data() + i * x_sz, c, h, ww, kh, kw, pad, col.data());
    double* yp = y.data() + i * y_sz;
    K().gemm_nn(o, hw, ck, 1.0, w.data(), ck, col.data(), hw, 0.0, yp, hw);
    if (bias.defined()) {
      const double* bd = bias.data();
      for (int ch = 0; ch < o; ++ch) {
        double* row = yp + static_cast<std::size_t>(ch) * hw;
        const double bv = bd[ch];
        for (int j = 0; j < hw; ++j) row[j] += bv;
      }
    }
  }
  wire(y, {&x, &w, &bias},
       [xi = x.impl(), wi = w.impl(),
        bi = bias.defined() ? bias.impl() : nullptr, b, c, h, ww, o, kh, kw,
        pad, ck, hw, x_sz, y_sz](const TensorImpl& self) {
         // col is recomputed from the saved input to keep activations small.
         std::vector<double> col(static_cast<std::size_t>(ck) * hw);
         std::vector<double> dcol;
         const double* g = self.grad->data();
         for (int i = 0; i < b; ++i) {
           const double* gp = g + i * y_sz;
           if (wi->requires_grad || xi->requires_grad) {
             im2col(xi->data->data() + i * x_sz, c, h, ww, kh, kw, pad,
                    col.data());
           }
           if (wi->requires_grad) {
             K().gemm_nt(o, ck, hw, 1.0, gp, hw, col.data(), hw, 1.0,
                         detail::ensure_grad(*wi).data(), ck);
           }
           if (xi->requires_grad) {
             dcol.assign(static_cast<std::size_t>(ck) * hw, 0.0);
             K().gemm_tn(ck, hw, o, 1.0, wi->data->data(), ck, gp, hw, 0.0,
                         dcol.data(), hw);
             col2im_add(dcol.data(), c, h, ww, kh, kw, pad,
                        detail::ensure_grad(*xi).data() + i * x_sz);
           }
           if (bi && bi->requires_grad) {
             double* db = detail::ensure_grad(*bi).data();
             for (int ch = 0; ch < o; ++ch) {
               db[ch] += K().vsum(gp + static_cast<std::size_t>(ch) * hw,
                                  static_cast<std::size_t>(hw));
             }
           }
         }
       });
  return y;
}

Tensor conv_transpose2d_k2s2(const Tensor& x, const Tensor& w,
                             const Tensor& bias) {
  if (x.ndim() != 4 || w.ndim() != 4 || w.dim(2) != 2 || w.dim(3) != 2 ||
      x.dim(1) != w.dim(0)) {
    throw ContractViolation(
        "conv_transpose2d_k2s2: expects x [B,C,H,W], w [C,O,2,2]");
  }
  const int b = static_cast<int>(x.dim(0));
  const int c = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2));
  const int ww = static_cast<int>(x.dim(3));
  const int o = static_cast<int>(w.dim(1));
  const int hw = h * ww;
  const int o4 = o * 4;
  Tensor y = Tensor::zeros({b, o, 2 * h, 2 * ww});
  // w [C,O,2,2] viewed as [C, O*4]; y4 = w^T x.
  std::vector<double> y4(static_cast<std::size_t>(o4) * hw);
  const std::size_t x_sz = static_cast<std::size_t>(c) * hw;
  const std::size_t y_sz = static_cast<std::size_t>(o) * 4 * hw;
  for (int i = 0; i < b; ++i) {
    K().gemm_tn(o4, hw, c, 1.0, w.data(), o4, x.data() + i * x_sz, hw, 0.0,
                y4.data(), hw);
    double* yp = y.data() + i * y_sz;
    const double* bd = bias.defined() ? bias.data() : nullptr;
    for (int ch = 0; ch < o; ++ch) {
      const double bv = bd ? bd[ch] : 0.0;
      for (int di = 0; di < 2; ++di) {
        for (int dj = 0; dj < 2; ++dj) {
          const double* src =
              y4.data() +
              ((static_cast<std::size_t>(ch) * 2 + di) * 2 + dj) *
                  static_cast<std::size_t>(hw);
          for (int r = 0; r < h; ++r) {
            double* dst = yp + ((static_cast<std::size_t>(ch) * 2 * h) +
                                (2 * r + di)) *
                                   (2 * ww) +
                          dj;
            const double* sr = src + static_cast<std::size_t>(r) * ww;
            for (int q = 0; q < ww; ++q) dst[2 * q] = sr[q] + bv;
          }
        }
      }
    }
  }
  wire(y, {&x, &w, &bias},
       [xi = x.impl(), wi = w.impl(),
        bi = bias.defined() ? bias.impl() : nullptr, b, c, h, ww, o, hw, o4,
        x_sz, y_sz](const TensorImpl& self) {
         std::vector<double> g4(static_cast<std::size_t>(o4) * hw);
         const double* g = self.grad->data();
         for (int i = 0; i < b; ++i) {
           const double* gp = g + i * y_sz;
           // Gather dy into the [O*4, HW] layout.
           for (int ch = 0; ch < o; ++ch) {
             for (int di = 0; di < 2; ++di) {
               for (int dj = 0; dj < 2; ++dj) {
                 double* dst = g4.data() +
                               ((static_cast<std::size_t>(ch) * 2 + di) * 2 +
                                dj) *
                                   static_cast<std::size_t>(hw);
                 for (int r = 0; r < h; ++r) {
                   const double* sr = gp +
                                      ((static_cast<std::size_t>(ch) * 2 * h) +
                                       (2 * r + di)) *
                                          (2 * ww) +
                                      dj;
                   double* dr = dst + static_cast<std::size_t>(r) * ww;
                   for (int q = 0; q < ww; ++q) dr[q] = sr[2 * q];
                 }
               }
             }
           }
           if (xi->requires_grad) {
             K().gemm_nn(c, hw, o4, 1.0, wi->data->data(), o4, g4.data(), hw,
                         1.0, detail::ensure_grad(*xi).data() + i * x_sz, hw);
           }
           if (wi->requires_grad) {
             K().gemm_nt(c, o4, hw, 1.0, xi->data->data() + i * x_sz, hw,
                         g4.data(), hw, 1.0, detail::ensure_grad(*wi).data(),
                         o4);
           }
           if (bi && bi->requires_grad) {
             double* db = detail::ensure_grad(*bi).data();
             for (int ch = 0; ch < o; ++ch) {
               db[ch] += K().vsum(
                   g4.data() + static_cast<std::size_t>(ch) * 4 * hw,
                   static_cast<std::size_t>(4) * hw);
             }
           }
         }
       });
  return y;
}

namespace {

struct Lerp {
  int lo, hi;
  double w_hi;  // weight of hi sample; lo gets (1 - w_hi)
};

std::vector<Lerp> lerp_axis(int in, int out, bool align_corners) {
  std::vector<Lerp> table(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    double src;
    if (align_corners) {
      src = out > 1 ? static_cast<double>(i) * (in - 1) / (out - 1) : 0.0;
    } else {
      src = (static_cast<double>(i) + 0.5) * in / out - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    }
    const int lo = static_cast<int>(std::floor(src));
    const int hi = std::min(lo + 1, in - 1);
    table[static_cast<std::size_t>(i)] = {lo, hi, src - lo};
  }
  return table;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w,
                         bool align_corners) {
  if (x.ndim() != 4) {
    throw ContractViolation("upsample_bilinear: expects [B,C,H,W]");
  }
  const int b = static_cast<int>(x.dim(0));
  const int c = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2));
  const int w = static_cast<int>(x.dim(3));
  const auto rows = lerp_axis(h, out_h, align_corners);
  const auto cols = lerp_axis(w, out_w, align_corners);
  Tensor y = Tensor::zeros({b, c, out_h, out_w});
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  const double* xd = x.data();
  double* yd = y.data();
  for (int p = 0; p < b * c; ++p) {
    const double* src = xd + p * in_plane;
    double* dst = yd + p * out_plane;
    for (int i = 0; i < out_h; ++i) {
      const Lerp& ri = rows[static_cast<std::size_t>(i)];
      const double* r0 = src + static_cast<std::size_t>(ri.lo) * w;
      const double* r1 = src + static_cast<std::size_t>(ri.hi) * w;
      for (int j = 0; j < out_w; ++j) {
        const Lerp& cj = cols[static_cast<std::size_t>(j)];
        const double top = r0[cj.lo] * (1.0 - cj.w_hi) + r0[cj.hi] * cj.w_hi;
        const double bot = r1[cj.lo] * (1.0 - cj.w_hi) + r1[cj.hi] * cj.w_hi;
        dst[static_cast<std::size_t>(i) * out_w + j] =
            top * (1.0 - ri.w_hi) + bot * ri.w_hi;
      }
    }
  }
  wire(y, {&x},
       [xi = x.impl(), rows, cols, b, c, w, out_h, out_w, in_plane,
        out_plane](const TensorImpl& self) {
         if (!xi->requires_grad) return;
         double* dx = detail::ensure_grad(*xi).data();
         const double* g = self.grad->data();
         for (int p = 0; p < b * c; ++p) {
           double* dsrc = dx + p * in_plane;
           const double* gp = g + p * out_plane;
           for (int i = 0; i < out_h; ++i) {
             const Lerp& ri = rows[static_cast<std::size_t>(i)];
             for (int j = 0; j < out_w; ++j) {
               const Lerp& cj = cols[static_cast<std::size_t>(j)];
               const double gv = gp[static_cast<std::size_t>(i) * out_w + j];
               dsrc[static_cast<std::size_t>(ri.lo) * w + cj.lo] +=
                   gv * (1.0 - ri.w_hi) * (1.0 - cj.w_hi);
               dsrc[static_cast<std::size_t>(ri.lo) * w + cj.hi] +=
                   gv * (1.0 - ri.w_hi) * cj.w_hi;
               dsrc[static_cast<std::size_t>(ri.hi) * w + cj.lo] +=
                   gv * ri.w_hi * (1.0 - cj.w_hi);
               dsrc[static_cast<std::size_t>(ri.hi) * w + cj.hi] +=
                   gv * ri.w_hi * cj.w_hi;
             }
           }
         }
       });
  return y;
}

namespace raw {

void softmax_rows(const double* logits, double* out, std::int64_t rows,
                  std::int64_t cols) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = logits + r * cols;
    double* o = out + r * cols;
    double mx = in[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (std::int64_t j = 0; j < cols; ++j) o[j] *= inv;
  }
}

std::vector<double> bilinear_chw(const double* src, int c, int h, int w,
                                 int out_h, int out_w, bool align_corners) {
  const auto rows = lerp_axis(h, out_h, align_corners);
  const auto cols = lerp_axis(w, out_w, align_corners);
  std::vector<double> out(static_cast<std::size_t>(c) * out_h * out_w);
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(out_h) * out_w;
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = src + ch * in_plane;
    double* dst = out.data() + ch * out_plane;
    for (int i = 0; i < out_h; ++i) {
      const Lerp& ri = rows[static_cast<std::size_t>(i)];
      const double* r0 = plane + static_cast<std::size_t>(ri.lo) * w;
      const double* r1 = plane + static_cast<std::size_t>(ri.hi) * w;
      for (int j = 0; j < out_w; ++j) {
        const Lerp& cj = cols[static_cast<std::size_t>(j)];
        const double top = r0[cj.lo] * (1.0 - cj.w_hi) + r0[cj.hi] * cj.w_hi;
        const double bot = r1[cj.lo] * (1.0 - cj.w_hi) + r1[cj.hi] * cj.w_hi;
        dst[static_cast<std::size_t>(i) * out_w + j] =
            top * (1.0 - ri.w_hi) + bot * ri.w_hi;
      }
    }
  }
  return out;
}

}  // namespace raw

}  // namespace vfmseg::ops
