// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vfmseg/core/tensor.hpp"

namespace vfmseg::ops {

// Elementwise / shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double s);
/// x: [..., D] plus row vector b: [D].
Tensor add_rowvec(const Tensor& x, const Tensor& b);
/// x: [B, ...] plus a per-item tensor p of shape x.shape()[1:].
Tensor add_broadcast_batch(const Tensor& x, const Tensor& p);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);

// Linear algebra.
/// x: [..., K] times w: [K, N] (+ optional bias [N]); result [..., N].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());
/// Batched matmul a: [B, M, K] x b: [B, K, N] -> [B, M, N]. trans_b treats b
/// as [B, N, K] and multiplies by its transpose.
Tensor bmm(const Tensor& a, const Tensor& b, bool trans_b = false);

// Nonlinearities / normalization.
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);
/// Layer norm over the last dimension with affine params gamma/beta: [D].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-6);

// Reductions / losses.
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
/// Masked softmax cross-entropy. logits: [P, C]; labels: P class ids; mask:
/// P bytes (0 = skipped). Loss = sum_p mask_p * CE_p / denom.
Tensor masked_cross_entropy(const Tensor& logits,
                            std::span<const std::int32_t> labels,
                            std::span<const std::uint8_t> mask, double denom);
/// Mean over all leading positions of the squared L2 distance along the last
/// dim: sum((pred-target)^2) / (numel / lastdim). target is detached.
Tensor mse_token_mean(const Tensor& pred, const Tensor& target);

// Conv / resize (NCHW).
/// w: [O, C, kh, kw], stride 1, zero padding `pad`, bias optional [O].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int pad);
/// Transposed conv, kernel 2, stride 2 (exact x2 upsample).
/// w: [C, O, 2, 2], bias optional [O]. x: [B, C, H, W] -> [B, O, 2H, 2W].
Tensor conv_transpose2d_k2s2(const Tensor& x, const Tensor& w,
                             const Tensor& bias);
/// Bilinear resize of [B, C, H, W] to (out_h, out_w).
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w,
                         bool align_corners);

// Non-autograd helpers (plain data transforms).
namespace raw {
/// Softmax rows of [P, C] into `out`.
void softmax_rows(const double* logits, double* out, std::int64_t rows,
                  std::int64_t cols);
/// Bilinear resample of a [C, H, W] volume (no autograd).
std::vector<double> bilinear_chw(const double* src, int c, int h, int w,
                                 int out_h, int out_w, bool align_corners);
}  // namespace raw

}  // namespace vfmseg::ops
