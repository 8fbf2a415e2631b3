// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace vfmseg {

class Rng;

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<double>> data;
  // Allocated lazily on first gradient accumulation; a leaf whose grad
  // pointer is still null provably received no gradient.
  std::shared_ptr<std::vector<double>> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(const TensorImpl&)> backward_fn;

  std::int64_t numel() const { return shape_numel(shape); }
};

}  // namespace detail

/// Dense row-major double tensor with reverse-mode autodiff. Value type over
/// a shared impl: copies alias storage, `clone()` deep-copies. Graphs are
/// built eagerly by the ops in ops.hpp whenever autograd is enabled and an
/// input requires grad; `backward()` runs the tape and then frees it.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl)
      : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value);
  /// Truncated-normal init (std `stddev`, clipped at 2 std).
  static Tensor randn_trunc(Shape shape, double stddev, Rng& rng,
                            bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::int64_t numel() const { return impl_->numel(); }
  /// Size of dimension i; negative i counts from the end.
  std::int64_t dim(int i) const;

  double* data() { return impl_->data->data(); }
  const double* data() const { return impl_->data->data(); }
  std::vector<double>& vec() { return *impl_->data; }
  const std::vector<double>& vec() const { return *impl_->data; }

  /// Value of a 0-d/1-element tensor.
  double item() const;

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool is_leaf() const { return impl_->is_leaf; }

  /// Shares storage, drops the graph.
  Tensor detach() const;
  /// Deep copy, no graph.
  Tensor clone() const;

  bool has_grad() const { return impl_ && impl_->grad != nullptr; }
  /// Gradient buffer as a tensor view (undefined Tensor when none).
  Tensor grad() const;
  double* grad_data();
  void zero_grad() { impl_->grad.reset(); }

  /// Reverse pass from this scalar. Frees the graph as it goes; leaf
  /// gradients remain for the optimizer.
  void backward();

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Whether ops currently record autograd graphs (thread-local).
bool autograd_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {
/// Allocates the grad buffer if needed and returns it.
std::vector<double>& ensure_grad(TensorImpl& t);
}  // namespace detail

}  // namespace vfmseg
