// SPDX-License-Identifier: Apache-2.0

#include "vfmseg/core/tensor.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "vfmseg/core/error.hpp"
#include "vfmseg/core/rng.hpp"

namespace vfmseg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

thread_local bool g_autograd_enabled = true;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape,
                                              std::vector<double> values,
                                              bool requires_grad) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::make_shared<std::vector<double>>(std::move(values));
  impl->requires_grad = requires_grad;
  return impl;
}

}  // namespace

bool autograd_enabled() { return g_autograd_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_autograd_enabled) {
  g_autograd_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_autograd_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, 0.0),
                          requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(make_impl(std::move(shape), std::vector<double>(n, value),
                          requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values,
                         bool requires_grad) {
  if (shape_numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw ContractViolation("from_data: " + shape_str(shape) +
                            " does not match value count " +
                            std::to_string(values.size()));
  }
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value) {
  return from_data({1}, std::vector<double>{value});
}

Tensor Tensor::randn_trunc(Shape shape, double stddev, Rng& rng,
                           bool requires_grad) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<double> values(n);
  for (auto& v : values) v = rng.trunc_normal(stddev);
  return Tensor(make_impl(std::move(shape), std::move(values), requires_grad));
}

std::int64_t Tensor::dim(int i) const {
  const int nd = ndim();
  if (i < 0) i += nd;
  if (i < 0 || i >= nd) {
    throw ContractViolation("dim index out of range");
  }
  return impl_->shape[static_cast<std::size_t>(i)];
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractViolation("item() on tensor with numel " +
                            std::to_string(numel()));
  }
  return (*impl_->data)[0];
}

void Tensor::set_requires_grad(bool value) {
  if (!impl_->is_leaf) {
    throw ContractViolation("set_requires_grad on non-leaf tensor");
  }
  impl_->requires_grad = value;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = false;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  return from_data(impl_->shape, *impl_->data, false);
}

Tensor Tensor::grad() const {
  if (!impl_->grad) return Tensor();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->grad;
  return Tensor(std::move(impl));
}

double* Tensor::grad_data() {
  return impl_->grad ? impl_->grad->data() : nullptr;
}

namespace detail {

std::vector<double>& ensure_grad(TensorImpl& t) {
  if (!t.grad) {
    t.grad = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(t.numel()), 0.0);
  }
  return *t.grad;
}

}  // namespace detail

void Tensor::backward() {
  if (numel() != 1) {
    throw ContractViolation("backward() requires a scalar root");
  }
  // Iterative post-order topological sort over the tape.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::TensorImpl* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  detail::ensure_grad(*impl_).front() = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (node->backward_fn && node->grad) {
      node->backward_fn(*node);
    }
  }
  // Release the tape and intermediate gradients; leaves keep theirs.
  for (detail::TensorImpl* node : order) {
    if (!node->is_leaf) {
      node->backward_fn = nullptr;
      node->parents.clear();
      node->grad.reset();
    }
  }
}

}  // namespace vfmseg
