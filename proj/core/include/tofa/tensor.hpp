// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tofa {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;

/// One recorded primitive application. Holds strong references to its inputs
/// so the graph stays alive as long as the output does.
struct GradNode {
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(std::span<const float> grad_out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // empty until a gradient reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<GradNode> grad_fn;

  /// Gradient buffer, zero-initialized on first access.
  std::span<float> grad_buffer();
};

/// Dense row-major f32 tensor with reverse-mode autodiff.
///
/// Copies are shallow: two Tensor handles may refer to the same storage, the
/// way parameters are shared between the supernet and its elastic views.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

  static Tensor scalar(float value);
  static Tensor filled(Shape shape, float value);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<float> data() { return impl_->data; }
  std::span<const float> data() const { return impl_->data; }
  float item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->grad_fn == nullptr; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<float> grad() { return impl_->grad_buffer(); }
  std::span<const float> grad() const { return impl_->grad; }
  void zero_grad();

  /// Deep copy of the values with no graph attached.
  Tensor detach() const;

  /// Backpropagates from this scalar into every tensor that requires grad.
  void backward() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Global switch for graph recording, scoped per thread.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Runs backward from a scalar loss.
void backward(const Tensor& loss);

bool all_finite(std::span<const float> values);

namespace detail {

/// True when an op over these inputs must record a graph node.
bool needs_grad(std::initializer_list<const Tensor*> inputs);

/// Attaches a backward closure to `out`.
void attach(Tensor& out, const char* op, std::vector<std::shared_ptr<TensorImpl>> inputs,
            std::function<void(std::span<const float>)> fn);

}  // namespace detail

}  // namespace tofa
