// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "tofa/tensor.hpp"

namespace tofa {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Bias terms and normalization offsets are not decayed.
bool is_decay_exempt(const std::string& name);

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
class Sgd {
 public:
  Sgd(std::vector<NamedParam> params, float momentum, float weight_decay);

  void zero_grad();

  /// Throws NumericError naming the first parameter with a non-finite gradient.
  void step(float lr);

  const std::vector<NamedParam>& params() const { return params_; }
  const std::vector<float>& momentum_buffer(std::size_t i) const { return velocity_[i]; }

 private:
  std::vector<NamedParam> params_;
  std::vector<std::vector<float>> velocity_;
  std::vector<bool> exempt_;
  float momentum_;
  float weight_decay_;
};

/// Linear warmup to base_lr, then half-cosine decay reaching zero at the
/// final iteration. `iter` is clamped into [0, total_iters).
double cosine_warmup_lr(long iter, long total_iters, long warmup_iters, double base_lr);

}  // namespace tofa
