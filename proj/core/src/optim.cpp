// SPDX-License-Identifier: Apache-2.0
#include "tofa/optim.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

#include "tofa/error.hpp"

namespace tofa {

bool is_decay_exempt(const std::string& name) {
  const std::string suffix = ".bias";
  return name.size() >= suffix.size() &&
         name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

Sgd::Sgd(std::vector<NamedParam> params, float momentum, float weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  if (momentum < 0.0f || weight_decay < 0.0f) throw ConfigError("sgd: negative momentum/decay");
  velocity_.reserve(params_.size());
  for (const auto& p : params_) {
    velocity_.emplace_back(p.tensor.numel(), 0.0f);
    exempt_.push_back(is_decay_exempt(p.name));
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void Sgd::step(float lr) {
  if (lr < 0.0f) throw ConfigError("sgd: negative learning rate");
  for (const auto& p : params_) {
    if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
      throw NumericError("sgd: non-finite gradient in " + p.name);
    }
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& t = params_[k].tensor;
    auto w = t.data();
    auto& v = velocity_[k];
    const float decay = exempt_[k] ? 0.0f : weight_decay_;
    const bool has_grad = t.has_grad();
    std::span<const float> g = std::as_const(t).grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = has_grad ? g[i] : 0.0f;
      v[i] = momentum_ * v[i] + gi + decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

double cosine_warmup_lr(long iter, long total_iters, long warmup_iters, double base_lr) {
  if (total_iters <= 0) return base_lr;
  warmup_iters = std::clamp(warmup_iters, 0L, total_iters - 1);
  iter = std::clamp(iter, 0L, total_iters - 1);
  if (iter < warmup_iters) {
    return base_lr * static_cast<double>(iter + 1) / static_cast<double>(warmup_iters);
  }
  const long span = total_iters - 1 - warmup_iters;
  if (span == 0) return base_lr;
  const double progress = static_cast<double>(iter - warmup_iters) / static_cast<double>(span);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace tofa
