// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>

#include "tofa/random.hpp"
#include "tofa/tensor.hpp"

namespace tofa::ops {

// Elementwise.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor relu(const Tensor& x);
Tensor hardswish(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// Multiplies every [H, W] plane of an NCHW tensor by gate[n, c].
Tensor mul_channel(const Tensor& x, const Tensor& gate);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// NCHW -> [N, C].
Tensor global_avg_pool(const Tensor& x);

/// Constant zero padding on both spatial dims.
Tensor pad2d(const Tensor& x, int pad);

/// Convolution over NCHW input.
///
/// The weight is [Cout_max, Cin_max / groups, K_max, K_max]. `out_channels`
/// selects the leading output channels and `kernel` a centered crop of the
/// spatial kernel, so a larger weight tensor can be executed as any of its
/// nested sub-convolutions without copying. Elastic selection is supported
/// for dense (groups == 1) and depthwise (groups == Cin) convolutions.
struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int groups = 1;
  int out_channels = -1;  // -1: all rows of the weight
  int kernel = -1;        // -1: full spatial extent of the weight
};
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias,
              const Conv2dOptions& opt = {});

/// x[N, in] times the leading [out, in] block of weight[out_max, in_max].
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor* bias, int out_features = -1);

enum class Mode { kTrain, kEval };

struct BatchStats {
  std::span<const float> mean;  // biased batch mean per channel
  std::span<const float> var;   // biased batch variance per channel
  std::size_t count;            // elements reduced per channel
};

struct BatchNormOptions {
  Mode mode = Mode::kTrain;
  float momentum = 0.1f;
  float eps = 1e-5f;
  bool update_running = true;
  /// Receives the batch statistics in train mode.
  std::function<void(const BatchStats&)> stats_sink;
};

/// Batch normalization over the leading C channels of the parameter tensors.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   Tensor& running_mean, Tensor& running_var, const BatchNormOptions& opt);

/// Inverted dropout; identity in eval mode or when p == 0.
Tensor dropout(const Tensor& x, float p, Rng& rng, Mode mode);

/// Drops whole samples along dim 0 (residual-branch drop path).
Tensor drop_connect(const Tensor& x, float p, Rng& rng, Mode mode);

/// Mean over rows of -sum_c target[c] * log_softmax(logits)[c]. The target is
/// a constant; rows must be probability vectors.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs);
/// Same, with row r scaled by row_weights[r] (still divided by the row count).
/// Rows of weight 0 contribute exactly zero value and gradient.
Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs,
                          std::span<const float> row_weights);

/// Row-wise softmax of a [B, C] tensor; never records a graph.
Tensor softmax(const Tensor& logits);

/// Instrumentation: when set, every conv2d/linear reports the MACs it executes.
void set_mac_counter(std::uint64_t* counter);

}  // namespace tofa::ops
