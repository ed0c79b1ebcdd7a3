// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tofa/ops.hpp"
#include "tofa/optim.hpp"
#include "tofa/search_space.hpp"

namespace tofa {

/// Shapes of one inverted-residual layer under a given configuration.
struct LayerGeometry {
  int in = 0;
  int mid = 0;  // expanded width
  int out = 0;
  int kernel = 0;
  int stride = 1;
  bool expand = false;  // expansion > 1
  bool se = false;
  int se_hidden = 0;
  bool residual = false;  // stride 1 and in == out
};

LayerGeometry layer_geometry(const SearchSpace& space, const SubnetConfig& config, int stage,
                             int layer);

/// Half-open index range along one tensor dimension.
struct Range {
  int begin = 0;
  int end = 0;
  bool contains(int i) const { return i >= begin && i < end; }
  bool operator==(const Range&) const = default;
};

/// Per-dimension ranges selecting the active block of a weight tensor.
using TensorSlice = std::vector<Range>;

/// Active slices of one layer's tensors, keyed by name relative to the layer
/// ("expand.conv.weight", "dw.bn.weight", ...). Width keeps the leading output
/// channels, expansion the leading e*Cin expanded channels, and kernel a
/// centered crop of the depthwise kernel.
std::map<std::string, TensorSlice> slice_rules(const SearchSpace& space, const SubnetConfig& config,
                                               int stage, int layer);

/// Active slices of every trainable tensor, keyed by full parameter name.
/// Tensors of layers beyond a stage's depth are absent.
std::map<std::string, TensorSlice> network_slices(const SearchSpace& space,
                                                  const SubnetConfig& config, int num_classes);

struct BatchNormTensors {
  std::string name;
  Tensor weight;
  Tensor bias;
  Tensor running_mean;
  Tensor running_var;
};

struct ElasticLayer {
  int max_in = 0;
  int max_mid = 0;
  int max_out = 0;
  int max_kernel = 0;
  bool has_expand = false;
  Tensor expand_conv;  // [max_mid, max_in, 1, 1]
  BatchNormTensors expand_bn;
  Tensor dw_conv;  // [max_mid, 1, K, K]
  BatchNormTensors dw_bn;
  bool has_se = false;
  Tensor se_fc1_weight, se_fc1_bias;  // [se_hidden(max_mid), max_mid]
  Tensor se_fc2_weight, se_fc2_bias;  // [max_mid, se_hidden(max_mid)]
  Tensor project_conv;                // [max_out, max_mid, 1, 1]
  BatchNormTensors project_bn;
};

/// Accumulates batch statistics per normalization layer during recalibration.
class BnStatsAccumulator {
 public:
  void add(const std::string& name, const ops::BatchStats& stats);
  /// Pooled mean and unbiased pooled variance over everything added.
  std::pair<std::vector<double>, std::vector<double>> pooled(const std::string& name) const;
  bool empty() const { return acc_.empty(); }
  std::vector<std::string> names() const;

 private:
  struct Acc {
    std::vector<double> sum;     // count-weighted means
    std::vector<double> sum_sq;  // count-weighted (var + mean^2)
    double count = 0;
  };
  std::map<std::string, Acc> acc_;
};

struct ForwardOptions {
  ops::Mode mode = ops::Mode::kEval;
  float dropout = 0.0f;
  float drop_connect = 0.0f;
  float bn_momentum = 0.1f;
  Rng* rng = nullptr;  // required in train mode when dropout/drop-connect > 0
  /// When set, normalization uses batch statistics, running averages are left
  /// alone, statistics are reported here, and dropout/drop-connect are off.
  BnStatsAccumulator* calibration = nullptr;
};

/// Weight-sharing network holding the maximal weights of a search space.
class Supernet {
 public:
  /// Fan-in scaled normal conv/fc weights, BN scale 1 / shift 0, zero biases.
  Supernet(SearchSpace space, int num_classes, Rng& rng);

  const SearchSpace& space() const { return space_; }
  int num_classes() const { return num_classes_; }

  /// Runs configuration `config` by slicing the shared weights in place.
  Tensor forward(const SubnetConfig& config, const Tensor& batch, const ForwardOptions& opt);

  /// Trainable tensors in a fixed order.
  std::vector<NamedParam> parameters() const;
  /// Trainable tensors plus normalization running statistics.
  std::vector<NamedParam> state() const;

  /// Re-initializes the classifier for a new number of classes.
  void reinit_classifier(int num_classes, Rng& rng);

  const std::vector<std::vector<ElasticLayer>>& stages() const { return stages_; }

 private:
  void register_bn(const std::string& prefix, BatchNormTensors& bn, int channels);
  Tensor layer_forward(const Tensor& x, ElasticLayer& layer, const LayerGeometry& g,
                       Activation act, const ForwardOptions& opt);

  SearchSpace space_;
  int num_classes_;
  Tensor stem_conv_;
  BatchNormTensors stem_bn_;
  std::vector<std::vector<ElasticLayer>> stages_;
  Tensor head_expand_conv_;
  BatchNormTensors head_expand_bn_;
  Tensor head_fc_weight_, head_fc_bias_;
  Tensor classifier_weight_, classifier_bias_;
  std::vector<NamedParam> registry_;  // every tensor, registration order
};

inline Tensor subnet_forward(Supernet& net, const SubnetConfig& config, const Tensor& batch,
                             const ForwardOptions& opt) {
  return net.forward(config, batch, opt);
}

/// Recomputes the running statistics of every normalization slice used by
/// `config` from `k` batches drawn from `next_batch`. Weights are untouched.
void bn_recalibrate(Supernet& net, const SubnetConfig& config,
                    const std::function<Tensor()>& next_batch, int k);

/// A compact network with exactly the weights of one configuration.
class StandaloneNet {
 public:
  struct Layer {
    std::string name;
    Tensor expand_conv;
    BatchNormTensors expand_bn;
    Tensor dw_conv;
    BatchNormTensors dw_bn;
    Tensor se_fc1_weight, se_fc1_bias, se_fc2_weight, se_fc2_bias;
    Tensor project_conv;
    BatchNormTensors project_bn;
    int stride = 1;
    bool residual = false;
    Activation act = Activation::kRelu;
  };

  StandaloneNet() = default;

  /// Eval-mode forward.
  Tensor forward(const Tensor& batch) const;

  const SubnetConfig& config() const { return config_; }
  int resolution() const { return config_.resolution; }
  int input_channels() const { return input_channels_; }
  int num_classes() const { return num_classes_; }
  std::vector<NamedParam> parameters() const;
  std::vector<NamedParam> state() const;
  std::uint64_t parameter_count() const;

 private:
  friend StandaloneNet materialize(const Supernet& net, const SubnetConfig& config);
  friend StandaloneNet standalone_from_state(const SearchSpace& space, const SubnetConfig& config,
                                             int num_classes,
                                             const std::map<std::string, Tensor>& tensors);

  SubnetConfig config_;
  int num_classes_ = 0;
  int input_channels_ = 3;
  int stem_stride_ = 1;
  Activation stem_act_ = Activation::kRelu;
  Activation head_act_ = Activation::kRelu;
  Tensor stem_conv_;
  BatchNormTensors stem_bn_;
  std::vector<Layer> layers_;
  Tensor head_expand_conv_;
  BatchNormTensors head_expand_bn_;
  Tensor head_fc_weight_, head_fc_bias_;
  Tensor classifier_weight_, classifier_bias_;
};

/// Copies the active slices of `config` into a standalone network.
StandaloneNet materialize(const Supernet& net, const SubnetConfig& config);

/// Rebuilds a standalone network from named tensors (see StandaloneNet::state()).
StandaloneNet standalone_from_state(const SearchSpace& space, const SubnetConfig& config,
                                    int num_classes, const std::map<std::string, Tensor>& tensors);

}  // namespace tofa
