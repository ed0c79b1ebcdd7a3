// SPDX-License-Identifier: Apache-2.0
#include "tofa/supernet.hpp"

#include <cmath>

#include "tofa/error.hpp"

namespace tofa {

using ops::Mode;

namespace {

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape), true);
  for (auto& v : t.data()) v = static_cast<float>(normal(rng) * stddev);
  return t;
}

Tensor he_normal(Shape shape, int fan_in, Rng& rng) {
  return normal_tensor(std::move(shape), std::sqrt(2.0 / fan_in), rng);
}

Tensor activate(const Tensor& x, Activation act) {
  return act == Activation::kRelu ? ops::relu(x) : ops::hardswish(x);
}

Tensor apply_bn(const Tensor& x, BatchNormTensors& bn, const ForwardOptions& opt) {
  ops::BatchNormOptions o;
  o.momentum = opt.bn_momentum;
  if (opt.calibration) {
    o.mode = Mode::kTrain;
    o.update_running = false;
    auto* acc = opt.calibration;
    const std::string* name = &bn.name;
    o.stats_sink = [acc, name](const ops::BatchStats& s) { acc->add(*name, s); };
  } else {
    o.mode = opt.mode;
  }
  return ops::batchnorm2d(x, bn.weight, bn.bias, bn.running_mean, bn.running_var, o);
}

Mode regularization_mode(const ForwardOptions& opt) {
  return opt.calibration ? Mode::kEval : opt.mode;
}

void check_batch(const Tensor& batch, int channels, int resolution) {
  if (batch.ndim() != 4 || batch.dim(1) != channels) {
    throw DimensionError("expected NCHW batch with " + std::to_string(channels) +
                         " channels, got " + shape_str(batch.shape()));
  }
  if (batch.dim(2) != resolution || batch.dim(3) != resolution) {
    throw ContractError("batch spatial size " + std::to_string(batch.dim(2)) + "x" +
                        std::to_string(batch.dim(3)) + " does not match resolution " +
                        std::to_string(resolution));
  }
}

std::string layer_prefix(int stage, int layer) {
  return "stages." + std::to_string(stage) + "." + std::to_string(layer);
}

int max_of(const std::vector<int>& v) { return v.back(); }

}  // namespace

LayerGeometry layer_geometry(const SearchSpace& space, const SubnetConfig& config, int stage,
                             int layer) {
  const auto& def = space.stages.at(static_cast<std::size_t>(stage));
  const auto& ch = config.stages.at(static_cast<std::size_t>(stage));
  LayerGeometry g;
  if (layer == 0) {
    g.in = stage == 0 ? config.stem_width : config.stages[static_cast<std::size_t>(stage - 1)].width;
  } else {
    g.in = ch.width;
  }
  g.mid = g.in * ch.expansion;
  g.out = ch.width;
  g.kernel = ch.kernel;
  g.stride = layer == 0 ? def.stride : 1;
  g.expand = ch.expansion > 1;
  g.se = def.use_se;
  g.se_hidden = se_hidden(g.mid);
  g.residual = g.stride == 1 && g.in == g.out;
  return g;
}

std::map<std::string, TensorSlice> slice_rules(const SearchSpace& space, const SubnetConfig& config,
                                               int stage, int layer) {
  const auto g = layer_geometry(space, config, stage, layer);
  const int kmax = max_of(space.stages.at(static_cast<std::size_t>(stage)).kernel_choices);
  const int off = (kmax - g.kernel) / 2;
  std::map<std::string, TensorSlice> s;
  auto bn = [&s](const std::string& p, int c) {
    s[p + ".weight"] = {{0, c}};
    s[p + ".bias"] = {{0, c}};
  };
  if (g.expand) {
    s["expand.conv.weight"] = {{0, g.mid}, {0, g.in}, {0, 1}, {0, 1}};
    bn("expand.bn", g.mid);
  }
  s["dw.conv.weight"] = {{0, g.mid}, {0, 1}, {off, off + g.kernel}, {off, off + g.kernel}};
  bn("dw.bn", g.mid);
  if (g.se) {
    s["se.fc1.weight"] = {{0, g.se_hidden}, {0, g.mid}};
    s["se.fc1.bias"] = {{0, g.se_hidden}};
    s["se.fc2.weight"] = {{0, g.mid}, {0, g.se_hidden}};
    s["se.fc2.bias"] = {{0, g.mid}};
  }
  s["project.conv.weight"] = {{0, g.out}, {0, g.mid}, {0, 1}, {0, 1}};
  bn("project.bn", g.out);
  return s;
}

std::map<std::string, TensorSlice> network_slices(const SearchSpace& space,
                                                  const SubnetConfig& config, int num_classes) {
  validate_config(space, config);
  std::map<std::string, TensorSlice> s;
  const int k = space.stem.kernel;
  s["stem.conv.weight"] = {{0, config.stem_width}, {0, space.input_channels}, {0, k}, {0, k}};
  s["stem.bn.weight"] = {{0, config.stem_width}};
  s["stem.bn.bias"] = {{0, config.stem_width}};
  for (std::size_t st = 0; st < config.stages.size(); ++st) {
    for (int l = 0; l < config.stages[st].depth; ++l) {
      for (auto& [name, slice] : slice_rules(space, config, static_cast<int>(st), l)) {
        s[layer_prefix(static_cast<int>(st), l) + "." + name] = slice;
      }
    }
  }
  int feat = config.stages.back().width;
  if (space.head.expansion > 1) {
    const int in = feat;
    feat = in * space.head.expansion;
    s["head.expand.conv.weight"] = {{0, feat}, {0, in}, {0, 1}, {0, 1}};
    s["head.expand.bn.weight"] = {{0, feat}};
    s["head.expand.bn.bias"] = {{0, feat}};
  }
  s["head.fc.weight"] = {{0, config.head_width}, {0, feat}};
  s["head.fc.bias"] = {{0, config.head_width}};
  s["head.classifier.weight"] = {{0, num_classes}, {0, config.head_width}};
  s["head.classifier.bias"] = {{0, num_classes}};
  return s;
}

// ---------------------------------------------------------------------------

void BnStatsAccumulator::add(const std::string& name, const ops::BatchStats& stats) {
  auto& a = acc_[name];
  const std::size_t c = stats.mean.size();
  if (a.sum.empty()) {
    a.sum.assign(c, 0.0);
    a.sum_sq.assign(c, 0.0);
  }
  if (a.sum.size() != c) throw ContractError("calibration width changed for " + name);
  const double n = static_cast<double>(stats.count);
  for (std::size_t i = 0; i < c; ++i) {
    const double m = stats.mean[i];
    a.sum[i] += n * m;
    a.sum_sq[i] += n * (static_cast<double>(stats.var[i]) + m * m);
  }
  a.count += n;
}

std::pair<std::vector<double>, std::vector<double>> BnStatsAccumulator::pooled(
    const std::string& name) const {
  const auto& a = acc_.at(name);
  std::vector<double> mean(a.sum.size()), var(a.sum.size());
  const double unbias = a.count > 1 ? a.count / (a.count - 1) : 1.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean[i] = a.sum[i] / a.count;
    var[i] = std::max(0.0, a.sum_sq[i] / a.count - mean[i] * mean[i]) * unbias;
  }
  return {mean, var};
}

std::vector<std::string> BnStatsAccumulator::names() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : acc_) out.push_back(k);
  return out;
}

// ---------------------------------------------------------------------------

void Supernet::register_bn(const std::string& prefix, BatchNormTensors& bn, int channels) {
  bn.name = prefix;
  bn.weight = Tensor::filled({channels}, 1.0f).set_requires_grad(true);
  bn.bias = Tensor({channels}, true);
  bn.running_mean = Tensor({channels});
  bn.running_var = Tensor::filled({channels}, 1.0f);
  registry_.push_back({prefix + ".weight", bn.weight});
  registry_.push_back({prefix + ".bias", bn.bias});
  registry_.push_back({prefix + ".running_mean", bn.running_mean});
  registry_.push_back({prefix + ".running_var", bn.running_var});
}

Supernet::Supernet(SearchSpace space, int num_classes, Rng& rng)
    : space_(std::move(space)), num_classes_(num_classes) {
  if (num_classes < 2) throw ContractError("num_classes must be at least 2");
  validate_space(space_);
  const int k = space_.stem.kernel;
  const int in_ch = space_.input_channels;
  int cin = max_of(space_.stem.width_choices);
  stem_conv_ = he_normal({cin, in_ch, k, k}, in_ch * k * k, rng);
  registry_.push_back({"stem.conv.weight", stem_conv_});
  register_bn("stem.bn", stem_bn_, cin);

  stages_.resize(space_.stages.size());
  for (std::size_t s = 0; s < space_.stages.size(); ++s) {
    const auto& def = space_.stages[s];
    const int width = max_of(def.width_choices);
    const int depth = max_of(def.depth_choices);
    const int kmax = max_of(def.kernel_choices);
    const int emax = max_of(def.expansion_choices);
    for (int l = 0; l < depth; ++l) {
      ElasticLayer layer;
      const std::string p = layer_prefix(static_cast<int>(s), l);
      layer.max_in = l == 0 ? cin : width;
      layer.max_mid = layer.max_in * emax;
      layer.max_out = width;
      layer.max_kernel = kmax;
      layer.has_expand = emax > 1;
      if (layer.has_expand) {
        layer.expand_conv = he_normal({layer.max_mid, layer.max_in, 1, 1}, layer.max_in, rng);
        registry_.push_back({p + ".expand.conv.weight", layer.expand_conv});
        register_bn(p + ".expand.bn", layer.expand_bn, layer.max_mid);
      }
      layer.dw_conv = he_normal({layer.max_mid, 1, kmax, kmax}, kmax * kmax, rng);
      registry_.push_back({p + ".dw.conv.weight", layer.dw_conv});
      register_bn(p + ".dw.bn", layer.dw_bn, layer.max_mid);
      layer.has_se = def.use_se;
      if (layer.has_se) {
        const int h = se_hidden(layer.max_mid);
        layer.se_fc1_weight = he_normal({h, layer.max_mid}, layer.max_mid, rng);
        layer.se_fc1_bias = Tensor({h}, true);
        layer.se_fc2_weight = he_normal({layer.max_mid, h}, h, rng);
        layer.se_fc2_bias = Tensor({layer.max_mid}, true);
        registry_.push_back({p + ".se.fc1.weight", layer.se_fc1_weight});
        registry_.push_back({p + ".se.fc1.bias", layer.se_fc1_bias});
        registry_.push_back({p + ".se.fc2.weight", layer.se_fc2_weight});
        registry_.push_back({p + ".se.fc2.bias", layer.se_fc2_bias});
      }
      layer.project_conv = he_normal({width, layer.max_mid, 1, 1}, layer.max_mid, rng);
      registry_.push_back({p + ".project.conv.weight", layer.project_conv});
      register_bn(p + ".project.bn", layer.project_bn, width);
      stages_[s].push_back(std::move(layer));
    }
    cin = width;
  }

  int feat = cin;
  if (space_.head.expansion > 1) {
    feat = cin * space_.head.expansion;
    head_expand_conv_ = he_normal({feat, cin, 1, 1}, cin, rng);
    registry_.push_back({"head.expand.conv.weight", head_expand_conv_});
    register_bn("head.expand.bn", head_expand_bn_, feat);
  }
  const int head = max_of(space_.head.width_choices);
  head_fc_weight_ = he_normal({head, feat}, feat, rng);
  head_fc_bias_ = Tensor({head}, true);
  registry_.push_back({"head.fc.weight", head_fc_weight_});
  registry_.push_back({"head.fc.bias", head_fc_bias_});
  classifier_weight_ = normal_tensor({num_classes, head}, 0.01, rng);
  classifier_bias_ = Tensor({num_classes}, true);
  registry_.push_back({"head.classifier.weight", classifier_weight_});
  registry_.push_back({"head.classifier.bias", classifier_bias_});
}

void Supernet::reinit_classifier(int num_classes, Rng& rng) {
  if (num_classes < 2) throw ContractError("num_classes must be at least 2");
  num_classes_ = num_classes;
  const int head = max_of(space_.head.width_choices);
  Tensor w = normal_tensor({num_classes, head}, 0.01, rng);
  Tensor b({num_classes}, true);
  for (auto& p : registry_) {
    if (p.name == "head.classifier.weight") p.tensor = w;
    if (p.name == "head.classifier.bias") p.tensor = b;
  }
  classifier_weight_ = w;
  classifier_bias_ = b;
}

std::vector<NamedParam> Supernet::parameters() const {
  std::vector<NamedParam> out;
  for (const auto& p : registry_) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

std::vector<NamedParam> Supernet::state() const { return registry_; }

Tensor Supernet::layer_forward(const Tensor& x, ElasticLayer& layer, const LayerGeometry& g,
                               Activation act, const ForwardOptions& opt) {
  Tensor h = x;
  if (g.expand) {
    ops::Conv2dOptions o;
    o.out_channels = g.mid;
    h = activate(apply_bn(ops::conv2d(h, layer.expand_conv, nullptr, o), layer.expand_bn, opt), act);
  }
  ops::Conv2dOptions dw;
  dw.stride = g.stride;
  dw.padding = g.kernel / 2;
  dw.groups = g.mid;
  dw.kernel = g.kernel;
  h = activate(apply_bn(ops::conv2d(h, layer.dw_conv, nullptr, dw), layer.dw_bn, opt), act);
  if (g.se) {
    Tensor s = ops::global_avg_pool(h);
    s = ops::relu(ops::linear(s, layer.se_fc1_weight, &layer.se_fc1_bias, g.se_hidden));
    s = ops::sigmoid(ops::linear(s, layer.se_fc2_weight, &layer.se_fc2_bias, g.mid));
    h = ops::mul_channel(h, s);
  }
  ops::Conv2dOptions pj;
  pj.out_channels = g.out;
  h = apply_bn(ops::conv2d(h, layer.project_conv, nullptr, pj), layer.project_bn, opt);
  if (g.residual) {
    if (opt.drop_connect > 0.0f && regularization_mode(opt) == Mode::kTrain) {
      if (!opt.rng) throw ContractError("drop-connect in train mode needs an RNG");
      h = ops::drop_connect(h, opt.drop_connect, *opt.rng, Mode::kTrain);
    }
    h = ops::add(h, x);
  }
  return h;
}

Tensor Supernet::forward(const SubnetConfig& config, const Tensor& batch,
                         const ForwardOptions& opt) {
  validate_config(space_, config);
  check_batch(batch, space_.input_channels, config.resolution);

  ops::Conv2dOptions so;
  so.stride = space_.stem.stride;
  so.padding = space_.stem.kernel / 2;
  so.out_channels = config.stem_width;
  Tensor x = activate(apply_bn(ops::conv2d(batch, stem_conv_, nullptr, so), stem_bn_, opt),
                      space_.stem.act);
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (int l = 0; l < config.stages[s].depth; ++l) {
      const auto g = layer_geometry(space_, config, static_cast<int>(s), l);
      x = layer_forward(x, stages_[s][static_cast<std::size_t>(l)], g, space_.stages[s].act, opt);
    }
  }
  if (space_.head.expansion > 1) {
    ops::Conv2dOptions ho;
    ho.out_channels = x.dim(1) * space_.head.expansion;
    x = activate(apply_bn(ops::conv2d(x, head_expand_conv_, nullptr, ho), head_expand_bn_, opt),
                 space_.head.act);
  }
  x = ops::global_avg_pool(x);
  x = activate(ops::linear(x, head_fc_weight_, &head_fc_bias_, config.head_width), space_.head.act);
  const Mode reg = regularization_mode(opt);
  if (opt.dropout > 0.0f && reg == Mode::kTrain) {
    if (!opt.rng) throw ContractError("dropout in train mode needs an RNG");
    x = ops::dropout(x, opt.dropout, *opt.rng, Mode::kTrain);
  }
  return ops::linear(x, classifier_weight_, &classifier_bias_, num_classes_);
}

void bn_recalibrate(Supernet& net, const SubnetConfig& config,
                    const std::function<Tensor()>& next_batch, int k) {
  if (k < 1) throw ContractError("bn_recalibrate: K must be at least 1");
  BnStatsAccumulator acc;
  ForwardOptions opt;
  opt.calibration = &acc;
  NoGradGuard no_grad;
  int used = 0;
  for (int i = 0; i < k; ++i) {
    Tensor batch = next_batch ? next_batch() : Tensor();
    if (!batch.defined()) break;
    net.forward(config, batch, opt);
    ++used;
  }
  if (used == 0) throw ContractError("bn_recalibrate: empty calibration stream");

  std::map<std::string, Tensor> buffers;
  for (auto& p : net.state()) buffers.emplace(p.name, p.tensor);
  for (const auto& name : acc.names()) {
    auto [mean, var] = acc.pooled(name);
    auto rm = buffers.at(name + ".running_mean").data();
    auto rv = buffers.at(name + ".running_var").data();
    for (std::size_t c = 0; c < mean.size(); ++c) {
      rm[c] = static_cast<float>(mean[c]);
      rv[c] = static_cast<float>(var[c]);
    }
  }
}

// ---------------------------------------------------------------------------
// Standalone networks

namespace {

Tensor copy_block(const Tensor& src, const TensorSlice& slice) {
  Shape shape;
  for (const auto& r : slice) shape.push_back(r.end - r.begin);
  Tensor out(shape);
  const auto& full = src.shape();
  const int nd = static_cast<int>(full.size());
  std::vector<std::size_t> stride(static_cast<std::size_t>(nd), 1);
  for (int d = nd - 2; d >= 0; --d) {
    stride[static_cast<std::size_t>(d)] =
        stride[static_cast<std::size_t>(d + 1)] * static_cast<std::size_t>(full[static_cast<std::size_t>(d + 1)]);
  }
  std::vector<int> idx(static_cast<std::size_t>(nd), 0);
  auto dst = out.data();
  auto s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) {
    std::size_t off = 0;
    for (int d = 0; d < nd; ++d) {
      off += static_cast<std::size_t>(slice[static_cast<std::size_t>(d)].begin + idx[static_cast<std::size_t>(d)]) *
             stride[static_cast<std::size_t>(d)];
    }
    dst[i] = s[off];
    for (int d = nd - 1; d >= 0; --d) {
      if (++idx[static_cast<std::size_t>(d)] < shape[static_cast<std::size_t>(d)]) break;
      idx[static_cast<std::size_t>(d)] = 0;
    }
  }
  return out;
}

Tensor eval_bn(const Tensor& x, const BatchNormTensors& bn) {
  ops::BatchNormOptions o;
  o.mode = Mode::kEval;
  Tensor rm = bn.running_mean;
  Tensor rv = bn.running_var;
  return ops::batchnorm2d(x, bn.weight, bn.bias, rm, rv, o);
}

void push_bn(std::vector<NamedParam>& out, const BatchNormTensors& bn, bool with_buffers) {
  out.push_back({bn.name + ".weight", bn.weight});
  out.push_back({bn.name + ".bias", bn.bias});
  if (with_buffers) {
    out.push_back({bn.name + ".running_mean", bn.running_mean});
    out.push_back({bn.name + ".running_var", bn.running_var});
  }
}

}  // namespace

StandaloneNet materialize(const Supernet& net, const SubnetConfig& config) {
  const auto& space = net.space();
  const auto slices = network_slices(space, config, net.num_classes());
  std::map<std::string, Tensor> src;
  for (const auto& p : net.state()) src.emplace(p.name, p.tensor);
  std::map<std::string, Tensor> compact;
  for (const auto& [name, slice] : slices) compact[name] = copy_block(src.at(name), slice);
  // Running statistics follow the slice of their normalization scale.
  for (const auto& [name, slice] : slices) {
    const std::string suffix = ".bn.weight";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
      const std::string base = name.substr(0, name.size() - std::string(".weight").size());
      compact[base + ".running_mean"] = copy_block(src.at(base + ".running_mean"), slice);
      compact[base + ".running_var"] = copy_block(src.at(base + ".running_var"), slice);
    }
  }
  return standalone_from_state(space, config, net.num_classes(), compact);
}

StandaloneNet standalone_from_state(const SearchSpace& space, const SubnetConfig& config,
                                    int num_classes, const std::map<std::string, Tensor>& tensors) {
  validate_config(space, config);
  const auto slices = network_slices(space, config, num_classes);
  auto get = [&](const std::string& name, const Shape& expected) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IncompatibleCheckpoint("missing tensor " + name);
    if (it->second.shape() != expected) {
      throw IncompatibleCheckpoint("tensor " + name + " has shape " + shape_str(it->second.shape()) +
                                   ", expected " + shape_str(expected));
    }
    return it->second;
  };
  auto shape_of = [&](const std::string& name) {
    Shape s;
    for (const auto& r : slices.at(name)) s.push_back(r.end - r.begin);
    return s;
  };
  auto param = [&](const std::string& name) { return get(name, shape_of(name)); };
  auto bn = [&](const std::string& p) {
    const Shape s = shape_of(p + ".weight");
    return BatchNormTensors{p, get(p + ".weight", s), get(p + ".bias", s),
                            get(p + ".running_mean", s), get(p + ".running_var", s)};
  };

  StandaloneNet out;
  out.config_ = config;
  out.num_classes_ = num_classes;
  out.input_channels_ = space.input_channels;
  out.stem_stride_ = space.stem.stride;
  out.stem_act_ = space.stem.act;
  out.head_act_ = space.head.act;
  out.stem_conv_ = param("stem.conv.weight");
  out.stem_bn_ = bn("stem.bn");
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    for (int l = 0; l < config.stages[s].depth; ++l) {
      const auto g = layer_geometry(space, config, static_cast<int>(s), l);
      const std::string p = layer_prefix(static_cast<int>(s), l);
      StandaloneNet::Layer layer;
      layer.name = p;
      if (g.expand) {
        layer.expand_conv = param(p + ".expand.conv.weight");
        layer.expand_bn = bn(p + ".expand.bn");
      }
      layer.dw_conv = param(p + ".dw.conv.weight");
      layer.dw_bn = bn(p + ".dw.bn");
      if (g.se) {
        layer.se_fc1_weight = param(p + ".se.fc1.weight");
        layer.se_fc1_bias = param(p + ".se.fc1.bias");
        layer.se_fc2_weight = param(p + ".se.fc2.weight");
        layer.se_fc2_bias = param(p + ".se.fc2.bias");
      }
      layer.project_conv = param(p + ".project.conv.weight");
      layer.project_bn = bn(p + ".project.bn");
      layer.stride = g.stride;
      layer.residual = g.residual;
      layer.act = space.stages[s].act;
      out.layers_.push_back(std::move(layer));
    }
  }
  if (space.head.expansion > 1) {
    out.head_expand_conv_ = param("head.expand.conv.weight");
    out.head_expand_bn_ = bn("head.expand.bn");
  }
  out.head_fc_weight_ = param("head.fc.weight");
  out.head_fc_bias_ = param("head.fc.bias");
  out.classifier_weight_ = param("head.classifier.weight");
  out.classifier_bias_ = param("head.classifier.bias");
  return out;
}

Tensor StandaloneNet::forward(const Tensor& batch) const {
  check_batch(batch, input_channels_, config_.resolution);
  ops::Conv2dOptions so;
  so.stride = stem_stride_;
  so.padding = stem_conv_.dim(2) / 2;
  Tensor x = activate(eval_bn(ops::conv2d(batch, stem_conv_, nullptr, so), stem_bn_), stem_act_);
  for (const auto& layer : layers_) {
    Tensor h = x;
    if (layer.expand_conv.defined()) {
      h = activate(eval_bn(ops::conv2d(h, layer.expand_conv, nullptr), layer.expand_bn), layer.act);
    }
    ops::Conv2dOptions dw;
    dw.stride = layer.stride;
    dw.padding = layer.dw_conv.dim(2) / 2;
    dw.groups = layer.dw_conv.dim(0);
    h = activate(eval_bn(ops::conv2d(h, layer.dw_conv, nullptr, dw), layer.dw_bn), layer.act);
    if (layer.se_fc1_weight.defined()) {
      Tensor s = ops::global_avg_pool(h);
      s = ops::relu(ops::linear(s, layer.se_fc1_weight, &layer.se_fc1_bias));
      s = ops::sigmoid(ops::linear(s, layer.se_fc2_weight, &layer.se_fc2_bias));
      h = ops::mul_channel(h, s);
    }
    h = eval_bn(ops::conv2d(h, layer.project_conv, nullptr), layer.project_bn);
    x = layer.residual ? ops::add(h, x) : h;
  }
  if (head_expand_conv_.defined()) {
    x = activate(eval_bn(ops::conv2d(x, head_expand_conv_, nullptr), head_expand_bn_), head_act_);
  }
  x = ops::global_avg_pool(x);
  x = activate(ops::linear(x, head_fc_weight_, &head_fc_bias_), head_act_);
  return ops::linear(x, classifier_weight_, &classifier_bias_);
}

namespace {

std::vector<NamedParam> standalone_tensors(const StandaloneNet& net, bool with_buffers,
                                           const Tensor& stem_conv, const BatchNormTensors& stem_bn,
                                           const std::vector<StandaloneNet::Layer>& layers,
                                           const Tensor& head_expand_conv,
                                           const BatchNormTensors& head_expand_bn,
                                           const Tensor& fc_w, const Tensor& fc_b,
                                           const Tensor& cls_w, const Tensor& cls_b) {
  (void)net;
  std::vector<NamedParam> out;
  out.push_back({"stem.conv.weight", stem_conv});
  push_bn(out, stem_bn, with_buffers);
  for (const auto& l : layers) {
    if (l.expand_conv.defined()) {
      out.push_back({l.name + ".expand.conv.weight", l.expand_conv});
      push_bn(out, l.expand_bn, with_buffers);
    }
    out.push_back({l.name + ".dw.conv.weight", l.dw_conv});
    push_bn(out, l.dw_bn, with_buffers);
    if (l.se_fc1_weight.defined()) {
      out.push_back({l.name + ".se.fc1.weight", l.se_fc1_weight});
      out.push_back({l.name + ".se.fc1.bias", l.se_fc1_bias});
      out.push_back({l.name + ".se.fc2.weight", l.se_fc2_weight});
      out.push_back({l.name + ".se.fc2.bias", l.se_fc2_bias});
    }
    out.push_back({l.name + ".project.conv.weight", l.project_conv});
    push_bn(out, l.project_bn, with_buffers);
  }
  if (head_expand_conv.defined()) {
    out.push_back({"head.expand.conv.weight", head_expand_conv});
    push_bn(out, head_expand_bn, with_buffers);
  }
  out.push_back({"head.fc.weight", fc_w});
  out.push_back({"head.fc.bias", fc_b});
  out.push_back({"head.classifier.weight", cls_w});
  out.push_back({"head.classifier.bias", cls_b});
  return out;
}

}  // namespace

std::vector<NamedParam> StandaloneNet::parameters() const {
  return standalone_tensors(*this, false, stem_conv_, stem_bn_, layers_, head_expand_conv_,
                            head_expand_bn_, head_fc_weight_, head_fc_bias_, classifier_weight_,
                            classifier_bias_);
}

std::vector<NamedParam> StandaloneNet::state() const {
  return standalone_tensors(*this, true, stem_conv_, stem_bn_, layers_, head_expand_conv_,
                            head_expand_bn_, head_fc_weight_, head_fc_bias_, classifier_weight_,
                            classifier_bias_);
}

std::uint64_t StandaloneNet::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

}  // namespace tofa
