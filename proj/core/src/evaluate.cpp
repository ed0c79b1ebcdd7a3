// SPDX-License-Identifier: Apache-2.0
#include "tofa/evaluate.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

#include "tofa/error.hpp"

namespace tofa {

namespace {

constexpr int kEvalBatch = 200;

template <class Fwd>
double run_accuracy(const Dataset& data, int resolution, const Normalization& norm, Fwd&& fwd) {
  NoGradGuard guard;
  std::size_t correct = 0;
  for (int begin = 0; begin < data.size(); begin += kEvalBatch) {
    const int end = std::min(data.size(), begin + kEvalBatch);
    const Tensor logits = fwd(make_eval_batch(data, begin, end, resolution, norm));
    std::vector<int> labels(data.labels.begin() + begin, data.labels.begin() + end);
    correct += static_cast<std::size_t>(std::lround(accuracy(logits, labels) * (end - begin)));
  }
  return static_cast<double>(correct) / data.size();
}

void require_labeled(const Dataset& data) {
  validate_dataset(data);
  for (auto y : data.labels) {
    if (y < 0) throw ContractError("evaluation needs a fully labeled dataset");
  }
}

}  // namespace

CalibrationSource::CalibrationSource(Dataset pool, Normalization norm, int batch_size,
                                     std::uint64_t seed)
    : pool_(std::move(pool)), norm_(std::move(norm)), batch_size_(batch_size), seed_(seed) {
  validate_dataset(pool_);
  if (batch_size_ < 2) throw ContractError("calibration batches need at least 2 images");
}

std::function<Tensor()> CalibrationSource::batches(int resolution) const {
  if (empty()) throw ContractError("calibration pool is empty");
  std::vector<int> all(static_cast<std::size_t>(pool_.size()));
  std::iota(all.begin(), all.end(), 0);
  auto stream = std::make_shared<BatchStream>(std::move(all), std::min(batch_size_, pool_.size()),
                                              seed_);
  return [this, stream, resolution] {
    const auto idx = stream->next_indices();
    return make_plain_batch(pool_, idx, resolution, norm_);
  };
}

Dataset CalibrationSource::draw_pool(const Dataset& ds, int count, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(ds.size()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = make_stream(seed, 0xca1b);
  shuffle(idx, rng);
  idx.resize(static_cast<std::size_t>(std::min(count, ds.size())));
  std::sort(idx.begin(), idx.end());
  Dataset out = ds.subset(idx);
  out.name = ds.name + ".calib";
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.ndim() != 2 || logits.dim(0) != static_cast<int>(labels.size())) {
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const int c = logits.dim(1);
  auto v = logits.data();
  std::size_t correct = 0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const float* row = v.data() + r * static_cast<std::size_t>(c);
    const auto arg = std::max_element(row, row + c) - row;
    if (arg == labels[r]) ++correct;
  }
  return labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
}

double evaluate_subnet(Supernet& net, const SubnetConfig& config, const Dataset& data,
                       const Normalization& norm, const CalibrationSource& calib,
                       int recalib_batches) {
  bn_recalibrate(net, config, calib.batches(config.resolution), recalib_batches);
  return evaluate_view(net, config, data, norm);
}

double evaluate_view(Supernet& net, const SubnetConfig& config, const Dataset& data,
                     const Normalization& norm) {
  require_labeled(data);
  ForwardOptions opt;
  opt.mode = ops::Mode::kEval;
  return run_accuracy(data, config.resolution, norm,
                      [&](const Tensor& x) { return net.forward(config, x, opt); });
}

double evaluate_standalone(const StandaloneNet& net, const Dataset& data, const Normalization& norm) {
  require_labeled(data);
  return run_accuracy(data, net.resolution(), norm, [&](const Tensor& x) { return net.forward(x); });
}

}  // namespace tofa
