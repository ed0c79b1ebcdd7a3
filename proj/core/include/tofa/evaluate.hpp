// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>

#include "tofa/data.hpp"
#include "tofa/supernet.hpp"

namespace tofa {

/// Plain views of a fixed image pool used to recalibrate normalization
/// statistics. Every call to batches() restarts the same seeded sequence, so
/// recalibrating a configuration is independent of call order.
class CalibrationSource {
 public:
  CalibrationSource() = default;
  CalibrationSource(Dataset pool, Normalization norm, int batch_size, std::uint64_t seed);

  /// The returned generator refers to this source and must not outlive it.
  std::function<Tensor()> batches(int resolution) const;
  bool empty() const { return pool_.labels.empty(); }
  const Dataset& pool() const { return pool_; }
  const Normalization& normalization() const { return norm_; }
  int batch_size() const { return batch_size_; }

  /// The first `count` images of a seeded permutation of `ds`, labels kept.
  static Dataset draw_pool(const Dataset& ds, int count, std::uint64_t seed);

 private:
  Dataset pool_;
  Normalization norm_;
  int batch_size_ = 32;
  std::uint64_t seed_ = 0;
};

/// Top-1 accuracy in [0, 1] of logits against labels.
double accuracy(const Tensor& logits, std::span<const int> labels);

/// Eval-mode accuracy of a supernet view. Normalization statistics are
/// recalibrated first with `recalib_batches` batches from `calib`.
double evaluate_subnet(Supernet& net, const SubnetConfig& config, const Dataset& data,
                       const Normalization& norm, const CalibrationSource& calib,
                       int recalib_batches);

/// Accuracy of a supernet view using its current running statistics.
double evaluate_view(Supernet& net, const SubnetConfig& config, const Dataset& data,
                     const Normalization& norm);

double evaluate_standalone(const StandaloneNet& net, const Dataset& data, const Normalization& norm);

}  // namespace tofa
