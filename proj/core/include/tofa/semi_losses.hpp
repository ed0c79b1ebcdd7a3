// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "tofa/tensor.hpp"

namespace tofa {

/// Which terms of the composite objective are active.
///   LAB      labeled maxnet loss + distillation on labeled views
///   LAB_FM   + pseudo-label loss on unlabeled strong views
///   LAB_DIST + distillation on unlabeled weak views
///   FULL     all of the above
enum class LossVariant { kLab, kLabFm, kLabDist, kFull };

std::string_view to_string(LossVariant v);
/// Accepts lab, lab_fm, lab_dist, full (case-insensitive).
LossVariant parse_variant(std::string_view text);

inline bool uses_fixmatch(LossVariant v) { return v == LossVariant::kLabFm || v == LossVariant::kFull; }
inline bool uses_unlabeled_distill(LossVariant v) {
  return v == LossVariant::kLabDist || v == LossVariant::kFull;
}
inline bool uses_unlabeled(LossVariant v) { return v != LossVariant::kLab; }

/// (1 - alpha) * onehot(y) + alpha / C.
std::vector<float> label_smooth(int y, float alpha, int num_classes);

/// Stacked label_smooth rows, [B, C].
Tensor smoothed_targets(std::span<const int> labels, float alpha, int num_classes);

Tensor labeled_loss(const Tensor& logits, std::span<const int> labels, float alpha);

struct FixMatchResult {
  Tensor loss;
  int mask_count = 0;
  std::vector<int> pseudo_labels;
};

/// Pseudo-labels from the weak-view probabilities (constant), kept where the
/// top probability is strictly above tau; cross-entropy of the strong-view
/// logits against the smoothed pseudo-labels, summed and divided by B.
FixMatchResult fixmatch_loss(const Tensor& weak_probs, const Tensor& strong_logits, float tau,
                             float alpha);

/// Cross-entropy of the student against softmax(teacher). The teacher is a
/// constant: no gradient reaches it.
Tensor distill_loss(const Tensor& teacher_logits, const Tensor& student_logits);

/// Loss pieces computed during one training step.
struct StepLossParts {
  Tensor labeled;
  std::optional<FixMatchResult> fixmatch;
  std::vector<Tensor> distill_labeled;    // one per student subnet
  std::vector<Tensor> distill_unlabeled;  // one per student subnet, may be empty
};

struct StepLossReport {
  double labeled_term = 0.0;
  double fm_term = 0.0;
  int fm_mask_count = 0;
  std::vector<double> distill_terms;  // per student: labeled + unlabeled parts
  double distill_labeled = 0.0;
  double distill_unlabeled = 0.0;
  double total = 0.0;
  Tensor total_tensor;  // differentiable sum of the enabled terms
};

/// Sums the terms enabled by `variant`. Throws ContractError when a required
/// part is missing. Unlabeled parts are ignored by variants that do not use
/// them.
StepLossReport compose_step_loss(LossVariant variant, const StepLossParts& parts);

}  // namespace tofa
