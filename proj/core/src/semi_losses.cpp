// SPDX-License-Identifier: Apache-2.0
#include "tofa/semi_losses.hpp"

#include <algorithm>
#include <cctype>
#include <string>

#include "tofa/error.hpp"
#include "tofa/ops.hpp"

namespace tofa {

std::string_view to_string(LossVariant v) {
  switch (v) {
    case LossVariant::kLab: return "lab";
    case LossVariant::kLabFm: return "lab_fm";
    case LossVariant::kLabDist: return "lab_dist";
    case LossVariant::kFull: return "full";
  }
  return "?";
}

LossVariant parse_variant(std::string_view text) {
  std::string t(text);
  std::transform(t.begin(), t.end(), t.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (t == "lab") return LossVariant::kLab;
  if (t == "lab_fm") return LossVariant::kLabFm;
  if (t == "lab_dist") return LossVariant::kLabDist;
  if (t == "full") return LossVariant::kFull;
  throw ConfigError("unknown loss variant '" + std::string(text) +
                    "' (expected lab, lab_fm, lab_dist or full)");
}

std::vector<float> label_smooth(int y, float alpha, int num_classes) {
  if (num_classes < 1) throw ContractError("label_smooth: num_classes must be positive");
  if (y < 0 || y >= num_classes) {
    throw ContractError("label_smooth: label " + std::to_string(y) + " outside [0, " +
                        std::to_string(num_classes) + ")");
  }
  if (!(alpha >= 0.0f && alpha < 1.0f)) throw ContractError("label_smooth: alpha must be in [0, 1)");
  std::vector<float> t(static_cast<std::size_t>(num_classes), alpha / static_cast<float>(num_classes));
  t[static_cast<std::size_t>(y)] += 1.0f - alpha;
  return t;
}

Tensor smoothed_targets(std::span<const int> labels, float alpha, int num_classes) {
  Tensor t({static_cast<int>(labels.size()), num_classes});
  auto d = t.data();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const auto row = label_smooth(labels[r], alpha, num_classes);
    std::copy(row.begin(), row.end(), d.begin() + static_cast<std::ptrdiff_t>(r * num_classes));
  }
  return t;
}

Tensor labeled_loss(const Tensor& logits, std::span<const int> labels, float alpha) {
  if (logits.ndim() != 2 || logits.dim(0) != static_cast<int>(labels.size())) {
    throw DimensionError("labeled_loss: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  return ops::soft_cross_entropy(logits, smoothed_targets(labels, alpha, logits.dim(1)));
}

FixMatchResult fixmatch_loss(const Tensor& weak_probs, const Tensor& strong_logits, float tau,
                             float alpha) {
  if (weak_probs.shape() != strong_logits.shape() || weak_probs.ndim() != 2) {
    throw DimensionError("fixmatch_loss: weak " + shape_str(weak_probs.shape()) + " vs strong " +
                         shape_str(strong_logits.shape()));
  }
  if (!(tau > 0.0f && tau < 1.0f)) throw ContractError("fixmatch_loss: tau must be in (0, 1)");
  const int b = weak_probs.dim(0), c = weak_probs.dim(1);
  FixMatchResult res;
  res.pseudo_labels.resize(static_cast<std::size_t>(b));
  std::vector<float> mask(static_cast<std::size_t>(b), 0.0f);
  auto p = weak_probs.data();
  for (int r = 0; r < b; ++r) {
    const float* row = p.data() + static_cast<std::size_t>(r) * c;
    const int arg = static_cast<int>(std::max_element(row, row + c) - row);
    res.pseudo_labels[static_cast<std::size_t>(r)] = arg;
    if (row[arg] > tau) {
      mask[static_cast<std::size_t>(r)] = 1.0f;
      ++res.mask_count;
    }
  }
  res.loss = ops::soft_cross_entropy(strong_logits, smoothed_targets(res.pseudo_labels, alpha, c),
                                     mask);
  return res;
}

Tensor distill_loss(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw DimensionError("distill_loss: teacher " + shape_str(teacher_logits.shape()) +
                         " vs student " + shape_str(student_logits.shape()));
  }
  return ops::soft_cross_entropy(student_logits, ops::softmax(teacher_logits));
}

StepLossReport compose_step_loss(LossVariant variant, const StepLossParts& parts) {
  if (!parts.labeled.defined()) throw ContractError("compose_step_loss: labeled term missing");
  StepLossReport rep;
  rep.labeled_term = parts.labeled.item();
  Tensor total = parts.labeled;
  if (uses_fixmatch(variant)) {
    if (!parts.fixmatch) throw ContractError("compose_step_loss: variant needs the FixMatch term");
    rep.fm_term = parts.fixmatch->loss.item();
    rep.fm_mask_count = parts.fixmatch->mask_count;
    total = ops::add(total, parts.fixmatch->loss);
  }
  const bool unl = uses_unlabeled_distill(variant);
  if (unl && parts.distill_unlabeled.size() != parts.distill_labeled.size()) {
    throw ContractError("compose_step_loss: variant needs unlabeled distillation for every student");
  }
  for (std::size_t i = 0; i < parts.distill_labeled.size(); ++i) {
    double term = parts.distill_labeled[i].item();
    rep.distill_labeled += term;
    total = ops::add(total, parts.distill_labeled[i]);
    if (unl) {
      const double u = parts.distill_unlabeled[i].item();
      rep.distill_unlabeled += u;
      term += u;
      total = ops::add(total, parts.distill_unlabeled[i]);
    }
    rep.distill_terms.push_back(term);
  }
  rep.total_tensor = total;
  rep.total = total.item();
  return rep;
}

}  // namespace tofa
