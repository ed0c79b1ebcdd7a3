// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "tofa/evaluate.hpp"
#include "tofa/trainer.hpp"

namespace tofa {

enum class Metric { kFlops, kParams, kLatency };
enum class SelectionRule { kLastSampled, kFirstSampled, kClosestToBudget, kValidation };

std::string_view to_string(Metric m);
std::string_view to_string(SelectionRule r);
/// flops | params | latency
Metric parse_metric(std::string_view text);
/// last_sampled | first_sampled | closest_to_budget | validation
SelectionRule parse_rule(std::string_view text);

using CostFn = std::function<double(const SubnetConfig&)>;

/// Cost model for a metric. Latency is measured on materialized subnets
/// (median ms at batch 1) and cached per configuration.
CostFn make_cost(Metric metric, Supernet& net);

struct Selected {
  SubnetConfig config;
  std::string key;
  double cost = 0.0;
  long s = 0;
};

/// Zero-cost selection over the ledger. Among entries with cost <= budget
/// (anchors removed when exclude_anchors), last_sampled takes the largest
/// s(a), first_sampled the smallest and closest_to_budget the largest cost.
/// Ties go to the larger cost, then the lexicographically smaller key.
/// Throws InfeasibleBudget carrying the cheapest available cost.
Selected select_fixed(const SampleLedger& ledger, const SearchSpace& space, const CostFn& cost,
                      double budget, SelectionRule rule, bool exclude_anchors = true);

struct Candidate {
  SubnetConfig config;
  std::string key;
  double cost = 0.0;
  double accuracy = 0.0;
};

struct ValidationSelection {
  std::vector<Candidate> candidates;               // distinct, in draw order
  std::vector<std::optional<Candidate>> selected;  // per budget; empty when infeasible
};

/// Draws n_candidates uniform configurations, recalibrates and evaluates each
/// once on `val`, and picks the most accurate feasible candidate per budget
/// (ties to the larger cost, then the smaller key). Evaluation runs on up to
/// num_threads() workers.
ValidationSelection select_by_validation(Supernet& net, const Dataset& val,
                                         const Normalization& norm,
                                         const CalibrationSource& calib, int recalib_batches,
                                         const CostFn& cost, const std::vector<double>& budgets,
                                         int n_candidates, Rng& rng);

struct LatencyStats {
  double median_ms = 0.0;
  double p90_ms = 0.0;
  std::vector<double> samples_ms;
};

/// Batch-1 wall-clock forward time; `warmup` runs are discarded.
LatencyStats measure_latency(const StandaloneNet& net, int warmup, int reps);

struct PaletteEntry {
  double budget = 0.0;
  SubnetConfig config;
  std::string key;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
  long s = 0;
  std::optional<double> accuracy;
  std::filesystem::path checkpoint;
};

struct PaletteRequest {
  std::vector<double> budgets;
  Metric metric = Metric::kFlops;
  SelectionRule rule = SelectionRule::kLastSampled;
  bool exclude_anchors = true;
  int recalib_batches = 8;
  /// Validation rule only.
  const Dataset* val = nullptr;
  int candidates = 50;
  std::uint64_t seed = 0;
  /// Optional test data for the accuracy column.
  const Dataset* eval_data = nullptr;
};

/// Selects, recalibrates and materializes one subnet per budget. With
/// `out_dir` set, writes budget_<i>/ directories (model.ckpt, config.txt,
/// metrics.txt) and summary.txt. Infeasible budgets are skipped and reported
/// through `infeasible`.
std::vector<PaletteEntry> build_palette(Supernet& net, const SampleLedger& ledger,
                                        const Normalization& norm, const CalibrationSource& calib,
                                        const PaletteRequest& request,
                                        const std::optional<std::filesystem::path>& out_dir,
                                        std::vector<std::string>* infeasible = nullptr);

/// "budget key flops params s accuracy" rows, tab separated.
std::string palette_summary(const std::vector<PaletteEntry>& entries);

}  // namespace tofa
