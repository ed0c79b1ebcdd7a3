// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tofa/data.hpp"
#include "tofa/evaluate.hpp"
#include "tofa/semi_losses.hpp"
#include "tofa/supernet.hpp"

namespace tofa {

struct TrainConfig {
  long max_iters = 10000;
  double base_lr = 0.01;
  int warmup_epochs = 5;
  float momentum = 0.9f;
  float weight_decay = 1e-5f;
  float label_smoothing = 0.1f;
  float dropout = 0.3f;
  float drop_connect = 0.2f;
  float tau = 0.95f;
  int batch_l = 32;
  int batch_u = 32;
  int mu = 1;  // unlabeled batch holds mu * batch_u images
  LossVariant variant = LossVariant::kFull;
  std::uint64_t seed = 0;
  long eval_interval = 0;  // 0 disables periodic anchor evaluation
  int bn_recalib_batches = 8;
};

/// Throws ConfigError naming the first out-of-range field.
void validate_config(const TrainConfig& cfg);

/// Warmup length in iterations: warmup_epochs * ceil(labeled_size / batch_l),
/// capped below max_iters.
long warmup_iters(const TrainConfig& cfg, int labeled_size);

/// Flat key=value form, one field per entry, field names as in TrainConfig.
std::map<std::string, std::string> to_key_values(const TrainConfig& cfg);
/// Overrides fields of `base` from `kv`; unknown keys raise ConfigError.
TrainConfig apply_key_values(TrainConfig base, const std::map<std::string, std::string>& kv);
std::string format_key_values(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> parse_key_values(std::string_view text);

/// The set of sampled subnets with their cumulative iteration index s(a).
class SampleLedger {
 public:
  struct Entry {
    long s = 0;
    long first = 0;
    long last = 0;
    long count = 0;
    std::string anchor;  // "min", "max" or empty
  };

  SampleLedger() = default;
  SampleLedger(std::string min_key, std::string max_key);

  /// s(a) += t for every distinct config in `sampled`, and for the maxnet.
  void update(const std::vector<SubnetConfig>& sampled, const SubnetConfig& maxnet, long t);
  void record(const std::string& key, long t);

  long index(const std::string& key) const;
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  bool is_anchor(const std::string& key) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }
  /// (iteration, key) for every increment, in order.
  const std::vector<std::pair<long, std::string>>& log() const { return log_; }
  const std::string& min_key() const { return min_key_; }
  const std::string& max_key() const { return max_key_; }
  bool empty() const { return entries_.empty(); }

  static SampleLedger replay(const std::vector<std::pair<long, std::string>>& log,
                             const std::string& min_key, const std::string& max_key);

  /// "key s first last count anchor" rows, tab separated.
  std::string to_text() const;
  std::string log_text() const;
  /// Parses the two texts written by to_text() and log_text().
  static SampleLedger from_text(std::string_view table, std::string_view log);

  bool operator==(const SampleLedger&) const;

 private:
  std::string min_key_, max_key_;
  std::map<std::string, Entry> entries_;
  std::vector<std::pair<long, std::string>> log_;
};

struct IterRecord {
  long t = 0;
  double lr = 0.0;
  double total = 0.0;
  double labeled = 0.0;
  double fm = 0.0;
  int fm_mask = 0;
  double distill_labeled = 0.0;
  double distill_unlabeled = 0.0;
  std::vector<double> distill_terms;
  std::string r1, r2;  // keys of the random subnets
};

struct EvalRecord {
  long t = 0;
  double min_acc = 0.0;
  double max_acc = 0.0;
};

struct TrainLog {
  std::vector<IterRecord> iters;
  std::vector<EvalRecord> evals;

  /// One key=value line per record; config keys are double-quoted.
  std::string to_text() const;
};

struct StepBatches {
  LabeledBatch labeled;
  std::optional<UnlabeledBatch> unlabeled;
};

struct StepOutcome {
  StepLossReport report;
  SubnetConfig r1, r2;
  /// Every configuration that received gradient, maxnet first.
  std::vector<SubnetConfig> trained;
};

/// One sandwich iteration: labeled maxnet loss, optional pseudo-label loss,
/// distillation of two random subnets and the minnet against the maxnet, then
/// a single backward pass and optimizer step. Batches are at the maxnet
/// resolution and are resized for each student.
StepOutcome train_step(Supernet& net, Sgd& opt, const StepBatches& batches, const TrainConfig& cfg,
                       double lr, Rng& arch_rng, Rng& noise_rng);

struct TrainOptions {
  /// Standardization constants; computed from the labeled set when absent.
  std::optional<Normalization> norm;
  /// Anchor evaluation data for eval_interval (optional).
  const Dataset* eval_data = nullptr;
  /// When set, config snapshot, checkpoints, ledger and log are written here.
  std::optional<std::filesystem::path> run_dir;
  /// Called after every iteration.
  std::function<void(const IterRecord&)> on_iter;
  /// Extra run metadata stored in checkpoints.
  std::map<std::string, std::string> meta;
};

struct TrainResult {
  SampleLedger ledger;
  TrainLog log;
  Normalization norm;
  CalibrationSource calibration;
};

/// Algorithm driver. An empty `unlabeled` set makes every variant behave as
/// the labeled-only one. Throws DivergenceError after restoring the last good
/// weights when the loss is non-finite or stays above 10x its initial value
/// for 100 consecutive iterations.
TrainResult train(Supernet& net, const Dataset& labeled, const Dataset& unlabeled,
                  const TrainConfig& cfg, const TrainOptions& options = {});

/// Labeled-only training on a fully labeled source task; the checkpoint is
/// written to `out`.
TrainResult pretrain(Supernet& net, const Dataset& source, TrainConfig cfg,
                     const std::filesystem::path& out, const TrainOptions& options = {});

/// Number of images kept in a run's calibration pool.
inline constexpr int kCalibrationPool = 512;

/// Calibration source of a run with the given seed over `pool`.
CalibrationSource run_calibration(Dataset pool, Normalization norm, std::uint64_t seed);

/// Everything a finished run directory holds.
struct LoadedRun {
  TrainConfig cfg;
  std::map<std::string, std::string> values;  // config.txt
  Supernet net;
  SampleLedger ledger;
  Normalization norm;
  CalibrationSource calibration;
};

/// Reads config.txt, supernet.ckpt, ledger.txt, ledger_log.txt and calib.tds.
LoadedRun load_run(const std::filesystem::path& run_dir);

}  // namespace tofa
