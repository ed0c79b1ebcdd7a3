// SPDX-License-Identifier: Apache-2.0
// Command-line front end: convert, synth, pretrain, train, select, eval,
// flops, export.

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tofa/checkpoint.hpp"
#include "tofa/data.hpp"
#include "tofa/error.hpp"
#include "tofa/runtime.hpp"
#include "tofa/search_space.hpp"
#include "tofa/selection.hpp"
#include "tofa/trainer.hpp"

#ifndef TOFA_VERSION
#define TOFA_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using namespace tofa;

namespace {

/// Invalid invocation (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char h[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(h, sizeof h, "%02x", md[i]);
    hex += h;
  }
  return hex;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Command, resolved configuration, input digests, seed, version, times.
class RunManifest {
 public:
  RunManifest(std::string command, std::optional<fs::path> path)
      : command_(std::move(command)), path_(std::move(path)), start_(timestamp()) {}

  void set(const std::string& key, const std::string& value) { config_[key] = value; }
  void set_all(const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) config_[k] = v;
  }
  void input(const fs::path& p) { inputs_[p.string()] = sha256_file(p); }
  void seed(std::uint64_t s) { seed_ = s; }

  void begin() { write("running", ""); }
  void finish(bool ok) { write(ok ? "ok" : "failed", timestamp()); }

 private:
  void write(const std::string& status, const std::string& end) const {
    if (!path_) return;
    std::ofstream out(*path_, std::ios::trunc);
    if (!out) throw Error("cannot write " + path_->string());
    out << "command=" << command_ << "\n";
    out << "tool_version=" << TOFA_VERSION << "\n";
    if (seed_) out << "seed=" << *seed_ << "\n";
    out << "start=" << start_ << "\n";
    if (!end.empty()) out << "end=" << end << "\n";
    out << "status=" << status << "\n";
    for (const auto& [k, v] : config_) out << "config." << k << "=" << v << "\n";
    for (const auto& [k, v] : inputs_) out << "input." << k << "=sha256:" << v << "\n";
  }

  std::string command_;
  std::optional<fs::path> path_;
  std::string start_;
  std::optional<std::uint64_t> seed_;
  std::map<std::string, std::string> config_;
  std::map<std::string, std::string> inputs_;
};

void guard_output_file(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw UsageError(path.string() + " exists; pass --force to overwrite");
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

void guard_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

std::vector<double> parse_budgets(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError("bad budget '" + item + "'");
    }
  }
  if (out.empty()) throw UsageError("--budgets needs at least one value");
  return out;
}

SubnetConfig resolve_config(const SearchSpace& space, const std::string& text) {
  if (text == "max" || text == "maxnet") return anchor(space, Anchor::kMax);
  if (text == "min" || text == "minnet") return anchor(space, Anchor::kMin);
  return decode(space, text);
}

void emit(const std::string& key, const std::string& value) { std::cout << key << "=" << value << "\n"; }

std::string num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Training flags shared by train and pretrain.

struct TrainFlags {
  std::string config_file;
  std::map<std::string, std::string> values;  // flag overrides, TrainConfig keys
  // Raw storage for CLI11.
  long iters = 0;
  double lr = 0;
  int warmup_epochs = 0, batch_l = 0, batch_u = 0, mu = 0, recalib = 0;
  float momentum = 0, weight_decay = 0, ls = 0, dropout = 0, drop_connect = 0, tau = 0;
  long eval_interval = 0;
  std::uint64_t seed = 0;
  std::string variant;
  std::vector<std::pair<CLI::Option*, std::string>> opts;

  void add(CLI::App* cmd) {
    cmd->add_option("--config-file", config_file, "key=value file with TrainConfig fields")
        ->check(CLI::ExistingFile);
    opts = {
        {cmd->add_option("--iters", iters, "training iterations"), "max_iters"},
        {cmd->add_option("--lr", lr, "base learning rate"), "base_lr"},
        {cmd->add_option("--warmup-epochs", warmup_epochs), "warmup_epochs"},
        {cmd->add_option("--momentum", momentum), "momentum"},
        {cmd->add_option("--weight-decay", weight_decay), "weight_decay"},
        {cmd->add_option("--label-smoothing", ls), "label_smoothing"},
        {cmd->add_option("--dropout", dropout), "dropout"},
        {cmd->add_option("--drop-connect", drop_connect), "drop_connect"},
        {cmd->add_option("--tau", tau, "pseudo-label confidence threshold"), "tau"},
        {cmd->add_option("--batch-l", batch_l, "labeled batch size"), "batch_l"},
        {cmd->add_option("--batch-u", batch_u, "unlabeled batch size"), "batch_u"},
        {cmd->add_option("--mu", mu, "unlabeled batch multiplier"), "mu"},
        {cmd->add_option("--seed", seed), "seed"},
        {cmd->add_option("--eval-interval", eval_interval), "eval_interval"},
        {cmd->add_option("--bn-recalib-batches", recalib), "bn_recalib_batches"},
        {cmd->add_option("--variant", variant, "lab | lab_fm | lab_dist | full"), "loss_variant"},
    };
  }

  /// default < config file < flags
  TrainConfig resolve() const {
    TrainConfig cfg;
    if (!config_file.empty()) cfg = apply_key_values(cfg, parse_key_values(read_file(config_file)));
    std::map<std::string, std::string> flags;
    for (const auto& [opt, key] : opts) {
      if (opt->count() > 0) flags[key] = opt->as<std::string>();
    }
    cfg = apply_key_values(cfg, flags);
    validate_config(cfg);
    return cfg;
  }
};

// ---------------------------------------------------------------------------
// Commands

int cmd_convert(const std::string& cifar_dir, const fs::path& out, int classes, int size,
                const std::string& split, bool force) {
  std::vector<fs::path> files;
  const fs::path dir(cifar_dir);
  if (classes == 10) {
    if (split == "train") {
      for (int i = 1; i <= 5; ++i) files.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      files.push_back(dir / "test_batch.bin");
    }
  } else {
    files.push_back(dir / (split == "train" ? "train.bin" : "test.bin"));
  }
  for (const auto& f : files) {
    if (!fs::exists(f)) throw UsageError("missing " + f.string());
  }
  guard_output_file(out, force);
  RunManifest manifest("convert", fs::path(out.string() + ".manifest"));
  manifest.set("classes", std::to_string(classes));
  manifest.set("size", std::to_string(size));
  manifest.set("split", split);
  for (const auto& f : files) manifest.input(f);
  manifest.begin();
  const Dataset ds = import_cifar(files, classes, size);
  write_dataset(ds, out);
  manifest.finish(true);
  emit("images", std::to_string(ds.size()));
  emit("classes", std::to_string(ds.num_classes));
  emit("out", out.string());
  return 0;
}

int cmd_synth(const SynthOptions& opt, const fs::path& out, bool force) {
  guard_output_file(out, force);
  RunManifest manifest("synth", fs::path(out.string() + ".manifest"));
  manifest.set("classes", std::to_string(opt.num_classes));
  manifest.set("size", std::to_string(opt.size));
  manifest.set("n", std::to_string(opt.n));
  manifest.set("task", std::string(to_string(opt.task)));
  manifest.seed(opt.seed);
  manifest.begin();
  const Dataset ds = make_synthetic(opt);
  write_dataset(ds, out);
  manifest.finish(true);
  emit("images", std::to_string(ds.size()));
  const auto counts = ds.class_counts();
  for (std::size_t c = 0; c < counts.size(); ++c) emit("class" + std::to_string(c), std::to_string(counts[c]));
  emit("out", out.string());
  return 0;
}

Supernet build_net(const std::string& profile, const std::string& init, int num_classes,
                   std::uint64_t seed) {
  if (!init.empty()) {
    const Checkpoint ck = read_checkpoint(init);
    if (!profile.empty() && ck.meta.profile != bundled_profile(profile).name) {
      throw UsageError("--init checkpoint uses profile '" + ck.meta.profile + "', not '" + profile + "'");
    }
    const bool reinit = ck.meta.num_classes != num_classes;
    return load_checkpoint(init, reinit, num_classes, seed);
  }
  Rng rng = make_stream(seed, 0x1417);
  return Supernet(bundled_profile(profile.empty() ? "desk-small" : profile), num_classes, rng);
}

int cmd_pretrain(const TrainFlags& flags, const fs::path& data, const std::string& profile,
                 const fs::path& out, bool force) {
  TrainConfig cfg = flags.resolve();
  cfg.variant = LossVariant::kLab;
  guard_output_file(out, force);
  RunManifest manifest("pretrain", fs::path(out.string() + ".manifest"));
  manifest.set_all(to_key_values(cfg));
  manifest.set("profile", profile);
  manifest.input(data);
  manifest.seed(cfg.seed);
  manifest.begin();
  const Dataset source = read_dataset(data);
  Supernet net = build_net(profile, "", source.num_classes, cfg.seed);
  TrainOptions opts;
  opts.meta["profile"] = net.space().name;
  const TrainResult r = pretrain(net, source, cfg, out, opts);
  manifest.finish(true);
  emit("iterations", std::to_string(cfg.max_iters));
  emit("final_loss", r.log.iters.empty() ? "nan" : num(r.log.iters.back().total));
  emit("checkpoint", out.string());
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string unlabeled;
  int per_class = 0;
  bool unlabeled_from_rest = true;
  std::string init;
  std::string profile;
  std::string out_dir;
  std::string eval_data;
  bool force = false;
};

int cmd_train(const TrainFlags& flags, const TrainArgs& a) {
  const TrainConfig cfg = flags.resolve();
  if (a.data.empty()) throw UsageError("train needs --labeled or --data");
  if (a.out_dir.empty()) throw UsageError("train needs --out-dir");
  const Dataset full = read_dataset(a.data);
  Dataset labeled, unlabeled;
  if (a.per_class > 0) {
    auto [l, u] = split_labeled(full, a.per_class, cfg.seed);
    labeled = std::move(l);
    if (a.unlabeled_from_rest) unlabeled = std::move(u);
  } else {
    labeled = full;
  }
  if (!a.unlabeled.empty()) {
    Dataset extra = read_dataset(a.unlabeled);
    if (unlabeled.size() > 0) throw UsageError("--unlabeled conflicts with --unlabeled-from-rest");
    std::fill(extra.labels.begin(), extra.labels.end(), static_cast<std::int16_t>(-1));
    unlabeled = std::move(extra);
  }
  std::optional<Dataset> eval;
  if (!a.eval_data.empty()) eval = read_dataset(a.eval_data);

  const fs::path dir(a.out_dir);
  guard_output_dir(dir, a.force);
  RunManifest manifest("train", dir / "manifest.txt");
  manifest.set_all(to_key_values(cfg));
  manifest.set("per_class", std::to_string(a.per_class));
  manifest.set("unlabeled_from_rest", a.unlabeled_from_rest ? "true" : "false");
  manifest.set("profile", a.profile.empty() ? "desk-small" : a.profile);
  manifest.input(a.data);
  if (!a.unlabeled.empty()) manifest.input(a.unlabeled);
  if (!a.init.empty()) manifest.input(a.init);
  if (!a.eval_data.empty()) manifest.input(a.eval_data);
  manifest.seed(cfg.seed);
  manifest.begin();

  Supernet net = build_net(a.profile, a.init, labeled.num_classes, cfg.seed);
  TrainOptions opts;
  opts.run_dir = dir;
  opts.eval_data = eval ? &*eval : nullptr;
  opts.meta["data"] = fs::path(a.data).filename().string();
  if (!a.init.empty()) opts.meta["init"] = fs::path(a.init).filename().string();
  try {
    const TrainResult r = train(net, labeled, unlabeled, cfg, opts);
    manifest.finish(true);
    emit("iterations", std::to_string(cfg.max_iters));
    emit("labeled", std::to_string(labeled.size()));
    emit("unlabeled", std::to_string(unlabeled.size()));
    emit("final_loss", r.log.iters.empty() ? "nan" : num(r.log.iters.back().total));
    emit("ledger_entries", std::to_string(r.ledger.entries().size()));
    for (const auto& ev : r.log.evals) {
      emit("eval_t" + std::to_string(ev.t), "min:" + num(ev.min_acc) + ",max:" + num(ev.max_acc));
    }
    emit("run_dir", dir.string());
  } catch (...) {
    manifest.finish(false);
    throw;
  }
  return 0;
}

struct SelectArgs {
  std::string run_dir;
  std::string budgets;
  std::string rule = "last_sampled";
  std::string metric = "flops";
  std::string val;
  int candidates = 50;
  bool include_anchors = false;
  std::string eval_data;
  std::string out_dir;
  std::string manifest;
  bool force = false;
};

int run_palette(const SelectArgs& a, bool write) {
  if (a.run_dir.empty()) throw UsageError("--run-dir is required");
  const auto budgets = parse_budgets(a.budgets);
  const SelectionRule rule = parse_rule(a.rule);
  const Metric metric = parse_metric(a.metric);
  if (rule == SelectionRule::kValidation && a.val.empty()) {
    throw UsageError("--rule validation needs --val");
  }
  if (a.candidates < 1) throw UsageError("--candidates must be >= 1");
  std::optional<fs::path> out;
  if (write) {
    if (a.out_dir.empty()) throw UsageError("export needs --out-dir");
    out = fs::path(a.out_dir);
    guard_output_dir(*out, a.force);
  }
  std::optional<fs::path> manifest_path;
  if (out) manifest_path = *out / "manifest.txt";
  else if (!a.manifest.empty()) manifest_path = fs::path(a.manifest);
  RunManifest manifest(write ? "export" : "select", manifest_path);
  manifest.set("budgets", a.budgets);
  manifest.set("rule", a.rule);
  manifest.set("metric", a.metric);
  manifest.set("exclude_anchors", a.include_anchors ? "false" : "true");
  manifest.input(fs::path(a.run_dir) / "supernet.ckpt");
  manifest.input(fs::path(a.run_dir) / "ledger_log.txt");
  std::optional<Dataset> val, eval;
  if (!a.val.empty()) {
    manifest.input(a.val);
    manifest.set("candidates", std::to_string(a.candidates));
    val = read_dataset(a.val);
  }
  if (!a.eval_data.empty()) {
    manifest.input(a.eval_data);
    eval = read_dataset(a.eval_data);
  }
  manifest.begin();

  LoadedRun run = load_run(a.run_dir);
  PaletteRequest req;
  req.budgets = budgets;
  req.metric = metric;
  req.rule = rule;
  req.exclude_anchors = !a.include_anchors;
  req.recalib_batches = run.cfg.bn_recalib_batches;
  req.val = val ? &*val : nullptr;
  req.candidates = a.candidates;
  req.seed = run.cfg.seed;
  req.eval_data = eval ? &*eval : nullptr;
  std::vector<std::string> infeasible;
  const auto entries = build_palette(run.net, run.ledger, run.norm, run.calibration, req, out, &infeasible);
  manifest.finish(true);
  for (const auto& e : entries) {
    std::cout << "budget=" << num(e.budget) << " key=\"" << e.key << "\" flops=" << e.flops
              << " params=" << e.params << " s=" << e.s;
    if (e.accuracy) std::cout << " accuracy=" << num(*e.accuracy);
    if (!e.checkpoint.empty()) std::cout << " checkpoint=" << e.checkpoint.string();
    std::cout << "\n";
  }
  for (const auto& msg : infeasible) std::cout << "infeasible=\"" << msg << "\"\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& run_dir, const std::string& config,
             const std::string& data) {
  if (data.empty()) throw UsageError("eval needs --data");
  const Dataset ds = read_dataset(data);
  if (!run_dir.empty()) {
    if (config.empty()) throw UsageError("eval --run-dir needs --config");
    LoadedRun run = load_run(run_dir);
    const SubnetConfig c = resolve_config(run.net.space(), config);
    const double acc = evaluate_subnet(run.net, c, ds, run.norm, run.calibration,
                                       run.cfg.bn_recalib_batches);
    emit("key", "\"" + encode(c) + "\"");
    emit("accuracy", num(acc));
    return 0;
  }
  if (checkpoint.empty()) throw UsageError("eval needs --checkpoint or --run-dir");
  const Checkpoint ck = read_checkpoint(checkpoint);
  auto norm_it = ck.meta.extra.find("norm");
  const Normalization norm =
      norm_it != ck.meta.extra.end() ? decode_normalization(norm_it->second) : compute_normalization(ds);
  if (ck.meta.kind == "standalone") {
    const LoadedStandalone s = load_standalone(checkpoint);
    emit("key", "\"" + s.meta.config_key + "\"");
    emit("accuracy", num(evaluate_standalone(s.net, ds, norm)));
    return 0;
  }
  if (config.empty()) throw UsageError("eval of a supernet checkpoint needs --config");
  Supernet net = load_checkpoint(checkpoint);
  const SubnetConfig c = resolve_config(net.space(), config);
  // Without a run directory the evaluation data doubles as calibration pool.
  const CalibrationSource calib = run_calibration(ds, norm, 0);
  emit("key", "\"" + encode(c) + "\"");
  emit("accuracy", num(evaluate_subnet(net, c, ds, norm, calib, 8)));
  return 0;
}

int cmd_flops(const std::string& profile, const std::string& config, int classes) {
  const SearchSpace space = bundled_profile(profile);
  const int n = classes > 0 ? classes : space.default_classes;
  const SubnetConfig c = resolve_config(space, config);
  const auto macs = flops(space, c, n);
  emit("key", "\"" + encode(c) + "\"");
  emit("flops", std::to_string(macs));
  emit("mflops", num(static_cast<double>(macs) / 1e6));
  emit("params", std::to_string(param_count(space, c, n)));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  CLI::App app{"Weight-sharing supernet training and zero-cost subnet selection"};
  app.set_version_flag("--version", TOFA_VERSION);
  app.require_subcommand(1, 1);

  bool force = false;

  // convert
  auto* convert = app.add_subcommand("convert", "Convert CIFAR binary batches to TDS");
  std::string cifar_dir, convert_out, split = "train";
  int cifar_classes = 10, cifar_size = 32;
  convert->add_option("--cifar-dir", cifar_dir, "directory with the .bin batches")->required();
  convert->add_option("--out", convert_out, "output .tds")->required();
  convert->add_option("--classes", cifar_classes, "10 or 100")->check(CLI::IsMember({10, 100}));
  convert->add_option("--size", cifar_size, "output side length")->check(CLI::PositiveNumber);
  convert->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  convert->add_flag("--force", force);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate the synthetic blob-texture task");
  SynthOptions so;
  std::string synth_out;
  synth->add_option("--classes", so.num_classes)->check(CLI::Range(2, 1000));
  synth->add_option("--size", so.size)->check(CLI::Range(4, 1024));
  synth->add_option("--n", so.n)->check(CLI::PositiveNumber);
  synth->add_option("--seed", so.seed);
  std::string synth_task = "scale";
  synth->add_option("--task", synth_task, "scale | shape")->check(CLI::IsMember({"scale", "shape"}));
  synth->add_option("--out", synth_out)->required();
  synth->add_flag("--force", force);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Labeled-only supernet training on a source task");
  TrainFlags pre_flags;
  pre_flags.add(pre);
  std::string pre_data, pre_profile = "desk-small", pre_out;
  pre->add_option("--data", pre_data)->required()->check(CLI::ExistingFile);
  pre->add_option("--profile", pre_profile);
  pre->add_option("--out", pre_out, "checkpoint path")->required();
  pre->add_flag("--force", force);

  // train
  auto* tr = app.add_subcommand("train", "Semi-supervised supernet training");
  TrainFlags tr_flags;
  tr_flags.add(tr);
  TrainArgs ta;
  auto* labeled_opt = tr->add_option("--labeled", ta.data, "dataset file")->check(CLI::ExistingFile);
  tr->add_option("--data", ta.data, "dataset file")->check(CLI::ExistingFile)->excludes(labeled_opt);
  tr->add_option("--per-class", ta.per_class, "labels kept per class; the rest is split off")
      ->check(CLI::NonNegativeNumber);
  tr->add_flag("--unlabeled-from-rest,!--no-unlabeled", ta.unlabeled_from_rest,
               "use the split-off remainder as unlabeled data (default on)");
  tr->add_option("--unlabeled", ta.unlabeled, "separate unlabeled dataset")->check(CLI::ExistingFile);
  tr->add_option("--init", ta.init, "checkpoint to start from")->check(CLI::ExistingFile);
  tr->add_option("--profile", ta.profile);
  tr->add_option("--out-dir", ta.out_dir)->required();
  tr->add_option("--eval-data", ta.eval_data, "anchor evaluation set")->check(CLI::ExistingFile);
  tr->add_flag("--force", ta.force);

  // select / export
  SelectArgs sel, exp;
  auto add_select = [](CLI::App* cmd, SelectArgs& a) {
    cmd->add_option("--run-dir", a.run_dir)->required()->check(CLI::ExistingDirectory);
    cmd->add_option("--budgets", a.budgets, "comma-separated budgets in metric units")->required();
    cmd->add_option("--rule", a.rule, "last_sampled | first_sampled | closest_to_budget | validation");
    cmd->add_option("--metric", a.metric, "flops | params | latency");
    cmd->add_option("--val", a.val, "validation set for --rule validation")->check(CLI::ExistingFile);
    cmd->add_option("--candidates", a.candidates);
    cmd->add_flag("--include-anchors", a.include_anchors);
    cmd->add_option("--eval-data", a.eval_data, "report test accuracy")->check(CLI::ExistingFile);
  };
  auto* select = app.add_subcommand("select", "Pick one subnet per budget");
  add_select(select, sel);
  select->add_option("--manifest", sel.manifest, "write a run manifest here");
  auto* exporter = app.add_subcommand("export", "Materialize a palette of subnets");
  add_select(exporter, exp);
  exporter->add_option("--out-dir", exp.out_dir)->required();
  exporter->add_flag("--force", exp.force);

  // eval
  auto* ev = app.add_subcommand("eval", "Top-1 accuracy of a subnet");
  std::string ev_ckpt, ev_run, ev_config, ev_data;
  ev->add_option("--checkpoint", ev_ckpt)->check(CLI::ExistingFile);
  ev->add_option("--run-dir", ev_run)->check(CLI::ExistingDirectory);
  ev->add_option("--config", ev_config, "config key, or min / max");
  ev->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);

  // flops
  auto* fl = app.add_subcommand("flops", "MAC and parameter count of a configuration");
  std::string fl_profile = "desk-small", fl_config;
  int fl_classes = 0;
  fl->add_option("--profile", fl_profile);
  fl->add_option("--config", fl_config, "config key, or min / max")->required();
  fl->add_option("--classes", fl_classes, "classifier width (profile default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*convert) return cmd_convert(cifar_dir, convert_out, cifar_classes, cifar_size, split, force);
    if (*synth) {
      so.task = parse_synth_task(synth_task);
      return cmd_synth(so, synth_out, force);
    }
    if (*pre) return cmd_pretrain(pre_flags, pre_data, pre_profile, pre_out, force);
    if (*tr) return cmd_train(tr_flags, ta);
    if (*select) return run_palette(sel, false);
    if (*exporter) return run_palette(exp, true);
    if (*ev) return cmd_eval(ev_ckpt, ev_run, ev_config, ev_data);
    if (*fl) return cmd_flops(fl_profile, fl_config, fl_classes);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
