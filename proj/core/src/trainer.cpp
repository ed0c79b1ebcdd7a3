// SPDX-License-Identifier: Apache-2.0
#include "tofa/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "tofa/checkpoint.hpp"
#include "tofa/error.hpp"

namespace tofa {

namespace {

// Purpose tags for the independent random streams of one run.
enum StreamTag : std::uint64_t {
  kArchStream = 0xa1,
  kLabeledOrder = 0xa2,
  kLabeledAug = 0xa3,
  kUnlabeledOrder = 0xa4,
  kUnlabeledAug = 0xa5,
  kNoiseStream = 0xa6,
  kCalibStream = 0xa7,
};

// Shortest text that round-trips at the value's own precision.
template <class T>
std::string fmt_num(T v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
std::string fmt_double(double v) { return fmt_num(v); }

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto res = std::from_chars(text.data(), end, value);
  if (res.ec != std::errc() || res.ptr != end) {
    throw ConfigError("bad value '" + text + "' for " + key);
  }
  return value;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig

void validate_config(const TrainConfig& cfg) {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  if (cfg.max_iters < 0) fail("max_iters must be >= 0");
  if (!(cfg.base_lr >= 0.0) || !std::isfinite(cfg.base_lr)) fail("base_lr must be finite and >= 0");
  if (cfg.warmup_epochs < 0) fail("warmup_epochs must be >= 0");
  if (!(cfg.momentum >= 0.0f && cfg.momentum < 1.0f)) fail("momentum must be in [0, 1)");
  if (!(cfg.weight_decay >= 0.0f)) fail("weight_decay must be >= 0");
  if (!(cfg.label_smoothing >= 0.0f && cfg.label_smoothing < 1.0f)) {
    fail("label_smoothing must be in [0, 1)");
  }
  if (!(cfg.dropout >= 0.0f && cfg.dropout < 1.0f)) fail("dropout must be in [0, 1)");
  if (!(cfg.drop_connect >= 0.0f && cfg.drop_connect < 1.0f)) fail("drop_connect must be in [0, 1)");
  if (!(cfg.tau > 0.0f && cfg.tau < 1.0f)) fail("tau must be in (0, 1)");
  if (cfg.batch_l < 2) fail("batch_l must be >= 2");
  if (cfg.batch_u < 2) fail("batch_u must be >= 2");
  if (cfg.mu < 1) fail("mu must be >= 1");
  if (cfg.eval_interval < 0) fail("eval_interval must be >= 0");
  if (cfg.bn_recalib_batches < 1) fail("bn_recalib_batches must be >= 1");
}

long warmup_iters(const TrainConfig& cfg, int labeled_size) {
  const long per_epoch = (static_cast<long>(labeled_size) + cfg.batch_l - 1) / cfg.batch_l;
  const long w = static_cast<long>(cfg.warmup_epochs) * per_epoch;
  return std::clamp(w, 0L, std::max(0L, cfg.max_iters - 1));
}

std::map<std::string, std::string> to_key_values(const TrainConfig& cfg) {
  return {
      {"max_iters", std::to_string(cfg.max_iters)},
      {"base_lr", fmt_num(cfg.base_lr)},
      {"warmup_epochs", std::to_string(cfg.warmup_epochs)},
      {"momentum", fmt_num(cfg.momentum)},
      {"weight_decay", fmt_num(cfg.weight_decay)},
      {"label_smoothing", fmt_num(cfg.label_smoothing)},
      {"dropout", fmt_num(cfg.dropout)},
      {"drop_connect", fmt_num(cfg.drop_connect)},
      {"tau", fmt_num(cfg.tau)},
      {"batch_l", std::to_string(cfg.batch_l)},
      {"batch_u", std::to_string(cfg.batch_u)},
      {"mu", std::to_string(cfg.mu)},
      {"loss_variant", std::string(to_string(cfg.variant))},
      {"seed", std::to_string(cfg.seed)},
      {"eval_interval", std::to_string(cfg.eval_interval)},
      {"bn_recalib_batches", std::to_string(cfg.bn_recalib_batches)},
  };
}

TrainConfig apply_key_values(TrainConfig cfg, const std::map<std::string, std::string>& kv) {
  for (const auto& [key, value] : kv) {
    if (key == "max_iters") cfg.max_iters = parse_number<long>(key, value);
    else if (key == "base_lr") cfg.base_lr = parse_number<double>(key, value);
    else if (key == "warmup_epochs") cfg.warmup_epochs = parse_number<int>(key, value);
    else if (key == "momentum") cfg.momentum = parse_number<float>(key, value);
    else if (key == "weight_decay") cfg.weight_decay = parse_number<float>(key, value);
    else if (key == "label_smoothing") cfg.label_smoothing = parse_number<float>(key, value);
    else if (key == "dropout") cfg.dropout = parse_number<float>(key, value);
    else if (key == "drop_connect") cfg.drop_connect = parse_number<float>(key, value);
    else if (key == "tau") cfg.tau = parse_number<float>(key, value);
    else if (key == "batch_l") cfg.batch_l = parse_number<int>(key, value);
    else if (key == "batch_u") cfg.batch_u = parse_number<int>(key, value);
    else if (key == "mu") cfg.mu = parse_number<int>(key, value);
    else if (key == "loss_variant" || key == "variant") cfg.variant = parse_variant(value);
    else if (key == "seed") cfg.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "eval_interval") cfg.eval_interval = parse_number<long>(key, value);
    else if (key == "bn_recalib_batches") cfg.bn_recalib_batches = parse_number<int>(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  return cfg;
}

std::string format_key_values(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> parse_key_values(std::string_view text) {
  std::map<std::string, std::string> kv;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = trim(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    ++line_no;
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", line_no);
    const auto key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ParseError("empty key", line_no);
    kv[key] = trim(std::string_view(line).substr(eq + 1));
  }
  return kv;
}

// ---------------------------------------------------------------------------
// SampleLedger

SampleLedger::SampleLedger(std::string min_key, std::string max_key)
    : min_key_(std::move(min_key)), max_key_(std::move(max_key)) {}

void SampleLedger::record(const std::string& key, long t) {
  if (t < 1) throw ContractError("ledger iterations start at 1");
  auto [it, inserted] = entries_.try_emplace(key);
  Entry& e = it->second;
  if (inserted) {
    e.first = t;
    if (key == min_key_) e.anchor = "min";
    else if (key == max_key_) e.anchor = "max";
  }
  e.s += t;
  e.last = t;
  ++e.count;
  log_.emplace_back(t, key);
}

void SampleLedger::update(const std::vector<SubnetConfig>& sampled, const SubnetConfig& maxnet,
                          long t) {
  // The sampled collection is a set: a config drawn twice in one iteration
  // is credited once.
  std::set<std::string> seen;
  for (const auto& c : sampled) {
    auto key = encode(c);
    if (seen.insert(key).second) record(key, t);
  }
  auto key = encode(maxnet);
  if (seen.insert(key).second) record(key, t);
}

long SampleLedger::index(const std::string& key) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? 0 : it->second.s;
}

bool SampleLedger::is_anchor(const std::string& key) const {
  return key == min_key_ || key == max_key_;
}

SampleLedger SampleLedger::replay(const std::vector<std::pair<long, std::string>>& log,
                                  const std::string& min_key, const std::string& max_key) {
  SampleLedger ledger(min_key, max_key);
  for (const auto& [t, key] : log) ledger.record(key, t);
  return ledger;
}

std::string SampleLedger::to_text() const {
  std::ostringstream os;
  os << "# min " << min_key_ << "\n# max " << max_key_ << "\n";
  os << "# key\ts\tfirst\tlast\tcount\tanchor\n";
  for (const auto& [key, e] : entries_) {
    os << key << '\t' << e.s << '\t' << e.first << '\t' << e.last << '\t' << e.count << '\t'
       << (e.anchor.empty() ? "-" : e.anchor) << '\n';
  }
  return os.str();
}

std::string SampleLedger::log_text() const {
  std::ostringstream os;
  for (const auto& [t, key] : log_) os << t << '\t' << key << '\n';
  return os.str();
}

SampleLedger SampleLedger::from_text(std::string_view table, std::string_view log) {
  std::string min_key, max_key;
  std::istringstream ts{std::string(table)};
  std::string line;
  std::map<std::string, Entry> rows;
  int line_no = 0;
  while (std::getline(ts, line)) {
    ++line_no;
    if (line.rfind("# min ", 0) == 0) {
      min_key = line.substr(6);
      continue;
    }
    if (line.rfind("# max ", 0) == 0) {
      max_key = line.substr(6);
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, anchor;
    Entry e;
    if (!(ls >> key >> e.s >> e.first >> e.last >> e.count >> anchor)) {
      throw ParseError("malformed ledger row", line_no);
    }
    e.anchor = anchor == "-" ? "" : anchor;
    rows[key] = e;
  }
  std::vector<std::pair<long, std::string>> entries;
  std::istringstream ls{std::string(log)};
  line_no = 0;
  while (std::getline(ls, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    long t = 0;
    std::string key;
    if (!(row >> t >> key)) throw ParseError("malformed ledger log row", line_no);
    entries.emplace_back(t, key);
  }
  SampleLedger ledger = replay(entries, min_key, max_key);
  if (ledger.entries_.size() != rows.size()) {
    throw FormatError("ledger table and log disagree on the number of entries");
  }
  for (const auto& [key, e] : rows) {
    auto it = ledger.entries_.find(key);
    if (it == ledger.entries_.end() || it->second.s != e.s || it->second.first != e.first ||
        it->second.last != e.last || it->second.count != e.count) {
      throw FormatError("ledger table row for " + key + " does not match its log");
    }
  }
  return ledger;
}

bool SampleLedger::operator==(const SampleLedger& other) const {
  if (min_key_ != other.min_key_ || max_key_ != other.max_key_ || log_ != other.log_) return false;
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [key, e] : entries_) {
    auto it = other.entries_.find(key);
    if (it == other.entries_.end()) return false;
    const Entry& o = it->second;
    if (e.s != o.s || e.first != o.first || e.last != o.last || e.count != o.count ||
        e.anchor != o.anchor) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// TrainLog

std::string TrainLog::to_text() const {
  std::string out;
  std::size_t e = 0;
  for (const auto& r : iters) {
    out += "t=" + std::to_string(r.t) + " lr=" + fmt_double(r.lr) + " total=" + fmt_double(r.total) +
           " lab=" + fmt_double(r.labeled) + " fm=" + fmt_double(r.fm) +
           " fm_mask=" + std::to_string(r.fm_mask) + " dist_l=" + fmt_double(r.distill_labeled) +
           " dist_u=" + fmt_double(r.distill_unlabeled);
    for (std::size_t i = 0; i < r.distill_terms.size(); ++i) {
      out += " dist" + std::to_string(i) + "=" + fmt_double(r.distill_terms[i]);
    }
    out += " r1=\"" + r.r1 + "\" r2=\"" + r.r2 + "\"\n";
    while (e < evals.size() && evals[e].t == r.t) {
      out += "eval t=" + std::to_string(evals[e].t) + " min_acc=" + fmt_double(evals[e].min_acc) +
             " max_acc=" + fmt_double(evals[e].max_acc) + "\n";
      ++e;
    }
  }
  for (; e < evals.size(); ++e) {
    out += "eval t=" + std::to_string(evals[e].t) + " min_acc=" + fmt_double(evals[e].min_acc) +
           " max_acc=" + fmt_double(evals[e].max_acc) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training step

StepOutcome train_step(Supernet& net, Sgd& opt, const StepBatches& batches, const TrainConfig& cfg,
                       double lr, Rng& arch_rng, Rng& noise_rng) {
  const SearchSpace& space = net.space();
  const LossVariant variant = batches.unlabeled ? cfg.variant : LossVariant::kLab;
  const SubnetConfig maxnet = anchor(space, Anchor::kMax);
  const SubnetConfig minnet = anchor(space, Anchor::kMin);

  ForwardOptions train_opt;
  train_opt.mode = ops::Mode::kTrain;
  train_opt.dropout = cfg.dropout;
  train_opt.drop_connect = cfg.drop_connect;
  train_opt.rng = &noise_rng;

  opt.zero_grad();
  StepOutcome out;
  out.trained.push_back(maxnet);

  const Tensor lab_x = resize_batch(batches.labeled.images, maxnet.resolution);
  const Tensor max_lab_logits = net.forward(maxnet, lab_x, train_opt);
  StepLossParts parts;
  parts.labeled = labeled_loss(max_lab_logits, batches.labeled.labels, cfg.label_smoothing);

  Tensor teacher_unl;
  Tensor unl_weak;
  if (uses_unlabeled(variant)) {
    unl_weak = resize_batch(batches.unlabeled->weak, maxnet.resolution);
    // Pseudo-labels and distillation targets: maxnet on weak views with batch
    // statistics, no dropout, no graph.
    ForwardOptions teacher_opt;
    teacher_opt.mode = ops::Mode::kTrain;
    {
      NoGradGuard guard;
      teacher_unl = net.forward(maxnet, unl_weak, teacher_opt);
    }
    if (uses_fixmatch(variant)) {
      const Tensor strong = resize_batch(batches.unlabeled->strong, maxnet.resolution);
      const Tensor strong_logits = net.forward(maxnet, strong, train_opt);
      parts.fixmatch = fixmatch_loss(ops::softmax(teacher_unl), strong_logits, cfg.tau,
                                     cfg.label_smoothing);
    }
  }

  out.r1 = sample_uniform(space, arch_rng);
  out.r2 = sample_uniform(space, arch_rng);
  for (const SubnetConfig* student : std::initializer_list<const SubnetConfig*>{&out.r1, &out.r2, &minnet}) {
    out.trained.push_back(*student);
    const Tensor xs = resize_batch(batches.labeled.images, student->resolution);
    parts.distill_labeled.push_back(distill_loss(max_lab_logits, net.forward(*student, xs, train_opt)));
    if (uses_unlabeled_distill(variant)) {
      const Tensor us = resize_batch(batches.unlabeled->weak, student->resolution);
      parts.distill_unlabeled.push_back(distill_loss(teacher_unl, net.forward(*student, us, train_opt)));
    }
  }

  out.report = compose_step_loss(variant, parts);
  if (!std::isfinite(out.report.total)) {
    throw NumericError("non-finite training loss " + fmt_double(out.report.total));
  }
  backward(out.report.total_tensor);
  opt.step(static_cast<float>(lr));
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<std::vector<float>> snapshot(const Supernet& net) {
  std::vector<std::vector<float>> snap;
  for (const auto& p : net.state()) {
    auto d = p.tensor.data();
    snap.emplace_back(d.begin(), d.end());
  }
  return snap;
}

void restore(Supernet& net, const std::vector<std::vector<float>>& snap) {
  auto state = net.state();
  for (std::size_t i = 0; i < state.size(); ++i) {
    auto d = state[i].tensor.data();
    std::copy(snap[i].begin(), snap[i].end(), d.begin());
  }
}

void require_labels(const Dataset& ds) {
  for (auto y : ds.labels) {
    if (y < 0) throw ContractError("labeled set contains unlabeled samples");
  }
}

}  // namespace

TrainResult train(Supernet& net, const Dataset& labeled, const Dataset& unlabeled,
                  const TrainConfig& cfg, const TrainOptions& options) {
  validate_config(cfg);
  validate_dataset(labeled);
  require_labels(labeled);
  if (labeled.num_classes != net.num_classes()) {
    throw ContractError("labeled set has " + std::to_string(labeled.num_classes) +
                        " classes, the network " + std::to_string(net.num_classes()));
  }
  if (labeled.channels != net.space().input_channels) {
    throw DimensionError("dataset has " + std::to_string(labeled.channels) +
                         " channels, the search space expects " +
                         std::to_string(net.space().input_channels));
  }
  const bool have_unlabeled = unlabeled.size() > 0;
  if (have_unlabeled) {
    validate_dataset(unlabeled);
    if (unlabeled.height != labeled.height || unlabeled.width != labeled.width ||
        unlabeled.channels != labeled.channels) {
      throw DimensionError("labeled and unlabeled images differ in shape");
    }
  }

  const SearchSpace& space = net.space();
  const SubnetConfig maxnet = anchor(space, Anchor::kMax);
  const SubnetConfig minnet = anchor(space, Anchor::kMin);

  TrainResult result;
  result.norm = options.norm ? *options.norm : compute_normalization(labeled);
  result.ledger = SampleLedger(encode(minnet), encode(maxnet));
  result.calibration = run_calibration(
      CalibrationSource::draw_pool(have_unlabeled ? unlabeled : labeled, kCalibrationPool, cfg.seed),
      result.norm, cfg.seed);

  std::map<std::string, std::string> meta = options.meta;
  meta["norm"] = encode_normalization(result.norm);
  meta["loss_variant"] = std::string(to_string(cfg.variant));
  meta["seed"] = std::to_string(cfg.seed);

  const auto& run_dir = options.run_dir;
  if (run_dir) {
    std::filesystem::create_directories(*run_dir);
    auto kv = to_key_values(cfg);
    for (const auto& [k, v] : options.meta) kv["run." + k] = v;
    kv["run.profile"] = space.name;
    kv["run.num_classes"] = std::to_string(net.num_classes());
    kv["run.labeled_size"] = std::to_string(labeled.size());
    kv["run.unlabeled_size"] = std::to_string(unlabeled.size());
    kv["run.norm"] = meta["norm"];
    write_text(*run_dir / "config.txt", format_key_values(kv));
    write_dataset(result.calibration.pool(), *run_dir / "calib.tds");
  }

  const long warmup = warmup_iters(cfg, labeled.size());
  Sgd opt(net.parameters(), cfg.momentum, cfg.weight_decay);
  Rng arch_rng = make_stream(cfg.seed, kArchStream);
  Rng noise_rng = make_stream(cfg.seed, kNoiseStream);
  Rng lab_aug = make_stream(cfg.seed, kLabeledAug);
  Rng unl_aug = make_stream(cfg.seed, kUnlabeledAug);

  std::vector<int> lab_idx(static_cast<std::size_t>(labeled.size()));
  std::iota(lab_idx.begin(), lab_idx.end(), 0);
  BatchStream lab_stream(std::move(lab_idx), cfg.batch_l, make_stream(cfg.seed, kLabeledOrder)());
  std::optional<BatchStream> unl_stream;
  const bool fetch_unlabeled = have_unlabeled && uses_unlabeled(cfg.variant);
  if (fetch_unlabeled) {
    std::vector<int> idx(static_cast<std::size_t>(unlabeled.size()));
    std::iota(idx.begin(), idx.end(), 0);
    unl_stream.emplace(std::move(idx), cfg.batch_u * cfg.mu, make_stream(cfg.seed, kUnlabeledOrder)());
  }

  auto good = snapshot(net);
  double initial = 0.0;
  long above = 0;
  auto diverge = [&](const std::string& why, long t) {
    restore(net, good);
    std::string where;
    if (run_dir) {
      save_checkpoint(net, *run_dir / "last_good.ckpt", t, meta);
      where = "; last good weights in " + (*run_dir / "last_good.ckpt").string();
    }
    throw DivergenceError("training diverged at iteration " + std::to_string(t) + ": " + why + where);
  };

  for (long t = 1; t <= cfg.max_iters; ++t) {
    const double lr = cosine_warmup_lr(t - 1, cfg.max_iters, warmup, cfg.base_lr);
    StepBatches batches;
    const auto li = lab_stream.next_indices();
    batches.labeled = make_labeled_batch(labeled, li, lab_aug, maxnet.resolution, result.norm);
    if (fetch_unlabeled) {
      const auto ui = unl_stream->next_indices();
      batches.unlabeled = make_unlabeled_batch(unlabeled, ui, unl_aug, maxnet.resolution, result.norm);
    }

    StepOutcome step;
    try {
      step = train_step(net, opt, batches, cfg, lr, arch_rng, noise_rng);
    } catch (const NumericError& e) {
      diverge(e.what(), t);
    }
    const double total = step.report.total;
    if (t == 1) initial = total;
    above = total > 10.0 * initial ? above + 1 : 0;
    if (above >= 100) diverge("loss above 10x its initial value for 100 iterations", t);

    result.ledger.update({step.r1, step.r2, minnet}, maxnet, t);

    IterRecord rec;
    rec.t = t;
    rec.lr = lr;
    rec.total = total;
    rec.labeled = step.report.labeled_term;
    rec.fm = step.report.fm_term;
    rec.fm_mask = step.report.fm_mask_count;
    rec.distill_labeled = step.report.distill_labeled;
    rec.distill_unlabeled = step.report.distill_unlabeled;
    rec.distill_terms = step.report.distill_terms;
    rec.r1 = encode(step.r1);
    rec.r2 = encode(step.r2);
    result.log.iters.push_back(rec);
    if (options.on_iter) options.on_iter(rec);

    if (t % 100 == 0) good = snapshot(net);
    if (cfg.eval_interval > 0 && t % cfg.eval_interval == 0) {
      if (options.eval_data) {
        EvalRecord ev;
        ev.t = t;
        ev.min_acc = evaluate_subnet(net, minnet, *options.eval_data, result.norm,
                                     result.calibration, cfg.bn_recalib_batches);
        ev.max_acc = evaluate_subnet(net, maxnet, *options.eval_data, result.norm,
                                     result.calibration, cfg.bn_recalib_batches);
        result.log.evals.push_back(ev);
      }
      if (run_dir) save_checkpoint(net, *run_dir / ("iter_" + std::to_string(t) + ".ckpt"), t, meta);
    }
  }

  if (run_dir) {
    save_checkpoint(net, *run_dir / "supernet.ckpt", cfg.max_iters, meta);
    write_text(*run_dir / "ledger.txt", result.ledger.to_text());
    write_text(*run_dir / "ledger_log.txt", result.ledger.log_text());
    write_text(*run_dir / "train_log.txt", result.log.to_text());
  }
  return result;
}

CalibrationSource run_calibration(Dataset pool, Normalization norm, std::uint64_t seed) {
  return CalibrationSource(std::move(pool), std::move(norm), 32, make_stream(seed, kCalibStream)());
}

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

LoadedRun load_run(const std::filesystem::path& run_dir) {
  auto values = parse_key_values(read_text(run_dir / "config.txt"));
  std::map<std::string, std::string> train_keys;
  for (const auto& [k, v] : values) {
    if (k.rfind("run.", 0) != 0) train_keys[k] = v;
  }
  const TrainConfig cfg = apply_key_values(TrainConfig{}, train_keys);
  auto norm_it = values.find("run.norm");
  if (norm_it == values.end()) throw FormatError(run_dir.string() + ": config.txt lacks run.norm");
  Normalization norm = decode_normalization(norm_it->second);
  Supernet net = load_checkpoint(run_dir / "supernet.ckpt");
  SampleLedger ledger =
      SampleLedger::from_text(read_text(run_dir / "ledger.txt"), read_text(run_dir / "ledger_log.txt"));
  CalibrationSource calib = run_calibration(read_dataset(run_dir / "calib.tds"), norm, cfg.seed);
  return LoadedRun{cfg, std::move(values), std::move(net), std::move(ledger), std::move(norm),
                   std::move(calib)};
}

TrainResult pretrain(Supernet& net, const Dataset& source, TrainConfig cfg,
                     const std::filesystem::path& out, const TrainOptions& options) {
  cfg.variant = LossVariant::kLab;
  TrainOptions opts = options;
  opts.meta["pretrain_source"] = source.name;
  TrainResult r = train(net, source, Dataset{}, cfg, opts);
  auto meta = opts.meta;
  meta["norm"] = encode_normalization(r.norm);
  save_checkpoint(net, out, cfg.max_iters, meta);
  return r;
}

}  // namespace tofa
