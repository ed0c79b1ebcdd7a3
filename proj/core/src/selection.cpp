// SPDX-License-Identifier: Apache-2.0
#include "tofa/selection.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "tofa/checkpoint.hpp"
#include "tofa/error.hpp"
#include "tofa/runtime.hpp"

namespace tofa {

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::kFlops: return "flops";
    case Metric::kParams: return "params";
    case Metric::kLatency: return "latency";
  }
  return "?";
}

std::string_view to_string(SelectionRule r) {
  switch (r) {
    case SelectionRule::kLastSampled: return "last_sampled";
    case SelectionRule::kFirstSampled: return "first_sampled";
    case SelectionRule::kClosestToBudget: return "closest_to_budget";
    case SelectionRule::kValidation: return "validation";
  }
  return "?";
}

Metric parse_metric(std::string_view text) {
  for (Metric m : {Metric::kFlops, Metric::kParams, Metric::kLatency}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown metric '" + std::string(text) + "' (flops, params, latency)");
}

SelectionRule parse_rule(std::string_view text) {
  for (SelectionRule r : {SelectionRule::kLastSampled, SelectionRule::kFirstSampled,
                          SelectionRule::kClosestToBudget, SelectionRule::kValidation}) {
    if (text == to_string(r)) return r;
  }
  throw ConfigError("unknown rule '" + std::string(text) +
                    "' (last_sampled, first_sampled, closest_to_budget, validation)");
}

CostFn make_cost(Metric metric, Supernet& net) {
  const SearchSpace& space = net.space();
  const int classes = net.num_classes();
  switch (metric) {
    case Metric::kFlops:
      return [&space, classes](const SubnetConfig& c) {
        return static_cast<double>(flops(space, c, classes));
      };
    case Metric::kParams:
      return [&space, classes](const SubnetConfig& c) {
        return static_cast<double>(param_count(space, c, classes));
      };
    case Metric::kLatency: {
      auto cache = std::make_shared<std::map<std::string, double>>();
      return [&net, cache](const SubnetConfig& c) {
        const auto key = encode(c);
        auto it = cache->find(key);
        if (it != cache->end()) return it->second;
        const double ms = measure_latency(materialize(net, c), 3, 15).median_ms;
        (*cache)[key] = ms;
        return ms;
      };
    }
  }
  throw ConfigError("unknown metric");
}

Selected select_fixed(const SampleLedger& ledger, const SearchSpace& space, const CostFn& cost,
                      double budget, SelectionRule rule, bool exclude_anchors) {
  if (rule == SelectionRule::kValidation) {
    throw ConfigError("select_fixed does not implement the validation rule");
  }
  if (ledger.empty()) throw ContractError("select_fixed on an empty ledger");
  std::optional<Selected> best;
  double cheapest = std::numeric_limits<double>::infinity();
  auto better = [rule](const Selected& a, const Selected& b) {
    // true when a should replace b
    if (rule == SelectionRule::kLastSampled && a.s != b.s) return a.s > b.s;
    if (rule == SelectionRule::kFirstSampled && a.s != b.s) return a.s < b.s;
    if (a.cost != b.cost) return a.cost > b.cost;
    return a.key < b.key;
  };
  for (const auto& [key, entry] : ledger.entries()) {
    if (exclude_anchors && ledger.is_anchor(key)) continue;
    Selected cand;
    cand.config = decode(space, key);
    cand.key = key;
    cand.cost = cost(cand.config);
    cand.s = entry.s;
    cheapest = std::min(cheapest, cand.cost);
    if (cand.cost > budget) continue;
    if (!best || better(cand, *best)) best = std::move(cand);
  }
  if (!best) {
    std::ostringstream os;
    os << "no sampled subnet fits budget " << budget;
    if (std::isfinite(cheapest)) os << "; the cheapest available costs " << cheapest;
    else os << "; no eligible subnets in the ledger";
    throw InfeasibleBudget(os.str(), cheapest);
  }
  return *best;
}

namespace {

// Runs fn(i) for i in [0, n) on up to num_threads() workers.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(num_threads()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

ValidationSelection select_by_validation(Supernet& net, const Dataset& val,
                                         const Normalization& norm,
                                         const CalibrationSource& calib, int recalib_batches,
                                         const CostFn& cost, const std::vector<double>& budgets,
                                         int n_candidates, Rng& rng) {
  if (n_candidates < 1) throw ContractError("need at least one candidate");
  validate_dataset(val);
  ValidationSelection out;
  std::set<std::string> seen;
  for (int i = 0; i < n_candidates; ++i) {
    Candidate c;
    c.config = sample_uniform(net.space(), rng);
    c.key = encode(c.config);
    if (!seen.insert(c.key).second) continue;
    c.cost = cost(c.config);
    out.candidates.push_back(std::move(c));
  }

  // Recalibration mutates the shared supernet, so it runs serially; the
  // materialized copies are evaluated concurrently.
  std::vector<StandaloneNet> nets;
  nets.reserve(out.candidates.size());
  for (const auto& c : out.candidates) {
    bn_recalibrate(net, c.config, calib.batches(c.config.resolution), recalib_batches);
    nets.push_back(materialize(net, c.config));
  }
  parallel_for(nets.size(), [&](std::size_t i) {
    out.candidates[i].accuracy = evaluate_standalone(nets[i], val, norm);
  });

  for (double budget : budgets) {
    std::optional<Candidate> best;
    for (const auto& c : out.candidates) {
      if (c.cost > budget) continue;
      if (!best || c.accuracy > best->accuracy ||
          (c.accuracy == best->accuracy &&
           (c.cost > best->cost || (c.cost == best->cost && c.key < best->key)))) {
        best = c;
      }
    }
    out.selected.push_back(best);
  }
  return out;
}

LatencyStats measure_latency(const StandaloneNet& net, int warmup, int reps) {
  if (reps < 3) throw ContractError("measure_latency needs at least 3 repetitions");
  if (warmup < 0) throw ContractError("warmup must be >= 0");
  NoGradGuard guard;
  Rng rng = make_stream(0, 0x1a7);
  const int r = net.resolution();
  Tensor x({1, net.input_channels(), r, r});
  for (auto& v : x.data()) v = static_cast<float>(normal(rng));
  for (int i = 0; i < warmup; ++i) (void)net.forward(x);
  LatencyStats stats;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)net.forward(x);
    const auto t1 = std::chrono::steady_clock::now();
    stats.samples_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  auto sorted = stats.samples_ms;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  stats.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.9 * static_cast<double>(n)));
  stats.p90_ms = sorted[std::max<std::size_t>(rank, 1) - 1];
  return stats;
}

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::vector<PaletteEntry> build_palette(Supernet& net, const SampleLedger& ledger,
                                        const Normalization& norm, const CalibrationSource& calib,
                                        const PaletteRequest& request,
                                        const std::optional<std::filesystem::path>& out_dir,
                                        std::vector<std::string>* infeasible) {
  const SearchSpace& space = net.space();
  const CostFn cost = make_cost(request.metric, net);
  std::vector<std::optional<SubnetConfig>> picks;
  if (request.rule == SelectionRule::kValidation) {
    if (!request.val) throw ConfigError("the validation rule needs validation data");
    Rng rng = make_stream(request.seed, 0x5e1);
    auto vs = select_by_validation(net, *request.val, norm, calib, request.recalib_batches, cost,
                                   request.budgets, request.candidates, rng);
    for (std::size_t i = 0; i < request.budgets.size(); ++i) {
      if (vs.selected[i]) {
        picks.emplace_back(vs.selected[i]->config);
      } else {
        picks.emplace_back();
        if (infeasible) {
          infeasible->push_back("budget " + fmt(request.budgets[i]) + ": no feasible candidate");
        }
      }
    }
  } else {
    for (double b : request.budgets) {
      try {
        picks.emplace_back(
            select_fixed(ledger, space, cost, b, request.rule, request.exclude_anchors).config);
      } catch (const InfeasibleBudget& e) {
        picks.emplace_back();
        if (infeasible) infeasible->push_back("budget " + fmt(b) + ": " + e.what());
      }
    }
  }

  std::vector<PaletteEntry> entries;
  if (out_dir) std::filesystem::create_directories(*out_dir);
  for (std::size_t i = 0; i < picks.size(); ++i) {
    if (!picks[i]) continue;
    PaletteEntry e;
    e.budget = request.budgets[i];
    e.config = *picks[i];
    e.key = encode(e.config);
    e.flops = flops(space, e.config, net.num_classes());
    e.params = param_count(space, e.config, net.num_classes());
    e.s = ledger.index(e.key);
    bn_recalibrate(net, e.config, calib.batches(e.config.resolution), request.recalib_batches);
    StandaloneNet standalone = materialize(net, e.config);
    if (request.eval_data) e.accuracy = evaluate_standalone(standalone, *request.eval_data, norm);
    if (out_dir) {
      const auto dir = *out_dir / ("budget_" + std::to_string(i));
      std::filesystem::create_directories(dir);
      e.checkpoint = dir / "model.ckpt";
      save_standalone(standalone, space, e.checkpoint, {{"norm", encode_normalization(norm)}});
      write_file(dir / "config.txt", e.key + "\n");
      std::string metrics = "budget=" + fmt(e.budget) + "\nmetric=" + std::string(to_string(request.metric)) +
                            "\nflops=" + std::to_string(e.flops) + "\nparams=" + std::to_string(e.params) +
                            "\ns=" + std::to_string(e.s) + "\n";
      if (e.accuracy) metrics += "accuracy=" + fmt(*e.accuracy) + "\n";
      write_file(dir / "metrics.txt", metrics);
    }
    entries.push_back(std::move(e));
  }
  if (out_dir) write_file(*out_dir / "summary.txt", palette_summary(entries));
  return entries;
}

std::string palette_summary(const std::vector<PaletteEntry>& entries) {
  std::string out = "# budget\tkey\tflops\tparams\ts\taccuracy\n";
  for (const auto& e : entries) {
    out += fmt(e.budget) + '\t' + e.key + '\t' + std::to_string(e.flops) + '\t' +
           std::to_string(e.params) + '\t' + std::to_string(e.s) + '\t' +
           (e.accuracy ? fmt(*e.accuracy) : std::string("-")) + '\n';
  }
  return out;
}

}  // namespace tofa
