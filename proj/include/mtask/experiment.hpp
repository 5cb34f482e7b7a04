#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mtask/dataset.hpp"
#include "mtask/io.hpp"
#include "mtask/train.hpp"

namespace mtask {

// ---------------------------------------------------------------------------
// Metrics

/// Fraction of rows where (sigmoid(logit[θ_D]) > 0.5) disagrees with y.
/// A logit of exactly 0 counts as a predicted failure.
inline double grasp_error_from_logits(const Tensor& logits, std::span<const int> theta_d, std::span<const int> success) {
  if (logits.rank() != 2 || logits.dim(0) != theta_d.size() || theta_d.size() != success.size()) {
    throw DimensionError("grasp_error: logits/labels size mismatch");
  }
  if (theta_d.empty()) throw ContractError("grasp_error: empty dataset");
  const std::size_t bins = logits.dim(1);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < theta_d.size(); ++i) {
    const bool predicted = sigmoid_value(logits[i * bins + static_cast<std::size_t>(theta_d[i])]) > 0.5;
    if (predicted != (success[i] == 1)) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(theta_d.size());
}

/// Mean over rows of the squared L2 distance between rows of pred and target.
inline double mean_squared_error(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.rank() != 2) throw DimensionError("mse: shape mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double d = pred[i] - target[i];
    total += d * d;
  }
  return total / static_cast<double>(pred.dim(0));
}

namespace detail {

template <class DS, class Fn>
void for_chunks(const DS& ds, std::size_t chunk, Fn fn) {
  if (ds.empty()) throw ContractError("eval: empty dataset");
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    std::vector<std::size_t> idx(std::min(chunk, ds.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    fn(idx);
  }
}

}  // namespace detail

/// Eval-mode classification error on (patch, attempted angle, outcome) records.
inline double eval_grasp(MultiTaskNet& net, const GraspDataset& ds, std::size_t chunk = 100) {
  std::size_t wrong = 0;
  detail::for_chunks(ds, chunk, [&](const std::vector<std::size_t>& idx) {
    auto b = make_grasp_batch(ds, idx);
    auto tape = Tape::no_grad();
    auto logits = net.grasp_forward(tape, b.patches, {Mode::eval, nullptr});
    wrong += static_cast<std::size_t>(std::llround(grasp_error_from_logits(logits, b.theta_d, b.success) * idx.size()));
  });
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

inline double eval_push(MultiTaskNet& net, const PushDataset& ds, std::size_t chunk = 100) {
  double total = 0.0;
  detail::for_chunks(ds, chunk, [&](const std::vector<std::size_t>& idx) {
    auto b = make_push_batch(ds, idx);
    auto tape = Tape::no_grad();
    auto pred = net.push_forward(tape, b.begin, b.end, {Mode::eval, nullptr});
    total += mean_squared_error(pred, b.action) * static_cast<double>(idx.size());
  });
  return total / static_cast<double>(ds.size());
}

inline double eval_poke(MultiTaskNet& net, const PokeDataset& ds, std::size_t chunk = 100) {
  double total = 0.0;
  detail::for_chunks(ds, chunk, [&](const std::vector<std::size_t>& idx) {
    auto b = make_poke_batch(ds, idx);
    auto tape = Tape::no_grad();
    auto pred = net.poke_forward(tape, b.images, {Mode::eval, nullptr});
    total += mean_squared_error(pred, b.response) * static_cast<double>(idx.size());
  });
  return total / static_cast<double>(ds.size());
}

inline std::string_view metric_name(Task t) {
  switch (t) {
    case Task::grasp: return "grasp_error";
    case Task::push: return "push_mse";
    case Task::poke: return "poke_mse";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Plans

struct Ratios {
  double grasp = 0.0;
  double push = 0.0;
  double poke = 0.0;

  void validate() const {
    if (grasp < 0.0 || push < 0.0 || poke < 0.0) throw ContractError("ratios must be nonnegative");
    if (std::abs(grasp + push + poke - 1.0) > 1e-9) throw ContractError("ratios must sum to 1");
  }
  friend bool operator==(const Ratios&, const Ratios&) = default;
};

/// Splits N by largest remainder so the three counts always sum to N.
/// Ties go to the earlier task (grasp, push, poke).
inline TaskMix split_budget(std::size_t n, const Ratios& r) {
  r.validate();
  const std::array<double, 3> share{r.grasp * static_cast<double>(n), r.push * static_cast<double>(n),
                                    r.poke * static_cast<double>(n)};
  std::array<std::size_t, 3> count{};
  std::size_t used = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    count[i] = static_cast<std::size_t>(std::floor(share[i] + 1e-9));
    used += count[i];
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return share[a] - static_cast<double>(count[a]) > share[b] - static_cast<double>(count[b]);
  });
  for (std::size_t k = 0; used < n; ++k, ++used) ++count[order[k % 3]];
  return {count[0], count[1], count[2]};
}

/// Compute budget for one training run.
struct TrainingBudget {
  NetConfig net{};
  RmsPropConfig optim{};
  std::size_t iterations = 3000;
  std::size_t batch_size = 32;
  std::size_t eval_size = 500;
  GenerationOptions generation{};

  static TrainingBudget desk_default() {
    TrainingBudget b;
    b.net.width = WidthScale{1, 4};
    b.optim.step_size = 1500;
    return b;
  }
};

struct Condition {
  std::string name;
  Ratios ratios;
  std::vector<Task> eval_tasks;
};

/// Declarative experiment: every (budget, seed, condition) triple is one run.
struct ExperimentPlan {
  std::string id;
  std::vector<std::size_t> budgets;
  std::vector<std::uint64_t> seeds;
  std::vector<Condition> conditions;
  TrainingBudget training;
  std::size_t jobs = 1;
};

struct RunSpec {
  std::string experiment;
  Condition condition;
  std::uint64_t seed = 0;
  std::size_t budget = 0;
  TaskMix mix;
};

struct MetricRow {
  std::string experiment;
  std::string condition;
  std::uint64_t seed = 0;
  Task task = Task::grasp;
  double value = 0.0;
  std::size_t budget = 0;
  Ratios ratios;
  std::size_t iteration = 0;
  std::uint32_t pool_hash = 0;

  std::string_view metric() const { return metric_name(task); }
};

inline std::vector<RunSpec> expand(const ExperimentPlan& plan) {
  std::vector<RunSpec> runs;
  for (auto n : plan.budgets)
    for (auto s : plan.seeds)
      for (const auto& c : plan.conditions) runs.push_back(RunSpec{plan.id, c, s, n, split_budget(n, c.ratios)});
  return runs;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return splitmix64(splitmix64(seed) ^ tag); }

enum SeedTag : std::uint64_t { kTrainData = 0x7472, kEvalData = 0x6576, kNetInit = 0x6e65 };

/// Novel-object evaluation pool of one task. Depends only on the seed, so
/// every condition of an experiment sees the same pool.
struct EvalPools {
  std::optional<GraspDataset> grasp;
  std::optional<PushDataset> push;
  std::optional<PokeDataset> poke;
  std::map<Task, std::uint32_t> hashes;
};

/// CRC32 over header and payload. The trailer is left out: a message
/// followed by its own CRC always hashes to the same residue.
template <class S>
std::uint32_t dataset_fingerprint(const Dataset<S>& ds) {
  const auto bytes = io::encode_dataset(ds);
  return io::crc32_of(std::span(bytes).first(bytes.size() - 4));
}

inline EvalPools make_eval_pools(std::uint64_t seed, const std::vector<Task>& tasks, const TrainingBudget& b) {
  EvalPools p;
  const auto s = derive_seed(seed, kEvalData);
  for (auto t : tasks) {
    switch (t) {
      case Task::grasp:
        p.grasp = generate_grasp(b.eval_size, s, Pool::novel, b.generation);
        p.hashes[t] = dataset_fingerprint(*p.grasp);
        break;
      case Task::push:
        p.push = generate_push(b.eval_size, s, Pool::novel, b.generation);
        p.hashes[t] = dataset_fingerprint(*p.push);
        break;
      case Task::poke:
        p.poke = generate_poke(b.eval_size, s, Pool::novel, b.generation);
        p.hashes[t] = dataset_fingerprint(*p.poke);
        break;
    }
  }
  return p;
}

inline double evaluate(MultiTaskNet& net, const EvalPools& pools, Task t) {
  switch (t) {
    case Task::grasp: return eval_grasp(net, *pools.grasp);
    case Task::push: return eval_push(net, *pools.push);
    case Task::poke: return eval_poke(net, *pools.poke);
  }
  return 0.0;
}

/// Trains one condition from scratch and reports its eval metrics before
/// (iteration 0) and after training.
inline std::vector<MetricRow> execute_run(const RunSpec& run, const TrainingBudget& b) {
  const auto data_seed = derive_seed(run.seed, kTrainData);
  GraspDataset grasp;
  PushDataset push;
  PokeDataset poke;
  if (run.mix.grasp) grasp = generate_grasp(run.mix.grasp, data_seed, Pool::train, b.generation);
  if (run.mix.push) push = generate_push(run.mix.push, data_seed, Pool::train, b.generation);
  if (run.mix.poke) poke = generate_poke(run.mix.poke, data_seed, Pool::train, b.generation);
  const TrainingData data{run.mix.grasp ? &grasp : nullptr, run.mix.push ? &push : nullptr,
                          run.mix.poke ? &poke : nullptr};

  const auto pools = make_eval_pools(run.seed, run.condition.eval_tasks, b);
  Trainer trainer(b.net, b.optim, derive_seed(run.seed, kNetInit));

  std::vector<MetricRow> rows;
  auto record = [&](std::size_t iteration) {
    for (auto t : run.condition.eval_tasks) {
      rows.push_back(MetricRow{run.experiment, run.condition.name, run.seed, t, evaluate(trainer.net(), pools, t),
                               run.budget, run.condition.ratios, iteration, pools.hashes.at(t)});
    }
  };
  record(0);
  for (std::size_t it = 0; it < b.iterations; ++it) trainer.step(data, b.batch_size);
  record(b.iterations);
  return rows;
}

/// Runs every expanded run on `plan.jobs` worker threads. Rows come back in
/// plan order regardless of completion order.
inline std::vector<MetricRow> run_plan(const ExperimentPlan& plan,
                                       const std::function<void(const RunSpec&, std::size_t, std::size_t)>& progress = {}) {
  const auto runs = expand(plan);
  std::vector<std::vector<MetricRow>> results(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        if (progress) progress(runs[i], i, runs.size());
        results[i] = execute_run(runs[i], plan.training);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(plan.jobs, runs.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  std::vector<MetricRow> rows;
  for (auto& r : results) rows.insert(rows.end(), r.begin(), r.end());
  return rows;
}

inline std::string percent_label(double r) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", r * 100.0);
  return buf;
}

/// Multi-task (50/50 grasp+push) against grasp-only and push-only at equal budget.
inline ExperimentPlan fig5_plan(std::vector<std::size_t> budgets, std::vector<std::uint64_t> seeds, TrainingBudget b) {
  return ExperimentPlan{"fig5",
                        std::move(budgets),
                        std::move(seeds),
                        {{"grasp_only", {1.0, 0.0, 0.0}, {Task::grasp}},
                         {"push_only", {0.0, 1.0, 0.0}, {Task::push}},
                         {"multi_task", {0.5, 0.5, 0.0}, {Task::grasp, Task::push}}},
                        std::move(b)};
}

/// Ratio sweep: fraction r of the budget from the evaluated task, the rest
/// from the other one.
inline ExperimentPlan fig6_plan(std::vector<std::size_t> budgets, std::vector<std::uint64_t> seeds, TrainingBudget b) {
  ExperimentPlan p{"fig6", std::move(budgets), std::move(seeds), {}, std::move(b)};
  for (double r : {0.25, 0.5, 0.75, 1.0}) {
    p.conditions.push_back({"grasp_r" + percent_label(r), {r, 1.0 - r, 0.0}, {Task::grasp}});
  }
  for (double r : {0.25, 0.5, 0.75, 1.0}) {
    p.conditions.push_back({"push_r" + percent_label(r), {1.0 - r, r, 0.0}, {Task::push}});
  }
  return p;
}

inline std::string mix_label(const Ratios& r) {
  return percent_label(r.grasp) + "G+" + percent_label(r.push) + "P+" + percent_label(r.poke) + "K";
}

/// Three-task mixtures, scored on grasping and on pushing.
inline ExperimentPlan fig7_plan(std::vector<std::size_t> budgets, std::vector<std::uint64_t> seeds, TrainingBudget b) {
  ExperimentPlan p{"fig7", std::move(budgets), std::move(seeds), {}, std::move(b)};
  const std::vector<Ratios> grasp_mixes{{1.0, 0.0, 0.0},     {0.5, 0.5, 0.0},     {0.625, 0.25, 0.125},
                                        {0.625, 0.125, 0.25}, {0.5, 0.25, 0.25},   {0.75, 0.125, 0.125}};
  for (const auto& r : grasp_mixes) p.conditions.push_back({"grasp@" + mix_label(r), r, {Task::grasp}});
  for (const auto& g : grasp_mixes) {
    const Ratios r{g.push, g.grasp, g.poke};
    p.conditions.push_back({"push@" + mix_label(r), r, {Task::push}});
  }
  return p;
}

// ---------------------------------------------------------------------------
// CSV (RFC 4180: CRLF line breaks, quoted fields when needed)

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string format_double(double v, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline std::string join_csv(const std::vector<std::string>& fields) {
  std::string line;
  for (std::size_t i = 0; i < fields.size(); ++i) line += (i ? "," : "") + csv_field(fields[i]);
  return line + "\r\n";
}

inline const std::vector<std::string>& metric_csv_header() {
  static const std::vector<std::string> h{"experiment", "condition", "seed", "task", "metric", "value",
                                          "N", "r_grasp", "r_push", "r_poke", "iteration", "pool_hash"};
  return h;
}

inline std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::string out = join_csv(metric_csv_header());
  for (const auto& r : rows) {
    char hash[16];
    std::snprintf(hash, sizeof hash, "%08x", r.pool_hash);
    out += join_csv({r.experiment, r.condition, std::to_string(r.seed), std::string(task_name(r.task)),
                     std::string(r.metric()), format_double(r.value), std::to_string(r.budget),
                     format_double(r.ratios.grasp, 6), format_double(r.ratios.push, 6), format_double(r.ratios.poke, 6),
                     std::to_string(r.iteration), hash});
  }
  return out;
}

/// Minimal RFC 4180 reader (quoted fields, doubled quotes, CRLF or LF).
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\r' || c == '\n') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw ContractError("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Invariant checks and the trend report

/// Every row of one (experiment, seed, task) must carry the same eval-pool
/// hash. Returns human-readable violations (empty when the invariant holds).
inline std::vector<std::string> check_pool_hashes(const std::vector<MetricRow>& rows) {
  std::map<std::tuple<std::string, std::uint64_t, Task>, std::uint32_t> seen;
  std::vector<std::string> bad;
  for (const auto& r : rows) {
    auto key = std::tuple{r.experiment, r.seed, r.task};
    auto [it, inserted] = seen.emplace(key, r.pool_hash);
    if (!inserted && it->second != r.pool_hash) {
      bad.push_back(r.experiment + "/" + r.condition + " seed " + std::to_string(r.seed) + " " +
                    std::string(task_name(r.task)) + ": eval pool differs");
    }
  }
  return bad;
}

/// Each trained row must beat the same run's iteration-0 row.
inline std::vector<std::string> check_beats_untrained(const std::vector<MetricRow>& rows) {
  std::map<std::tuple<std::string, std::string, std::uint64_t, std::size_t, Task>, double> initial;
  for (const auto& r : rows)
    if (r.iteration == 0) initial[{r.experiment, r.condition, r.seed, r.budget, r.task}] = r.value;
  std::vector<std::string> bad;
  for (const auto& r : rows) {
    if (r.iteration == 0) continue;
    auto it = initial.find({r.experiment, r.condition, r.seed, r.budget, r.task});
    if (it == initial.end()) {
      bad.push_back(r.condition + ": no untrained baseline row");
    } else if (!(r.value < it->second)) {
      bad.push_back(r.experiment + "/" + r.condition + " N=" + std::to_string(r.budget) + " seed " +
                    std::to_string(r.seed) + " " + std::string(r.metric()) + ": trained " + format_double(r.value, 6) +
                    " vs untrained " + format_double(it->second, 6));
    }
  }
  return bad;
}

struct BootstrapInterval {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap of the mean (95%, fixed resampling seed).
inline BootstrapInterval bootstrap_mean(const std::vector<double>& xs, std::size_t resamples = 2000,
                                        std::uint64_t seed = 20161) {
  if (xs.empty()) throw ContractError("bootstrap: no samples");
  BootstrapInterval ci;
  ci.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, xs.size() - 1);
  std::vector<double> means(resamples);
  for (auto& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += xs[pick(rng)];
    m = s / static_cast<double>(xs.size());
  }
  std::sort(means.begin(), means.end());
  ci.low = means[static_cast<std::size_t>(std::floor(0.025 * static_cast<double>(resamples - 1)))];
  ci.high = means[static_cast<std::size_t>(std::ceil(0.975 * static_cast<double>(resamples - 1)))];
  return ci;
}

/// One comparison of a condition against its reference condition, as the
/// per-seed difference (condition − reference) of the final metric.
struct TrendRow {
  std::string experiment;
  std::size_t budget = 0;
  Task task = Task::grasp;
  std::string condition;
  std::string reference;
  BootstrapInterval diff;
  std::size_t seeds = 0;
  std::string reference_trend;  // direction reported for the original robot data, if any

  // Lower metric is better for every task.
  std::string sign() const {
    if (diff.mean < 0.0) return "condition_better";
    if (diff.mean > 0.0) return "reference_better";
    return "tie";
  }
  bool interval_excludes_zero() const { return diff.high < 0.0 || diff.low > 0.0; }
};

inline std::string reference_trend_for(const std::string& experiment, Task task, const std::string& condition,
                                       std::size_t budget) {
  if (experiment == "fig5") return budget >= 1000 ? "condition_better" : "reference_better";
  if (experiment == "fig6") {
    if (task == Task::grasp && condition == "grasp_r50") return "condition_better (best ratio)";
    if (task == Task::push && condition == "push_r75") return "condition_better (best ratio)";
  }
  if (experiment == "fig7" && task == Task::grasp && condition.find("K") != std::string::npos &&
      condition.find("+0K") == std::string::npos) {
    return "condition_better";
  }
  return "";
}

/// Reference condition per experiment and evaluated task.
inline std::optional<std::string> reference_condition(const std::string& experiment, Task task,
                                                      const std::vector<std::string>& conditions) {
  auto has = [&](const std::string& c) { return std::find(conditions.begin(), conditions.end(), c) != conditions.end(); };
  std::string ref;
  if (experiment == "fig5") ref = task == Task::grasp ? "grasp_only" : "push_only";
  if (experiment == "fig6") ref = task == Task::grasp ? "grasp_r100" : "push_r100";
  if (experiment == "fig7") ref = task == Task::grasp ? "grasp@100G+0P+0K" : "push@0G+100P+0K";
  if (!ref.empty() && has(ref)) return ref;
  return std::nullopt;
}

/// Compares every trained condition with the reference condition of its
/// experiment at equal budget, over the seeds both have in common.
inline std::vector<TrendRow> trend_report(const std::vector<MetricRow>& rows) {
  using Key = std::tuple<std::string, std::size_t, Task, std::string>;
  std::map<Key, std::map<std::uint64_t, double>> finals;
  std::map<std::string, std::vector<std::string>> conditions;
  for (const auto& r : rows) {
    if (r.iteration == 0) continue;
    finals[{r.experiment, r.budget, r.task, r.condition}][r.seed] = r.value;
    auto& cs = conditions[r.experiment];
    if (std::find(cs.begin(), cs.end(), r.condition) == cs.end()) cs.push_back(r.condition);
  }
  std::vector<TrendRow> out;
  for (const auto& [key, by_seed] : finals) {
    const auto& [exp, budget, task, cond] = key;
    const auto ref = reference_condition(exp, task, conditions[exp]);
    if (!ref || *ref == cond) continue;
    auto rit = finals.find({exp, budget, task, *ref});
    if (rit == finals.end()) continue;
    std::vector<double> diffs;
    for (const auto& [seed, v] : by_seed) {
      if (auto s = rit->second.find(seed); s != rit->second.end()) diffs.push_back(v - s->second);
    }
    if (diffs.empty()) continue;
    out.push_back(TrendRow{exp, budget, task, cond, *ref, bootstrap_mean(diffs), diffs.size(),
                           reference_trend_for(exp, task, cond, budget)});
  }
  return out;
}

inline std::string trend_to_csv(const std::vector<TrendRow>& rows) {
  std::string out = join_csv({"experiment", "N", "task", "metric", "condition", "reference", "mean_diff", "ci_low",
                              "ci_high", "sign", "ci_excludes_zero", "n_seeds", "reference_trend"});
  for (const auto& t : rows) {
    out += join_csv({t.experiment, std::to_string(t.budget), std::string(task_name(t.task)),
                     std::string(metric_name(t.task)), t.condition, t.reference, format_double(t.diff.mean),
                     format_double(t.diff.low), format_double(t.diff.high), t.sign(),
                     t.interval_excludes_zero() ? "true" : "false", std::to_string(t.seeds), t.reference_trend});
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, std::string_view text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io::DataError("cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Flat key=value configuration files

/// Parses `key = value` lines; '#' starts a comment, blank lines are skipped.
inline std::map<std::string, std::string> parse_config(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ContractError("config line " + std::to_string(lineno) + ": expected key=value");
    auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ContractError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

/// Settings for the `train` subcommand.
struct TrainPlan {
  TaskMix mix{1000, 1000, 0};
  std::uint64_t seed = 1;
  std::optional<std::filesystem::path> data_dir;
  TrainingBudget budget = TrainingBudget::desk_default();
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 0;
};

inline TrainPlan parse_train_plan(std::string_view text) {
  TrainPlan p;
  auto kv = parse_config(text);
  auto take_u = [&](const char* k, auto& dst) {
    if (auto it = kv.find(k); it != kv.end()) {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument(k);
        dst = static_cast<std::remove_reference_t<decltype(dst)>>(v);
      } catch (const std::logic_error&) {
        throw ContractError(std::string("config: '") + k + "' must be a nonnegative integer");
      }
      kv.erase(it);
    }
  };
  auto take_d = [&](const char* k, double& dst) {
    if (auto it = kv.find(k); it != kv.end()) {
      try {
        dst = std::stod(it->second);
      } catch (const std::logic_error&) {
        throw ContractError(std::string("config: '") + k + "' must be a number");
      }
      kv.erase(it);
    }
  };
  take_u("n_grasp", p.mix.grasp);
  take_u("n_push", p.mix.push);
  take_u("n_poke", p.mix.poke);
  take_u("seed", p.seed);
  take_u("iterations", p.budget.iterations);
  take_u("batch_size", p.budget.batch_size);
  take_u("eval_size", p.budget.eval_size);
  take_u("lr_step", p.budget.optim.step_size);
  take_u("log_every", p.log_every);
  take_u("checkpoint_every", p.checkpoint_every);
  take_u("objects_per_set", p.budget.generation.objects_per_set);
  take_d("learning_rate", p.budget.optim.learning_rate);
  take_d("momentum", p.budget.optim.momentum);
  take_d("decay", p.budget.optim.decay);
  take_d("dropout", p.budget.net.dropout);
  take_d("poke_noise", p.budget.generation.world.poke_noise);
  if (auto it = kv.find("width_scale"); it != kv.end()) {
    p.budget.net.width = WidthScale::parse(it->second);
    kv.erase(it);
  }
  if (auto it = kv.find("balanced"); it != kv.end()) {
    if (it->second != "true" && it->second != "false") throw ContractError("config: 'balanced' must be true or false");
    p.budget.generation.world.balanced = it->second == "true";
    kv.erase(it);
  }
  if (auto it = kv.find("data_dir"); it != kv.end()) {
    p.data_dir = it->second;
    kv.erase(it);
  }
  if (!kv.empty()) throw ContractError("config: unknown key '" + kv.begin()->first + "'");
  if (p.budget.batch_size == 0) throw ContractError("config: batch_size must be positive");
  p.budget.net.validate();
  return p;
}

}  // namespace mtask
