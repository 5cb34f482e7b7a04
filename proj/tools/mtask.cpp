// Command-line front end: dataset generation, training, evaluation and the
// comparison experiments.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mtask/experiment.hpp"

namespace fs = std::filesystem;
using namespace mtask;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) out.push_back(item);
  return out;
}

Ratios parse_mix(const std::string& text) {
  const auto parts = split(text, ',');
  if (parts.size() != 3) throw ContractError("--task-mix expects three comma-separated fractions G,P,K");
  Ratios r{std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2])};
  r.validate();
  return r;
}

template <class T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  for (const auto& p : split(text, ',')) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(p, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (p.empty() || used != p.size()) throw ContractError(std::string(what) + ": '" + p + "' is not an integer");
    out.push_back(static_cast<T>(v));
  }
  if (out.empty()) throw ContractError(std::string(what) + ": empty list");
  return out;
}

std::string read_text(const fs::path& p) {
  const auto bytes = io::read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

std::string losses_csv_line(std::uint64_t it, const BatchLosses& l) {
  auto f = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  return join_csv({std::to_string(it), f(l.grasp), f(l.push), f(l.poke)});
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string mix = "1,0,0";
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string pool = "train";
  std::string out;
  bool unbalanced = false;
};

int cmd_gen(const GenArgs& a) {
  GenerationOptions opt;
  opt.world.balanced = !a.unbalanced;
  const auto mix = split_budget(a.n, parse_mix(a.mix));
  const Pool pool = a.pool == "novel" ? Pool::novel : Pool::train;
  const auto bundle = build_dataset(mix, a.seed, pool, opt);
  for (const auto& p : io::save_bundle(a.out, bundle)) std::cout << "wrote " << p.string() << "\n";
  return kOk;
}

struct TrainArgs {
  std::string plan;
  std::string out;
  std::string resume;
};

int cmd_train(const TrainArgs& a) {
  const auto plan = parse_train_plan(read_text(a.plan));
  const fs::path out(a.out);
  fs::create_directories(out);

  DatasetBundle data;
  if (plan.data_dir) {
    data = io::load_bundle(*plan.data_dir);
  } else {
    data = build_dataset(plan.mix, derive_seed(plan.seed, kTrainData), Pool::train, plan.budget.generation);
  }
  const TrainingData td{data.grasp ? &*data.grasp : nullptr, data.push ? &*data.push : nullptr,
                        data.poke ? &*data.poke : nullptr};
  if (!td.grasp && !td.push && !td.poke) throw ContractError("train: no training data");

  Trainer trainer = a.resume.empty() ? Trainer(plan.budget.net, plan.budget.optim, derive_seed(plan.seed, kNetInit))
                                     : io::load_checkpoint(a.resume);

  std::string log = join_csv({"iteration", "grasp_loss", "push_loss", "poke_loss"});
  const auto t0 = std::chrono::steady_clock::now();
  while (trainer.iteration() < plan.budget.iterations) {
    const auto it = trainer.iteration();
    const auto losses = trainer.step(td, plan.budget.batch_size);
    log += losses_csv_line(it, losses);
    if (plan.log_every && (it % plan.log_every == 0 || it + 1 == plan.budget.iterations)) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      auto line = losses_csv_line(it, losses);
      line.erase(line.find_last_not_of("\r\n") + 1);
      std::fprintf(stderr, "iter %s  (%.1fs)\n", line.c_str(), secs);
    }
    if (plan.checkpoint_every && trainer.iteration() % plan.checkpoint_every == 0) {
      io::save_checkpoint(out / ("checkpoint_" + std::to_string(trainer.iteration()) + ".mtck"), trainer);
    }
  }
  io::save_checkpoint(out / "model.mtck", trainer);
  write_text(out / "train_log.csv", log);

  if (plan.budget.eval_size > 0) {
    std::vector<Task> tasks;
    if (td.grasp) tasks.push_back(Task::grasp);
    if (td.push) tasks.push_back(Task::push);
    if (td.poke) tasks.push_back(Task::poke);
    const auto pools = make_eval_pools(plan.seed, tasks, plan.budget);
    std::vector<MetricRow> rows;
    for (auto t : tasks) {
      rows.push_back(MetricRow{"train", "plan", plan.seed, t, evaluate(trainer.net(), pools, t), (td.grasp ? td.grasp->size() : 0) + (td.push ? td.push->size() : 0) + (td.poke ? td.poke->size() : 0),
                               Ratios{}, trainer.iteration(), pools.hashes.at(t)});
      std::cout << metric_name(t) << " " << format_double(rows.back().value, 6) << "\n";
    }
    write_text(out / "metrics.csv", metrics_to_csv(rows));
  }
  std::cout << "wrote " << (out / "model.mtck").string() << "\n";
  return kOk;
}

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
};

int cmd_eval(const EvalArgs& a) {
  Trainer trainer = io::load_checkpoint(a.checkpoint);
  const auto bytes = io::read_file(a.dataset);
  const Task task = io::peek_dataset_task(bytes);
  double value = 0.0;
  std::size_t n = 0;
  switch (task) {
    case Task::grasp: {
      auto ds = io::decode_dataset<GraspSample>(bytes);
      value = eval_grasp(trainer.net(), ds);
      n = ds.size();
      break;
    }
    case Task::push: {
      auto ds = io::decode_dataset<PushSample>(bytes);
      value = eval_push(trainer.net(), ds);
      n = ds.size();
      break;
    }
    case Task::poke: {
      auto ds = io::decode_dataset<PokeSample>(bytes);
      value = eval_poke(trainer.net(), ds);
      n = ds.size();
      break;
    }
  }
  std::cout << metric_name(task) << " " << format_double(value, 10) << " N=" << n << "\n";
  return kOk;
}

struct ExperimentArgs {
  std::string which;
  double scale = 1.0;
  std::string seeds = "1,2,3";
  std::string out;
  std::string ns;
  std::size_t iterations = 3000;
  std::string width = "1/4";
  std::size_t batch = 32;
  std::size_t lr_step = 1500;
  std::size_t eval_size = 500;
  std::size_t jobs = 1;
};

fs::path trend_path(const fs::path& csv) {
  auto p = csv;
  p.replace_filename(csv.stem().string() + "_trend.csv");
  return p;
}

int cmd_experiment(const ExperimentArgs& a) {
  if (!(a.scale > 0.0)) throw ContractError("--scale must be positive");
  std::vector<std::size_t> base;
  if (!a.ns.empty()) {
    base = parse_list<std::size_t>(a.ns, "--ns");
  } else if (a.which == "fig5") {
    base = {500, 1000, 2000, 5000};
  } else if (a.which == "fig6") {
    base = {5000, 20000};
  } else {
    base = {4000};
  }
  std::vector<std::size_t> ns;
  for (auto n : base) ns.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(n * a.scale))));

  TrainingBudget b = TrainingBudget::desk_default();
  b.iterations = a.iterations;
  b.net.width = WidthScale::parse(a.width);
  b.batch_size = a.batch;
  b.optim.step_size = a.lr_step;
  b.eval_size = a.eval_size;
  b.net.validate();
  if (b.batch_size == 0 || b.eval_size == 0) throw ContractError("--batch and --eval-size must be positive");

  const auto seeds = parse_list<std::uint64_t>(a.seeds, "--seeds");
  ExperimentPlan plan = a.which == "fig5"   ? fig5_plan(ns, seeds, b)
                        : a.which == "fig6" ? fig6_plan(ns, seeds, b)
                                            : fig7_plan(ns, seeds, b);
  plan.jobs = a.jobs;

  const auto t0 = std::chrono::steady_clock::now();
  const auto rows = run_plan(plan, [&](const RunSpec& r, std::size_t i, std::size_t total) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[%zu/%zu] %s N=%zu seed=%llu (%.0fs)\n", i + 1, total, r.condition.name.c_str(), r.budget,
                 static_cast<unsigned long long>(r.seed), secs);
  });
  write_text(a.out, metrics_to_csv(rows));
  write_text(trend_path(a.out), trend_to_csv(trend_report(rows)));

  for (const auto& v : check_pool_hashes(rows)) std::fprintf(stderr, "pool-hash violation: %s\n", v.c_str());
  for (const auto& v : check_beats_untrained(rows)) std::fprintf(stderr, "sanity floor violation: %s\n", v.c_str());
  std::cout << "wrote " << a.out << " and " << trend_path(a.out).string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task grasp/push/poke learning on a synthetic tabletop"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate dataset files");
  g->add_option("--task-mix", gen.mix, "Fractions G,P,K summing to 1")->required();
  g->add_option("--n", gen.n, "Total number of records")->required();
  g->add_option("--seed", gen.seed, "Dataset seed")->required();
  g->add_option("--pool", gen.pool, "Object pool")->check(CLI::IsMember({"train", "novel"}));
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_flag("--unbalanced", gen.unbalanced, "Keep the natural grasp label rate");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train one model from a plan file");
  t->add_option("--plan", train.plan, "key=value plan file")->required();
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--resume", train.resume, "Checkpoint to continue from");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset file");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--dataset", eval.dataset)->required();

  ExperimentArgs ex;
  auto* x = app.add_subcommand("experiment", "Run a comparison experiment");
  x->add_option("which", ex.which)->required()->check(CLI::IsMember({"fig5", "fig6", "fig7"}));
  x->add_option("--scale", ex.scale, "Multiplier on the data budgets");
  x->add_option("--seeds", ex.seeds, "Comma-separated seeds");
  x->add_option("--out", ex.out, "Metrics CSV path")->required();
  x->add_option("--ns", ex.ns, "Comma-separated budgets (before --scale)");
  x->add_option("--iterations", ex.iterations, "Joint steps per run");
  x->add_option("--width", ex.width, "Width scale, e.g. 1/4");
  x->add_option("--batch", ex.batch, "Per-task batch size");
  x->add_option("--lr-step", ex.lr_step, "Learning-rate decay interval");
  x->add_option("--eval-size", ex.eval_size, "Records per novel-object eval pool");
  x->add_option("--jobs", ex.jobs, "Parallel runs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(eval);
    if (*x) return cmd_experiment(ex);
  } catch (const NumericError& err) {
    std::cerr << "numeric failure: " << err.what() << "\n";
    return kNumeric;
  } catch (const io::DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
