// SPDX-License-Identifier: Apache-2.0
//
// prumux-cli: train, prune, benchmark and plan from the command line.
// Results go to stdout; diagnostics go to stderr with a nonzero exit code.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "prumux/bench.hpp"
#include "prumux/error.hpp"
#include "prumux/io.hpp"
#include "prumux/planner.hpp"
#include "prumux/pruner.hpp"
#include "prumux/toytrain.hpp"

namespace {

using namespace prumux;

// Derived seeds keep model, kit and task streams independent.
RngKey model_seed(const RunConfig& c) { return c.seed; }
RngKey kit_seed(const RunConfig& c) { return RngKey{c.seed.seed + 1}; }
RngKey task_seed(const RunConfig& c) { return RngKey{c.seed.seed + 2}; }

struct TrainArgs {
  std::string phase;
  std::size_t n = 1;
  std::string config;
  std::string out;
  std::string init;
  std::string spec;
};

PhaseRecord record_of(Phase phase, const std::vector<EpochStats>& history) {
  PhaseRecord r;
  r.phase = to_string(phase);
  r.epochs = history.size();
  if (!history.empty()) {
    r.final_loss = history.back().loss;
    r.final_accuracy = history.back().accuracy;
  }
  return r;
}

int run_train(const TrainArgs& a) {
  RunConfig cfg = load_run_config(a.config);
  const Phase phase = parse_phase(a.phase);
  cfg.task.width = a.n;
  cfg.train.phase = phase;
  require(cfg.encoder.hidden == cfg.task.dim && cfg.encoder.vocab == cfg.task.vocab &&
              cfg.encoder.classes == cfg.task.classes,
          ErrorKind::kShape, "config encoder dims must match the task (hidden = dim, vocab, classes)");
  const SyntheticTask task = gen_task(task_seed(cfg), cfg.task);

  ModelBundle bundle;
  if (!a.init.empty()) {
    bundle = load_bundle(a.init);
    require(bundle.kit.width == a.n, ErrorKind::kShape, "--n does not match the width of the --init bundle");
    require(!bundle.spec || phase != Phase::kPruneDistill, ErrorKind::kShape, "the --init bundle is already pruned");
  } else {
    require(phase != Phase::kPruneDistill, ErrorKind::kEmptyRequest, "--phase prune needs a teacher via --init");
    bundle.model = make_encoder(cfg.encoder, model_seed(cfg));
    bundle.kit = make_kit(a.n, cfg.task.dim, kit_seed(cfg), cfg.kit);
  }
  bundle.config = cfg;

  switch (phase) {
    case Phase::kRetrievalWarmup: {
      TrainResult r = train_phase1(bundle.kit, bundle.model, task, cfg.train);
      bundle.history.push_back(record_of(phase, r.history));
      bundle.kit = std::move(r.kit);
      bundle.model = std::move(r.model);
      break;
    }
    case Phase::kTask: {
      TrainResult r = train_task(bundle.kit, bundle.model, task, cfg.train);
      bundle.history.push_back(record_of(phase, r.history));
      bundle.kit = std::move(r.kit);
      bundle.model = std::move(r.model);
      break;
    }
    case Phase::kPruneDistill: {
      const ModelShape dense = shape_of(bundle.model);
      const SparsitySpec spec =
          a.spec.empty() ? spec_for_sparsity(dense, cfg.prune_sparsity) : load_spec_request(a.spec, dense);
      DistillResult r = train_prune_distill(bundle.kit, bundle.model, spec, task, cfg.train, cfg.distill);
      bundle.history.push_back(record_of(phase, r.student.history));
      std::cerr << "untuned accuracy " << format_number(r.untuned_accuracy) << "\n";
      bundle.kit = std::move(r.student.kit);
      bundle.model = std::move(r.student.model);
      bundle.spec = spec;
      break;
    }
  }
  save_bundle(a.out, bundle);
  const PhaseRecord& last = bundle.history.back();
  std::cout << "phase,epochs,final_loss,final_accuracy\n"
            << last.phase << "," << last.epochs << "," << format_number(last.final_loss) << ","
            << format_number(last.final_accuracy) << "\n";
  return 0;
}

struct PruneArgs {
  std::string bundle;
  std::string spec;
  std::string out;
};

int run_prune(const PruneArgs& a) {
  ModelBundle b = load_bundle(a.bundle);
  require(!b.spec, ErrorKind::kShape, "bundle is already pruned");
  const ModelShape dense = shape_of(b.model);
  const SparsitySpec spec = load_spec_request(a.spec, dense);
  b.model = compact(b.model, spec);
  b.kit = align_demux(b.kit, spec.hidden);
  b.spec = spec;
  save_bundle(a.out, b);
  std::cout << "sparsity," << format_number(sparsity_of(spec, dense)) << "\n";
  return 0;
}

struct BenchArgs {
  std::string bundle;
  std::string mode = "flops";
  std::size_t reps = 3;
  std::string task = "toy";
  std::size_t seq_len = kDefaultSeqLen;
  std::size_t threads = 1;
};

int run_bench(const BenchArgs& a) {
  const ModelBundle b = load_bundle(a.bundle);
  const ModelShape dense = b.spec ? shape_from_spec(*b.spec, b.model.head_dim) : shape_of(b.model);
  const double sparsity = b.spec ? sparsity_of(*b.spec, dense) : 0.0;
  BenchRun run = make_run(parse_bench_mode(a.mode), b.kit.width, sparsity, a.seq_len, a.reps);
  run.threads = a.threads;
  const BenchResult result = measure(b.model, &b.kit, run);
  const BenchResult base = measure_baseline(dense, run, b.model.classes());
  const double mult = multiplier(result.throughput, base.throughput);
  std::cout << bench_csv_header() << "\n" << bench_csv_row(a.task, result, mult) << "\n";
  if (run.mode == BenchMode::kWall) {
    std::cerr << "wall-clock: reps " << result.reps << ", dispersion " << format_number(result.dispersion)
              << "; baseline reps " << base.reps << ", dispersion " << format_number(base.dispersion) << "\n";
  }
  return 0;
}

struct PlanArgs {
  std::string measurements;
  std::string reference_task;
  std::string model;
  std::string out;
  std::string task;
  double budget = 0.0;
  std::size_t top = 3;
};

int run_plan_fit(const PlanArgs& a) {
  const auto records = load_measurements(a.measurements);
  const PlannerModel m = fit_planner(records, a.reference_task);
  save_planner(a.out, m);
  std::cout << "task,widths,sparsities\n";
  for (const auto& [task, acc] : m.tasks)
    std::cout << task << "," << acc.widths().size() << "," << acc.sparsities().size() << "\n";
  return 0;
}

// The queried task: --task, else the only fitted task, else the reference task.
std::string task_for(const PlannerModel& m, const std::string& requested) {
  if (!requested.empty()) {
    require(m.tasks.count(requested) == 1, ErrorKind::kMissingMeasurement, "task '" + requested + "' is not fitted");
    return requested;
  }
  if (m.tasks.size() == 1) return m.tasks.begin()->first;
  return m.throughput.reference_task;
}

int run_plan_predict(const PlanArgs& a) {
  const PlannerModel m = load_planner(a.model);
  const auto records = load_measurements(a.measurements);
  const std::string task = task_for(m, a.task);
  const auto rows = rows_for(records, task);
  require(!rows.empty(), ErrorKind::kMissingMeasurement, "no measurements for task '" + task + "'");
  const auto top = predict_topk(m.tasks.at(task), m.throughput, rows, PlannerQuery{a.budget, candidates_of(rows), a.top});
  std::cout << "rank,n,sparsity,accuracy,throughput,score\n";
  for (std::size_t i = 0; i < top.size(); ++i) {
    const Prediction& p = top[i];
    std::cout << i + 1 << "," << p.candidate.n << "," << format_number(p.candidate.sparsity) << ","
              << format_number(p.accuracy) << "," << format_number(p.throughput) << "," << format_number(p.score)
              << "\n";
  }
  if (top.empty()) std::cerr << "no candidate meets the budget\n";
  return 0;
}

int run_plan_eval(const PlanArgs& a) {
  const PlannerModel m = load_planner(a.model);
  const auto records = load_measurements(a.measurements);
  std::cout << "task,m_a,m_t,hit_rate\n";
  for (const auto& [task, acc] : m.tasks) {
    if (!a.task.empty() && task != a.task) continue;
    const auto rows = rows_for(records, task);
    std::string m_a = "na";
    try {
      m_a = format_number(loocv_accuracy(acc));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kDegenerate) throw;
      std::cerr << task << ": " << e.what() << "\n";
    }
    const double m_t = eval_throughput_model(m.throughput, rows);
    const auto budgets = default_budgets();
    const BudgetSweep sweep = budget_sweep(acc, m.throughput, rows, candidates_of(rows), budgets);
    std::cout << task << "," << m_a << "," << format_number(m_t) << "," << format_number(sweep.hit_rate) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PruMUX: multiplexed and pruned encoders, throughput benchmarks and the Auto-PruMUX planner"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run one training phase and write a bundle");
  train_cmd->add_option("--phase", train.phase, "warmup, task or prune")->required()
      ->check(CLI::IsMember({"warmup", "task", "prune"}));
  train_cmd->add_option("--n", train.n, "Multiplexing width N")->required()->check(CLI::PositiveNumber);
  train_cmd->add_option("--config", train.config, "Run config JSON")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train.out, "Output bundle")->required();
  train_cmd->add_option("--init", train.init, "Bundle to continue from (the teacher for --phase prune)")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--spec", train.spec, "Spec request for --phase prune (default: config prune_sparsity)")
      ->check(CLI::ExistingFile);

  PruneArgs prune;
  auto* prune_cmd = app.add_subcommand("prune", "Threshold, compact and align a bundle to a spec");
  prune_cmd->add_option("--bundle", prune.bundle, "Dense input bundle")->required()->check(CLI::ExistingFile);
  prune_cmd->add_option("--spec", prune.spec, "Spec request JSON")->required()->check(CLI::ExistingFile);
  prune_cmd->add_option("--out", prune.out, "Output bundle")->required();

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("bench", "Measure throughput and the multiplier over the dense baseline");
  bench_cmd->add_option("--bundle", bench.bundle, "Bundle to measure")->required()->check(CLI::ExistingFile);
  bench_cmd->add_option("--mode", bench.mode, "flops (deterministic) or wall (wall-clock)")
      ->check(CLI::IsMember({"wall", "flops"}));
  bench_cmd->add_option("--reps", bench.reps, "Repetitions (wall mode needs >= 3)")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--task", bench.task, "Task label for the CSV row");
  bench_cmd->add_option("--seq-len", bench.seq_len, "Sequence length")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--threads", bench.threads, "Worker threads in wall mode")->check(CLI::PositiveNumber);

  PlanArgs plan;
  auto* plan_cmd = app.add_subcommand("plan", "Fit, query and evaluate the Auto-PruMUX planner");
  plan_cmd->require_subcommand(1);
  auto* fit_cmd = plan_cmd->add_subcommand("fit", "Fit accuracy models per task and the reference throughput table");
  fit_cmd->add_option("--measurements", plan.measurements, "Measurement CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--reference-task", plan.reference_task, "Task whose multipliers serve every task")->required();
  fit_cmd->add_option("--out", plan.out, "Output model JSON")->required();
  auto* predict_cmd = plan_cmd->add_subcommand("predict", "Rank candidate (N, s) pairs under an accuracy-loss budget");
  predict_cmd->add_option("--model", plan.model, "Planner model JSON")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--measurements", plan.measurements, "Measurement CSV")->required()->check(CLI::ExistingFile);
  predict_cmd->add_option("--budget", plan.budget, "Accuracy-loss budget as a fraction")->required()
      ->check(CLI::NonNegativeNumber);
  predict_cmd->add_option("--top", plan.top, "Number of results")->check(CLI::PositiveNumber);
  predict_cmd->add_option("--task", plan.task, "Task to query");
  auto* eval_cmd = plan_cmd->add_subcommand("eval", "Report M_A, M_T and the budget-sweep hit rate");
  eval_cmd->add_option("--model", plan.model, "Planner model JSON")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--measurements", plan.measurements, "Measurement CSV")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--task", plan.task, "Only this task");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return run_train(train);
    if (*prune_cmd) return run_prune(prune);
    if (*bench_cmd) return run_bench(bench);
    if (*fit_cmd) return run_plan_fit(plan);
    if (*predict_cmd) return run_plan_predict(plan);
    if (*eval_cmd) return run_plan_eval(plan);
  } catch (const prumux::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
