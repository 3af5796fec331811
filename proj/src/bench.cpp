// SPDX-License-Identifier: Apache-2.0
#include "prumux/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>
#include <vector>

#include "prumux/error.hpp"
#include "prumux/io.hpp"
#include "prumux/pruner.hpp"

namespace prumux {

BenchMode parse_bench_mode(const std::string& name) {
  if (name == "wall") return BenchMode::kWall;
  if (name == "flops") return BenchMode::kFlops;
  fail(ErrorKind::kParse, "unknown bench mode '" + name + "' (expected wall or flops)");
}

std::string to_string(BenchMode mode) { return mode == BenchMode::kWall ? "wall" : "flops"; }

MuxShape mux_shape_of(const MuxKit& kit) {
  return {kit.width, kit.input_dim(), kit.demux_in_dim(), kit.demux_out_dim(), kit.kind};
}

BenchRun make_run(BenchMode mode, std::size_t width, double sparsity, std::size_t seq_len, std::size_t reps) {
  BenchRun run;
  run.mode = mode;
  run.width = width;
  run.sparsity = sparsity;
  run.batch = kBatchPerWidth * width;
  run.seq_len = seq_len;
  run.reps = reps;
  return run;
}

void validate(const BenchRun& run) {
  require(run.width >= 1, ErrorKind::kDomain, "bench width must be >= 1");
  require(run.batch == kBatchPerWidth * run.width, ErrorKind::kDomain, "bench batch must be 128*N");
  require(run.seq_len >= 1, ErrorKind::kDomain, "sequence length must be >= 1");
  require(run.mode == BenchMode::kFlops || run.reps >= 3, ErrorKind::kDomain, "wall mode needs >= 3 repetitions");
  require(run.threads >= 1, ErrorKind::kDomain, "threads must be >= 1");
}

double flop_count(const ModelShape& shape, const SparsitySpec* spec, const MuxShape& mux, std::size_t seq_len) {
  if (spec != nullptr) check_matches(*spec, shape);
  const double t = static_cast<double>(seq_len);
  const double d = static_cast<double>(spec ? count_live(spec->hidden) : shape.hidden);
  const double dh = static_cast<double>(shape.head_dim);
  double per_token = 0.0;
  for (std::size_t l = 0; l < shape.layers.size(); ++l) {
    const LayerShape& ls = shape.layers[l];
    if (ls.has_mha && (spec == nullptr || spec->mha[l])) {
      const double a = dh * static_cast<double>(spec ? count_live(spec->heads[l]) : ls.heads);
      per_token += 8.0 * d * a + 4.0 * t * a;
    }
    if (ls.has_ffn && (spec == nullptr || spec->ffn[l])) {
      const double f = static_cast<double>(spec ? count_live(spec->intermediate[l]) : ls.ff);
      per_token += 4.0 * d * f;
    }
  }
  double total = per_token * t;
  if (mux.width > 0) {
    const double n = static_cast<double>(mux.width);
    const double in = static_cast<double>(mux.demux_in);
    const double out = static_cast<double>(mux.demux_out);
    total += t * 2.0 * n * static_cast<double>(mux.input_dim);
    if (mux.kind == DemuxKind::kAffine)
      total += 2.0 * n * in * out;
    else
      total += t * 2.0 * n * (in * in + in * out);
  }
  return total;
}

double mux_overhead_fraction(const ModelShape& shape, const MuxShape& mux, std::size_t seq_len) {
  const double with = flop_count(shape, nullptr, mux, seq_len);
  const double without = flop_count(shape, nullptr, MuxShape{}, seq_len);
  return with == 0.0 ? 0.0 : (with - without) / with;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Processes `passes` multiplexed passes; returns a checksum so the work cannot be elided.
double run_passes(const EncoderModel& model, const MuxKit* kit, const std::vector<Matrix>& inputs,
                  std::size_t first, std::size_t last) {
  const std::size_t width = kit ? kit->width : 1;
  double checksum = 0.0;
  for (std::size_t p = first; p < last; ++p) {
    Matrix x;
    if (kit != nullptr) {
      x = multiplex(*kit, std::span<const Matrix>(inputs.data() + p * width, width));
    } else {
      x = inputs[p];
    }
    const LayerTrace trace = encode(model, x);
    for (std::size_t i = 0; i < width; ++i) {
      Vector pooled;
      if (kit == nullptr) {
        pooled = trace.pooled;
      } else if (kit->kind == DemuxKind::kAffine) {
        pooled = kit->demux[i].first.apply(trace.pooled);
      } else {
        pooled = mean_pool(demultiplex(*kit, trace.final_state(), i));
      }
      checksum += softmax(classifier_logits(model, pooled))[0];
    }
  }
  return checksum;
}

}  // namespace

BenchResult measure(const EncoderModel& model, const MuxKit* kit, const BenchRun& run) {
  validate(run);
  const std::size_t width = kit ? kit->width : 1;
  require(width == run.width, ErrorKind::kShape, "bench run width != kit width");
  if (kit != nullptr) {
    require(kit->input_dim() == model.hidden && kit->demux_in_dim() == model.hidden, ErrorKind::kShape,
            "kit dimensions do not match the model");
  }
  BenchResult result;
  result.run = run;
  if (run.mode == BenchMode::kFlops) {
    const double flops = flop_count(shape_of(model), nullptr, kit ? mux_shape_of(*kit) : MuxShape{}, run.seq_len);
    require(flops > 0.0, ErrorKind::kInsufficientWork, "configuration performs no work");
    result.throughput = static_cast<double>(width) / (flops * 1e-9);
    result.reps = 1;
    result.dispersion = 1.0;
    return result;
  }

  const std::size_t d = kit ? kit->input_dim() : model.hidden;
  Rng rng(RngKey{0x5eedULL + run.width});
  std::vector<Matrix> inputs;
  inputs.reserve(run.batch);
  for (std::size_t b = 0; b < run.batch; ++b) inputs.push_back(gaussian_matrix(rng, run.seq_len, d, 1.0));
  const std::size_t passes = run.batch / width;

  const auto timed = [&]() {
    const auto t0 = std::chrono::steady_clock::now();
    double sink = 0.0;
    if (run.threads <= 1) {
      sink = run_passes(model, kit, inputs, 0, passes);
    } else {
      std::vector<double> partial(run.threads, 0.0);
      std::vector<std::jthread> workers;
      const std::size_t chunk = (passes + run.threads - 1) / run.threads;
      for (std::size_t w = 0; w < run.threads; ++w) {
        const std::size_t first = std::min(passes, w * chunk);
        const std::size_t last = std::min(passes, first + chunk);
        workers.emplace_back([&, w, first, last] { partial[w] = run_passes(model, kit, inputs, first, last); });
      }
      workers.clear();
      for (double p : partial) sink += p;
    }
    const auto t1 = std::chrono::steady_clock::now();
    require(std::isfinite(sink), ErrorKind::kDomain, "benchmark produced non-finite outputs");
    return std::chrono::duration<double>(t1 - t0).count();
  };

  for (std::size_t w = 0; w < run.warmup; ++w) timed();
  const double tick = std::chrono::duration<double>(std::chrono::steady_clock::duration(1)).count();
  const double min_elapsed = std::max(1000.0 * tick, 1e-6);
  std::vector<double> rates;
  for (std::size_t r = 0; r < run.reps; ++r) {
    const double elapsed = timed();
    require(elapsed >= min_elapsed, ErrorKind::kInsufficientWork,
            "a repetition took " + std::to_string(elapsed) + " s, below the timer floor; increase the workload");
    rates.push_back(static_cast<double>(run.batch) / elapsed);
  }
  result.throughput = median(rates);
  result.reps = rates.size();
  result.dispersion = *std::max_element(rates.begin(), rates.end()) / result.throughput;
  return result;
}

BenchResult measure_baseline(const ModelShape& shape, const BenchRun& run, std::size_t classes) {
  BenchRun base = run;
  base.width = 1;
  base.batch = kBatchPerWidth;
  base.sparsity = 0.0;
  if (run.mode == BenchMode::kFlops) {
    BenchResult r;
    r.run = base;
    r.throughput = 1.0 / (flop_count(shape, nullptr, MuxShape{}, run.seq_len) * 1e-9);
    r.reps = 1;
    return r;
  }
  require(!shape.layers.empty(), ErrorKind::kDegenerate, "baseline needs at least one layer");
  EncoderConfig cfg;
  cfg.layers = shape.layers.size();
  cfg.heads = shape.layers.front().heads;
  cfg.hidden = shape.hidden;
  cfg.ff = shape.layers.front().ff;
  cfg.classes = classes;
  cfg.vocab = 2;
  const EncoderModel dense = make_encoder(cfg, RngKey{0xba5eULL});
  return measure(dense, nullptr, base);
}

double multiplier(double candidate, double baseline) {
  require(baseline > 0.0 && std::isfinite(baseline), ErrorKind::kInvalidBaseline, "baseline throughput must be > 0");
  return candidate / baseline;
}

std::string bench_csv_header() { return "task,n,sparsity,mode,batch,seqlen,throughput,multiplier"; }

std::string bench_csv_row(const std::string& task, const BenchResult& result, double mult) {
  const BenchRun& r = result.run;
  return task + "," + std::to_string(r.width) + "," + format_number(r.sparsity) + "," + to_string(r.mode) + "," +
         std::to_string(r.batch) + "," + std::to_string(r.seq_len) + "," + format_number(result.throughput) + "," +
         format_number(mult);
}

}  // namespace prumux
