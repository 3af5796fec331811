// SPDX-License-Identifier: Apache-2.0
//
// Throughput of (N, s) configurations, as a deterministic FLOP proxy or as
// measured wall-clock time, and multipliers over the dense N = 1 baseline.
//
// FLOP model (2 FLOPs per multiply-add), per multiplexed pass of T tokens:
//   encoder, per live layer and token:
//     attention  8·d·a + 4·T·a    a = live_heads · head_dim, d = live hidden
//     FFN        4·d·f            f = live intermediate width
//   multiplexer, per token:        2·N·d_in
//   demultiplexer, affine kind:    2·N·d_in·d_out once per pass (it commutes
//                                  with mean pooling, so it runs on the pooled vector)
//   demultiplexer, MLP kind:       per token 2·N·(d_in·d_in + d_in·d_out)
// The baseline is the dense encoder with no multiplexer at all.
#pragma once

#include <cstddef>
#include <optional>
#include <string>

#include "prumux/encoder.hpp"
#include "prumux/muxer.hpp"
#include "prumux/sparsity.hpp"

namespace prumux {

enum class BenchMode { kWall, kFlops };

BenchMode parse_bench_mode(const std::string& name);
std::string to_string(BenchMode mode);

struct MuxShape {
  std::size_t width = 0;  // 0: no multiplexer (the baseline)
  std::size_t input_dim = 0;
  std::size_t demux_in = 0;
  std::size_t demux_out = 0;
  DemuxKind kind = DemuxKind::kAffine;
};

MuxShape mux_shape_of(const MuxKit& kit);

inline constexpr std::size_t kDefaultSeqLen = 128;
inline constexpr std::size_t kBatchPerWidth = 128;

struct BenchRun {
  BenchMode mode = BenchMode::kFlops;
  std::size_t width = 1;
  double sparsity = 0.0;
  std::size_t batch = kBatchPerWidth;  // always 128·N
  std::size_t seq_len = kDefaultSeqLen;
  std::size_t reps = 3;
  std::size_t warmup = 1;
  std::size_t threads = 1;
};

BenchRun make_run(BenchMode mode, std::size_t width, double sparsity, std::size_t seq_len = kDefaultSeqLen,
                  std::size_t reps = 3);

void validate(const BenchRun& run);

struct BenchResult {
  BenchRun run;
  double throughput = 0.0;  // inputs per second (wall) or inputs per GFLOP (flops)
  std::size_t reps = 0;
  double dispersion = 1.0;  // max / median of per-rep throughput; 1 in flops mode
};

/// FLOPs for one multiplexed pass. spec may be null; masked units cost nothing.
double flop_count(const ModelShape& shape, const SparsitySpec* spec, const MuxShape& mux, std::size_t seq_len);

/// The mux/demux share of flop_count for a dense encoder, i.e. the largest
/// factor by which the proxy multiplier can fall short of N.
double mux_overhead_fraction(const ModelShape& shape, const MuxShape& mux, std::size_t seq_len);

/// kit may be null (no multiplexing). Wall mode runs the full pipeline on
/// batch random inputs: multiplex, encode, demultiplex, pool and classify.
BenchResult measure(const EncoderModel& model, const MuxKit* kit, const BenchRun& run);

/// The same run for a dense random N = 1 model of shape (no multiplexer).
BenchResult measure_baseline(const ModelShape& shape, const BenchRun& run, std::size_t classes = 2);

double multiplier(double candidate, double baseline);

/// task,n,sparsity,mode,batch,seqlen,throughput,multiplier
std::string bench_csv_header();
std::string bench_csv_row(const std::string& task, const BenchResult& result, double mult);

}  // namespace prumux
