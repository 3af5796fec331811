// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale training for multiplexed encoders: token-retrieval warm-up, task
// fine-tuning, and pruning with distillation. Plain SGD over hand-derived
// gradients; every run is a deterministic function of (seed, config).
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "prumux/core_math.hpp"
#include "prumux/distiller.hpp"
#include "prumux/encoder.hpp"
#include "prumux/muxer.hpp"
#include "prumux/sparsity.hpp"

namespace prumux {

enum class LabelRule {
  kLinearThreshold,  // argmax_c u_c · (mean embedding − vocabulary mean embedding)
  kFirstToken,       // label = first token id (needs vocab == classes)
};

/// One multiplexed training item: N token sequences and their N labels.
struct MuxExample {
  std::vector<std::vector<std::size_t>> tokens;
  std::vector<std::size_t> labels;
};

struct TaskOptions {
  std::size_t vocab = 32;
  std::size_t length = 8;
  std::size_t classes = 2;
  std::size_t width = 1;  // N
  std::size_t train_count = 256;
  std::size_t eval_count = 64;
  std::size_t dim = 32;
  LabelRule rule = LabelRule::kLinearThreshold;
  /// Sequences whose top-two class score gap is below this are redrawn.
  double min_margin = 1.0;
};

struct SyntheticTask {
  TaskOptions options;
  RngKey seed;
  Matrix embedding;      // vocab × dim, frozen
  Matrix label_weights;  // classes × dim
  std::vector<MuxExample> train;
  std::vector<MuxExample> eval;
};

SyntheticTask gen_task(RngKey seed, const TaskOptions& options);

/// Label of one sequence under the task's rule.
std::size_t label_of(const SyntheticTask& task, std::span<const std::size_t> tokens);

/// Gap between the two largest class scores (infinite for the first-token rule).
double label_margin(const SyntheticTask& task, std::span<const std::size_t> tokens);

enum class Phase { kRetrievalWarmup, kTask, kPruneDistill };

Phase parse_phase(const std::string& name);
std::string to_string(Phase phase);

/// Defaults are scaled to toy convergence. The reference recipe uses 40
/// training / finetune epochs, pruning batch 32*N, finetune batch 64, pruning
/// learning rate 5e-5, distill temperature 2 and layer/ce alphas 0.9/0.1.
struct TrainConfig {
  Phase phase = Phase::kRetrievalWarmup;
  double learning_rate = 0.05;
  std::size_t epochs = 40;
  std::size_t batch_size = 32;  // multiplexed examples per step (raw batch = batch_size * N)
  RngKey seed{1};
  double max_grad_norm = 0.0;  // > 0 enables global-norm clipping
};

void validate(const TrainConfig& cfg);

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  MuxKit kit;
  EncoderModel model;
  std::vector<EpochStats> history;
};

/// Embeds a sequence and keeps the coordinates the kit covers.
Matrix embed(const SyntheticTask& task, const MuxKit& kit, std::span<const std::size_t> tokens);

// Single-example losses. When gradient sinks are non-null they are accumulated into.

/// Token-retrieval loss of stream `stream` (sum over positions).
double retrieval_example_loss(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                              const MuxExample& ex, std::size_t stream, EncoderModel* d_model = nullptr,
                              MuxKit* d_kit = nullptr);

/// Classification cross-entropy averaged over the N streams.
double task_example_loss(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                         const MuxExample& ex, EncoderModel* d_model = nullptr, MuxKit* d_kit = nullptr);

struct Teacher {
  const EncoderModel* model;
  const MuxKit* kit;
};

/// α_ce · mean_i softCE(student_i, teacher_i; T) + α_layer · layer_loss.
double distill_example_loss(const EncoderModel& student, const MuxKit& student_kit, const DistillMapping& mapping,
                            const Teacher& teacher, const SyntheticTask& task, const MuxExample& ex,
                            const LossWeights& weights, EncoderModel* d_student = nullptr,
                            MuxKit* d_kit = nullptr, std::vector<Matrix>* d_transforms = nullptr);

/// Fraction of (example, stream, position) tokens whose argmax retrieval matches.
double retrieval_accuracy(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                          std::span<const MuxExample> examples);

/// Fraction of (example, stream) labels predicted correctly.
double task_accuracy(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                     std::span<const MuxExample> examples);

TrainResult train_phase1(MuxKit kit, EncoderModel model, const SyntheticTask& task, const TrainConfig& cfg);
TrainResult train_task(MuxKit kit, EncoderModel model, const SyntheticTask& task, const TrainConfig& cfg);

struct DistillResult {
  TrainResult student;
  double untuned_accuracy = 0.0;  // compacted teacher before any tuning
  DistillMapping mapping;
};

DistillResult train_prune_distill(const MuxKit& teacher_kit, const EncoderModel& teacher, const SparsitySpec& spec,
                                  const SyntheticTask& task, const TrainConfig& cfg, const LossWeights& weights);

// Gradient checking.

using LossFn = std::function<double(std::span<const double>)>;

/// Absolute floor of the relative-error denominator. Rounding in a loss of
/// order 10 puts about 1e-10 of noise on a central difference with eps 1e-5,
/// which this floor keeps from reading as a relative error near 1.
inline constexpr double kGradCheckFloor = 1e-5;

/// Max over coordinates of |analytic − numeric| / max(|analytic| + |numeric|, kGradCheckFloor)
/// with central differences of step eps.
double grad_check(const LossFn& loss, std::span<const double> analytic, std::span<const double> point, double eps);

Vector flatten(const std::vector<std::span<double>>& params);
void unflatten(const std::vector<std::span<double>>& params, std::span<const double> values);

}  // namespace prumux
