// SPDX-License-Identifier: Apache-2.0
//
// Layer-wise distillation between a dense teacher trace and a pruned student
// trace:  L_layer = Σ_{i∈τ} MSE(H_s^{m(i)} · W_i, H_t^i).
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "prumux/core_math.hpp"
#include "prumux/encoder.hpp"

namespace prumux {

struct LayerMatch {
  std::size_t student_layer = 0;
  std::size_t teacher_layer = 0;
  /// student_hidden × teacher_hidden; applied to row-major hidden states as H_s · W.
  Matrix transform;
};

struct DistillMapping {
  std::vector<LayerMatch> matches;
};

struct LossWeights {
  double layer = 0.9;  // distill layer loss alpha
  double ce = 0.1;     // distill ce loss alpha
  double temperature = 2.0;
};

/// Throws kDomain unless both alphas lie in [0,1], sum to 1, and temperature > 0.
void validate(const LossWeights& w);

/// Static index-retention matching: a surviving student layer keeps its
/// original index and maps to the teacher layer with the same index. Each
/// transform starts as the identity rows selecting the live hidden coordinates.
DistillMapping build_mapping(std::span<const std::size_t> student_live_layers, std::size_t teacher_layers,
                             const Mask& hidden_live);

/// Layers of a (compacted) model that still hold an attention or FFN sublayer.
std::vector<std::size_t> live_layers(const EncoderModel& model);

/// Mean over positions and teacher coordinates, summed over matches. Layer i's
/// output is trace.states[i + 1].
double layer_loss(const LayerTrace& student, const LayerTrace& teacher, const DistillMapping& mapping);

/// Gradients of layer_loss: one matrix per student trace state (empty where
/// unused) and one per match transform.
struct LayerLossGrad {
  std::vector<Matrix> d_student_states;
  std::vector<Matrix> d_transforms;
};

double layer_loss_with_grad(const LayerTrace& student, const LayerTrace& teacher, const DistillMapping& mapping,
                            LayerLossGrad& grad);

double combined_loss(double ce, double layer, const LossWeights& w);

/// −Σ_c softmax(t/T)_c · log softmax(s/T)_c, and its gradient in the student logits.
double soft_cross_entropy(std::span<const double> student_logits, std::span<const double> teacher_logits,
                          double temperature, Vector* d_student_logits = nullptr);

}  // namespace prumux
