// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "prumux/core_math.hpp"
#include "prumux/encoder.hpp"
#include "prumux/muxer.hpp"
#include "prumux/sparsity.hpp"

namespace prumux {

/// Real-valued mask scores with the same layout as SparsitySpec.
struct MaskScores {
  std::vector<Vector> heads;
  Vector mha;
  Vector ffn;
  Vector hidden;
  std::vector<Vector> intermediate;
  double threshold = 0.5;
};

/// bit = score >= threshold, then canonicalized.
SparsitySpec threshold_masks(const MaskScores& scores);

/// Fraction of prunable weights removed. Prunable weights are the Q, K, V, O
/// and FFN matrices; embeddings, biases, layer norms and heads are excluded.
/// A head keeps 4 * live_hidden * head_dim weights; an FFN keeps
/// 2 * live_hidden * live_intermediate.
double sparsity_of(const SparsitySpec& spec, const ModelShape& shape);

/// Dense shape a spec was written against (bit-vector lengths give the sizes).
ModelShape shape_from_spec(const SparsitySpec& spec, std::size_t head_dim);

/// Zeroes the weights and biases of masked units; dimensions are unchanged.
EncoderModel apply_masks(const EncoderModel& model, const SparsitySpec& spec);

/// Physically removes masked units. Removed sublayers keep their layer slot
/// (with has_mha / has_ffn cleared) so layer indices stay stable.
EncoderModel compact(const EncoderModel& model, const SparsitySpec& spec);

/// Restricts each demux map's input and output to live hidden coordinates and
/// the multiplexer keys to the same coordinates.
MuxKit align_demux(const MuxKit& kit, const Mask& hidden_mask);

/// Deterministic nested family of specs: units are removed in a fixed order
/// (intermediate units from the highest index, round-robin over layers; then
/// heads the same way, keeping one head in the model; then hidden coordinates
/// from the highest index, keeping one) until
/// sparsity_of reaches target. A larger target always yields a superset of
/// pruned units.
SparsitySpec spec_for_sparsity(const ModelShape& shape, double target);

}  // namespace prumux
