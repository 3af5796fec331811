// SPDX-License-Identifier: Apache-2.0
//
// Data multiplexing: N token sequences are keyed by fixed Gaussian vectors
// (Hadamard product), averaged into one sequence, run through the encoder
// once, and separated again by N learned demultiplexing maps.
#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "prumux/core_math.hpp"

namespace prumux {

/// One position per row, one feature per column.
using TokenSequence = Matrix;

/// y = weight · x + bias, weight stored out × in.
struct AffineMap {
  Matrix weight;
  Vector bias;

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  Vector apply(std::span<const double> x) const;
};

enum class DemuxKind {
  kAffine,  // psi(h) = W h + b
  kMlp,     // psi(h) = W2 gelu(W1 h + b1) + b2, hidden width = input width
};

struct DemuxFn {
  AffineMap first;
  std::optional<AffineMap> second;  // set iff kind == kMlp

  std::size_t in_dim() const { return first.in_dim(); }
  std::size_t out_dim() const { return second ? second->out_dim() : first.out_dim(); }
};

struct MuxKit {
  std::size_t width = 1;  // N
  RngKey seed;
  DemuxKind kind = DemuxKind::kAffine;
  /// width vectors of the multiplexer input dimension; frozen.
  std::vector<Vector> keys;
  /// Original embedding coordinates the keys (and the encoder input) cover.
  /// Dense kits list 0..d-1; pruning the hidden dimension drops entries.
  std::vector<std::size_t> input_coords;
  std::vector<DemuxFn> demux;

  std::size_t input_dim() const { return keys.empty() ? 0 : keys.front().size(); }
  std::size_t demux_in_dim() const { return demux.empty() ? 0 : demux.front().in_dim(); }
  std::size_t demux_out_dim() const { return demux.empty() ? 0 : demux.front().out_dim(); }
};

struct KitOptions {
  DemuxKind kind = DemuxKind::kAffine;
  /// Std-dev of Gaussian noise added to the identity demux initialization.
  double demux_init_noise = 0.0;
};

/// Keys are drawn once from seed (first width*dim draws, key i = slice i);
/// demux maps start at identity (plus optional seeded noise).
MuxKit make_kit(std::size_t width, std::size_t dim, RngKey seed, KitOptions options = {});

/// The keys make_kit would draw for (width, original_dim, seed), restricted to kit.input_coords.
std::vector<Vector> regenerate_keys(const MuxKit& kit, std::size_t original_dim);

/// Throws kShape on any internal inconsistency.
void validate(const MuxKit& kit);

/// Output row j = (1/N) Σ_i key_i ⊙ inputs[i] row j.
TokenSequence multiplex(const MuxKit& kit, std::span<const TokenSequence> inputs);

/// Gradients of a loss with respect to each multiplexed input (keys are frozen).
std::vector<TokenSequence> multiplex_backward(const MuxKit& kit, const TokenSequence& d_mixed);

/// Applies psi_index to every position. index is zero-based.
TokenSequence demultiplex(const MuxKit& kit, const TokenSequence& mixed, std::size_t index);

/// Accumulates parameter gradients of psi_index into grad and returns d(mixed).
TokenSequence demultiplex_backward(const MuxKit& kit, const TokenSequence& mixed, std::size_t index,
                                   const TokenSequence& d_out, DemuxFn& grad);

/// A kit of the same shape with every trainable value zeroed; keys are copied.
MuxKit zeros_like(const MuxKit& kit);

/// Trainable views (demux weights and biases). Keys are not included.
std::vector<std::span<double>> trainable_params(MuxKit& kit);

inline constexpr double kLogProbFloor = 1e-12;

/// Σ_j −log P(target_j | position j) with probabilities clamped below at kLogProbFloor.
/// probs has one normalized distribution per row.
double retrieval_loss(const Matrix& probs, std::span<const std::size_t> targets);

/// Same loss computed from unnormalized logits; writes d(loss)/d(logits) when requested.
double retrieval_loss_from_logits(const Matrix& logits, std::span<const std::size_t> targets,
                                  Matrix* d_logits = nullptr);

}  // namespace prumux
