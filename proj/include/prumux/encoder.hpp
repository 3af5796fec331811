// SPDX-License-Identifier: Apache-2.0
//
// Pre-layer-norm transformer encoder (bidirectional attention, GELU FFN) with
// structural masks and hand-written backward passes.
//
// Per block:  x = x + MHA(LN1(x));  x = x + FFN(LN2(x)).
// There is no final layer norm, so removing every sublayer leaves the input
// untouched. Layer norm statistics are taken over live hidden coordinates
// only, which is what makes a masked forward equal to the compacted one.
#pragma once

#include <cstddef>
#include <vector>

#include "prumux/core_math.hpp"
#include "prumux/sparsity.hpp"

namespace prumux {

struct EncoderConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t hidden = 32;
  std::size_t ff = 64;
  std::size_t classes = 2;
  std::size_t vocab = 32;
};

/// Weights use the out × in layout (y = W x + b). Attention projections stack
/// heads along the output axis: rows [h*head_dim, (h+1)*head_dim) belong to
/// head h; wo columns follow the same blocks.
struct EncoderLayer {
  bool has_mha = true;
  bool has_ffn = true;
  std::size_t heads = 0;

  Vector ln1_gamma, ln1_beta;
  Matrix wq, wk, wv;
  Vector bq, bk, bv;
  Matrix wo;
  Vector bo;

  Vector ln2_gamma, ln2_beta;
  Matrix w1;  // ff × hidden
  Vector b1;
  Matrix w2;  // hidden × ff
  Vector b2;

  std::size_t ff_dim() const { return w1.rows(); }
};

struct EncoderModel {
  std::size_t hidden = 0;
  std::size_t head_dim = 0;
  std::vector<EncoderLayer> layers;
  Matrix classifier;  // classes × hidden
  Vector classifier_bias;
  Matrix vocab_proj;  // vocab × hidden, used by the token-retrieval head
  Vector vocab_bias;

  std::size_t classes() const { return classifier.rows(); }
  std::size_t vocab() const { return vocab_proj.rows(); }
};

inline constexpr double kLayerNormEps = 1e-5;

/// Gaussian weights with std-dev init_scale, unit LN gains, zero biases.
EncoderModel make_encoder(const EncoderConfig& config, RngKey seed, double init_scale = 0.1);

ModelShape shape_of(const EncoderModel& model);

/// Throws kShape on inconsistent matrix sizes.
void validate(const EncoderModel& model);

/// Hidden states after the input (index 0) and after every block.
struct LayerTrace {
  std::vector<Matrix> states;
  Vector pooled;  // mean of the final state over positions

  const Matrix& final_state() const { return states.back(); }
};

/// spec may be null (dense forward). Masked hidden coordinates of the input
/// are ignored and stay zero throughout.
LayerTrace encode(const EncoderModel& model, const SparsitySpec* spec, const Matrix& input);

inline LayerTrace encode(const EncoderModel& model, const Matrix& input) {
  return encode(model, nullptr, input);
}

Vector mean_pool(const Matrix& seq);

/// Softmax over the classifier logits of trace.pooled.
Vector classify(const EncoderModel& model, const LayerTrace& trace);
Vector classifier_logits(const EncoderModel& model, std::span<const double> pooled);

/// Forward state kept for the backward pass of an unmasked encode.
struct EncoderTape;

class TapedEncode {
 public:
  TapedEncode(const EncoderModel& model, const Matrix& input);
  ~TapedEncode();
  TapedEncode(TapedEncode&&) noexcept;
  TapedEncode& operator=(TapedEncode&&) noexcept;

  const LayerTrace& trace() const { return trace_; }

  /// d_states has one entry per trace state (empty matrices mean no gradient
  /// reaches that state). Accumulates into grad and returns d(input).
  Matrix backward(const std::vector<Matrix>& d_states, EncoderModel& grad) const;

 private:
  const EncoderModel* model_;
  LayerTrace trace_;
  std::vector<EncoderTape> tapes_;
};

EncoderModel zeros_like(const EncoderModel& model);

/// Every trainable array of the model, in a fixed order.
std::vector<std::span<double>> trainable_params(EncoderModel& model);

}  // namespace prumux
