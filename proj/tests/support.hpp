// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test suites: random instances and comparison helpers.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "prumux/core_math.hpp"
#include "prumux/encoder.hpp"
#include "prumux/sparsity.hpp"

namespace prumux::testing {

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  return gaussian_matrix(rng, rows, cols, scale);
}

inline Vector random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.gaussian();
  return v;
}

/// Random biases and layer-norm parameters so that masking bugs cannot hide behind zeros.
inline EncoderModel random_model(Rng& rng, const EncoderConfig& cfg) {
  EncoderModel m = make_encoder(cfg, RngKey{rng.next_u64()}, 0.3);
  for (auto& l : m.layers) {
    for (Vector* v : {&l.ln1_beta, &l.ln2_beta, &l.bq, &l.bk, &l.bv, &l.bo, &l.b1, &l.b2})
      for (double& x : *v) x = 0.1 * rng.gaussian();
    for (Vector* v : {&l.ln1_gamma, &l.ln2_gamma})
      for (double& x : *v) x = 1.0 + 0.2 * rng.gaussian();
  }
  for (double& x : m.classifier_bias) x = 0.1 * rng.gaussian();
  return m;
}

inline Mask random_mask(Rng& rng, std::size_t n, double keep, bool at_least_one) {
  Mask m(n);
  for (auto& b : m) b = rng.uniform() < keep ? 1 : 0;
  if (at_least_one && count_live(m) == 0) m[rng.index(n)] = 1;
  return m;
}

/// Random canonical spec with at least one live hidden coordinate.
inline SparsitySpec random_spec(Rng& rng, const ModelShape& shape, bool prune_hidden = true) {
  SparsitySpec s = SparsitySpec::dense(shape);
  for (std::size_t l = 0; l < shape.layers.size(); ++l) {
    s.heads[l] = random_mask(rng, shape.layers[l].heads, 0.6, false);
    s.mha[l] = rng.uniform() < 0.8 ? 1 : 0;
    s.ffn[l] = rng.uniform() < 0.8 ? 1 : 0;
    s.intermediate[l] = random_mask(rng, shape.layers[l].ff, 0.6, false);
  }
  if (prune_hidden) s.hidden = random_mask(rng, shape.hidden, 0.7, true);
  return canonicalize(s);
}

/// Columns of m at the live positions of mask.
inline Matrix live_columns(const Matrix& m, const Mask& mask) {
  Matrix out(m.rows(), count_live(mask));
  for (std::size_t r = 0; r < m.rows(); ++r) {
    std::size_t k = 0;
    for (std::size_t c = 0; c < m.cols(); ++c)
      if (mask[c]) out(r, k++) = m(r, c);
  }
  return out;
}

inline double max_abs(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace prumux::testing
