// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <vector>

#include "prumux/core_math.hpp"

namespace prumux {

/// Structural dimensions of an encoder, dense or compacted.
struct LayerShape {
  bool has_mha = true;
  bool has_ffn = true;
  std::size_t heads = 0;
  std::size_t ff = 0;

  bool operator==(const LayerShape&) const = default;
};

struct ModelShape {
  std::size_t hidden = 0;
  std::size_t head_dim = 0;
  std::vector<LayerShape> layers;

  bool operator==(const ModelShape&) const = default;
};

/// Binary structured-pruning masks. A bit of 1 keeps the unit.
struct SparsitySpec {
  std::vector<Mask> heads;         // per layer, one bit per head
  Mask mha;                        // per layer, whole attention sublayer
  Mask ffn;                        // per layer, whole feed-forward sublayer
  Mask hidden;                     // hidden coordinates, shared by every layer
  std::vector<Mask> intermediate;  // per layer, one bit per FFN intermediate unit

  /// All-ones spec matching shape.
  static SparsitySpec dense(const ModelShape& shape);

  bool operator==(const SparsitySpec&) const = default;
};

/// Throws kShape unless every bit vector length matches shape.
void check_matches(const SparsitySpec& spec, const ModelShape& shape);

/// Coarse masks dominate: a masked MHA (FFN) sublayer clears its head
/// (intermediate) bits. Returns the canonical spec.
SparsitySpec canonicalize(SparsitySpec spec);
bool is_canonical(const SparsitySpec& spec);

std::size_t count_live(const Mask& mask);

}  // namespace prumux
