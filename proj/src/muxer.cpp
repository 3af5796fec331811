// SPDX-License-Identifier: Apache-2.0
#include "prumux/muxer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "prumux/error.hpp"

namespace prumux {

namespace {

// Demux noise uses a stream separate from the keys so that keys stay a pure function of seed.
constexpr std::uint64_t kDemuxStreamSalt = 0x9e3779b97f4a7c15ULL;

AffineMap identity_map(std::size_t dim, Rng* noise, double scale) {
  AffineMap m{Matrix::identity(dim), Vector(dim, 0.0)};
  if (noise != nullptr && scale > 0.0)
    for (double& w : m.weight.values()) w += scale * noise->gaussian();
  return m;
}

void check_affine(const AffineMap& m) {
  require(m.bias.size() == m.weight.rows(), ErrorKind::kShape, "affine bias length != output dim");
}

}  // namespace

Vector AffineMap::apply(std::span<const double> x) const {
  require(x.size() == in_dim(), ErrorKind::kShape, "affine input dim mismatch");
  Vector y(bias);
  for (std::size_t r = 0; r < weight.rows(); ++r) {
    auto wr = weight.row(r);
    double acc = 0.0;
    for (std::size_t c = 0; c < x.size(); ++c) acc += wr[c] * x[c];
    y[r] += acc;
  }
  return y;
}

MuxKit make_kit(std::size_t width, std::size_t dim, RngKey seed, KitOptions options) {
  require(width >= 1, ErrorKind::kDegenerate, "multiplexing width must be >= 1");
  require(dim >= 1, ErrorKind::kDegenerate, "kit dimension must be >= 1");
  MuxKit kit;
  kit.width = width;
  kit.seed = seed;
  kit.kind = options.kind;
  kit.input_coords.resize(dim);
  for (std::size_t c = 0; c < dim; ++c) kit.input_coords[c] = c;
  const Vector draws = seeded_gaussian(seed, width * dim);
  for (std::size_t i = 0; i < width; ++i)
    kit.keys.emplace_back(draws.begin() + static_cast<std::ptrdiff_t>(i * dim),
                          draws.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim));
  Rng noise(RngKey{seed.seed ^ kDemuxStreamSalt});
  for (std::size_t i = 0; i < width; ++i) {
    DemuxFn fn{identity_map(dim, &noise, options.demux_init_noise), std::nullopt};
    if (options.kind == DemuxKind::kMlp) fn.second = identity_map(dim, &noise, options.demux_init_noise);
    kit.demux.push_back(std::move(fn));
  }
  return kit;
}

std::vector<Vector> regenerate_keys(const MuxKit& kit, std::size_t original_dim) {
  const Vector draws = seeded_gaussian(kit.seed, kit.width * original_dim);
  std::vector<Vector> keys(kit.width);
  for (std::size_t i = 0; i < kit.width; ++i) {
    for (std::size_t c : kit.input_coords) {
      require(c < original_dim, ErrorKind::kShape, "input coordinate beyond original dimension");
      keys[i].push_back(draws[i * original_dim + c]);
    }
  }
  return keys;
}

void validate(const MuxKit& kit) {
  require(kit.width >= 1, ErrorKind::kShape, "kit width must be >= 1");
  require(kit.keys.size() == kit.width, ErrorKind::kShape, "key count != width");
  require(kit.demux.size() == kit.width, ErrorKind::kShape, "demux count != width");
  const std::size_t d = kit.input_dim();
  require(d >= 1, ErrorKind::kShape, "keys are empty");
  require(kit.input_coords.size() == d, ErrorKind::kShape, "input_coords length != key length");
  for (const auto& k : kit.keys) require(k.size() == d, ErrorKind::kShape, "ragged keys");
  const std::size_t in = kit.demux_in_dim();
  const std::size_t out = kit.demux_out_dim();
  for (const auto& fn : kit.demux) {
    check_affine(fn.first);
    require((kit.kind == DemuxKind::kMlp) == fn.second.has_value(), ErrorKind::kShape,
            "demux layer count does not match kind");
    if (fn.second) {
      check_affine(*fn.second);
      require(fn.second->in_dim() == fn.first.out_dim(), ErrorKind::kShape, "demux hidden width mismatch");
    }
    require(fn.in_dim() == in && fn.out_dim() == out, ErrorKind::kShape, "demux maps differ in shape");
  }
}

TokenSequence multiplex(const MuxKit& kit, std::span<const TokenSequence> inputs) {
  require(inputs.size() == kit.width, ErrorKind::kShape,
          "multiplex expects " + std::to_string(kit.width) + " inputs, got " + std::to_string(inputs.size()));
  const std::size_t d = kit.input_dim();
  const std::size_t len = inputs.front().rows();
  for (const auto& x : inputs)
    require(x.rows() == len && x.cols() == d, ErrorKind::kShape, "ragged or mis-sized multiplex inputs");
  TokenSequence out(len, d);
  const double inv = 1.0 / static_cast<double>(kit.width);
  for (std::size_t i = 0; i < kit.width; ++i) {
    const Vector& key = kit.keys[i];
    for (std::size_t j = 0; j < len; ++j) {
      auto src = inputs[i].row(j);
      auto dst = out.row(j);
      for (std::size_t c = 0; c < d; ++c) dst[c] += key[c] * src[c];
    }
  }
  for (double& v : out.values()) v *= inv;
  return out;
}

std::vector<TokenSequence> multiplex_backward(const MuxKit& kit, const TokenSequence& d_mixed) {
  require(d_mixed.cols() == kit.input_dim(), ErrorKind::kShape, "multiplex gradient dim mismatch");
  const double inv = 1.0 / static_cast<double>(kit.width);
  std::vector<TokenSequence> grads;
  grads.reserve(kit.width);
  for (std::size_t i = 0; i < kit.width; ++i) {
    TokenSequence g(d_mixed.rows(), d_mixed.cols());
    for (std::size_t j = 0; j < g.rows(); ++j)
      for (std::size_t c = 0; c < g.cols(); ++c) g(j, c) = inv * kit.keys[i][c] * d_mixed(j, c);
    grads.push_back(std::move(g));
  }
  return grads;
}

namespace {

// Row-wise x · Wᵀ + b.
Matrix affine_rows(const AffineMap& m, const Matrix& x) {
  Matrix y = matmul_nt(x, m.weight);
  for (std::size_t r = 0; r < y.rows(); ++r) {
    auto row = y.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += m.bias[c];
  }
  return y;
}

// Accumulates dW += dyᵀ x, db += Σ_rows dy and returns dx = dy W.
Matrix affine_rows_backward(const AffineMap& m, const Matrix& x, const Matrix& dy, AffineMap& grad) {
  axpy(grad.weight, matmul_tn(dy, x));
  for (std::size_t r = 0; r < dy.rows(); ++r)
    for (std::size_t c = 0; c < dy.cols(); ++c) grad.bias[c] += dy(r, c);
  return matmul(dy, m.weight);
}

}  // namespace

TokenSequence demultiplex(const MuxKit& kit, const TokenSequence& mixed, std::size_t index) {
  require(index < kit.width, ErrorKind::kIndex,
          "demux index " + std::to_string(index) + " outside [0, " + std::to_string(kit.width) + ")");
  const DemuxFn& fn = kit.demux[index];
  require(mixed.cols() == fn.in_dim(), ErrorKind::kShape, "demux input dim mismatch");
  Matrix h = affine_rows(fn.first, mixed);
  if (!fn.second) return h;
  for (double& v : h.values()) v = gelu(v);
  return affine_rows(*fn.second, h);
}

TokenSequence demultiplex_backward(const MuxKit& kit, const TokenSequence& mixed, std::size_t index,
                                   const TokenSequence& d_out, DemuxFn& grad) {
  require(index < kit.width, ErrorKind::kIndex, "demux index out of range");
  const DemuxFn& fn = kit.demux[index];
  if (!fn.second) return affine_rows_backward(fn.first, mixed, d_out, grad.first);
  const Matrix pre = affine_rows(fn.first, mixed);
  Matrix act = pre;
  for (double& v : act.values()) v = gelu(v);
  Matrix d_act = affine_rows_backward(*fn.second, act, d_out, *grad.second);
  for (std::size_t k = 0; k < d_act.size(); ++k) d_act.values()[k] *= gelu_grad(pre.values()[k]);
  return affine_rows_backward(fn.first, mixed, d_act, grad.first);
}

MuxKit zeros_like(const MuxKit& kit) {
  MuxKit z = kit;
  for (auto span : trainable_params(z)) std::fill(span.begin(), span.end(), 0.0);
  return z;
}

std::vector<std::span<double>> trainable_params(MuxKit& kit) {
  std::vector<std::span<double>> out;
  for (auto& fn : kit.demux) {
    out.emplace_back(fn.first.weight.values());
    out.emplace_back(fn.first.bias);
    if (fn.second) {
      out.emplace_back(fn.second->weight.values());
      out.emplace_back(fn.second->bias);
    }
  }
  return out;
}

double retrieval_loss(const Matrix& probs, std::span<const std::size_t> targets) {
  require(probs.rows() == targets.size(), ErrorKind::kShape, "retrieval loss: one target per position");
  double loss = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    require(targets[j] < probs.cols(), ErrorKind::kIndex, "target id beyond vocabulary");
    loss -= std::log(std::max(probs(j, targets[j]), kLogProbFloor));
  }
  return loss;
}

double retrieval_loss_from_logits(const Matrix& logits, std::span<const std::size_t> targets,
                                  Matrix* d_logits) {
  require(logits.rows() == targets.size(), ErrorKind::kShape, "retrieval loss: one target per position");
  Matrix probs = logits;
  softmax_rows_inplace(probs);
  if (d_logits != nullptr) {
    *d_logits = Matrix(logits.rows(), logits.cols());
    for (std::size_t j = 0; j < targets.size(); ++j) {
      require(targets[j] < probs.cols(), ErrorKind::kIndex, "target id beyond vocabulary");
      if (probs(j, targets[j]) < kLogProbFloor) continue;  // clamped: flat in the logits
      for (std::size_t c = 0; c < probs.cols(); ++c) (*d_logits)(j, c) = probs(j, c);
      (*d_logits)(j, targets[j]) -= 1.0;
    }
  }
  return retrieval_loss(probs, targets);
}

}  // namespace prumux
