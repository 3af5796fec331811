// SPDX-License-Identifier: Apache-2.0
#include "prumux/pruner.hpp"

#include <algorithm>
#include <string>

#include "prumux/error.hpp"

namespace prumux {

std::size_t count_live(const Mask& mask) {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t b) { return b != 0; }));
}

SparsitySpec SparsitySpec::dense(const ModelShape& shape) {
  SparsitySpec s;
  for (const auto& l : shape.layers) {
    s.heads.emplace_back(l.heads, 1);
    s.mha.push_back(l.has_mha ? 1 : 0);
    s.ffn.push_back(l.has_ffn ? 1 : 0);
    s.intermediate.emplace_back(l.ff, 1);
  }
  s.hidden.assign(shape.hidden, 1);
  return s;
}

void check_matches(const SparsitySpec& spec, const ModelShape& shape) {
  const std::size_t n = shape.layers.size();
  require(spec.heads.size() == n && spec.mha.size() == n && spec.ffn.size() == n && spec.intermediate.size() == n,
          ErrorKind::kShape, "spec layer count != model layer count " + std::to_string(n));
  require(spec.hidden.size() == shape.hidden, ErrorKind::kShape,
          "spec hidden mask has " + std::to_string(spec.hidden.size()) + " bits, model hidden is " +
              std::to_string(shape.hidden));
  for (std::size_t l = 0; l < n; ++l) {
    require(spec.heads[l].size() == shape.layers[l].heads, ErrorKind::kShape,
            "layer " + std::to_string(l) + " head mask length mismatch");
    require(spec.intermediate[l].size() == shape.layers[l].ff, ErrorKind::kShape,
            "layer " + std::to_string(l) + " intermediate mask length mismatch");
  }
  const auto bits_ok = [](const Mask& m) { return std::all_of(m.begin(), m.end(), [](auto b) { return b <= 1; }); };
  bool ok = bits_ok(spec.mha) && bits_ok(spec.ffn) && bits_ok(spec.hidden);
  for (const auto& m : spec.heads) ok = ok && bits_ok(m);
  for (const auto& m : spec.intermediate) ok = ok && bits_ok(m);
  require(ok, ErrorKind::kShape, "mask bits must be 0 or 1");
}

SparsitySpec canonicalize(SparsitySpec spec) {
  for (std::size_t l = 0; l < spec.mha.size(); ++l) {
    if (!spec.mha[l] && l < spec.heads.size()) std::fill(spec.heads[l].begin(), spec.heads[l].end(), 0);
    if (!spec.ffn[l] && l < spec.intermediate.size())
      std::fill(spec.intermediate[l].begin(), spec.intermediate[l].end(), 0);
  }
  return spec;
}

bool is_canonical(const SparsitySpec& spec) { return canonicalize(spec) == spec; }

SparsitySpec threshold_masks(const MaskScores& scores) {
  const auto bits = [t = scores.threshold](const Vector& v) {
    Mask m(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) m[i] = v[i] >= t ? 1 : 0;
    return m;
  };
  require(scores.heads.size() == scores.mha.size() && scores.ffn.size() == scores.mha.size() &&
              scores.intermediate.size() == scores.mha.size(),
          ErrorKind::kShape, "mask score layer counts disagree");
  SparsitySpec spec;
  for (const auto& h : scores.heads) spec.heads.push_back(bits(h));
  spec.mha = bits(scores.mha);
  spec.ffn = bits(scores.ffn);
  spec.hidden = bits(scores.hidden);
  for (const auto& i : scores.intermediate) spec.intermediate.push_back(bits(i));
  return canonicalize(std::move(spec));
}

ModelShape shape_from_spec(const SparsitySpec& spec, std::size_t head_dim) {
  ModelShape shape{spec.hidden.size(), head_dim, {}};
  for (std::size_t l = 0; l < spec.mha.size(); ++l)
    shape.layers.push_back({true, true, spec.heads.at(l).size(), spec.intermediate.at(l).size()});
  return shape;
}

double sparsity_of(const SparsitySpec& spec, const ModelShape& shape) {
  check_matches(spec, shape);
  const double d = static_cast<double>(shape.hidden);
  const double d_live = static_cast<double>(count_live(spec.hidden));
  const double dh = static_cast<double>(shape.head_dim);
  double total = 0.0, live = 0.0;
  for (std::size_t l = 0; l < shape.layers.size(); ++l) {
    const auto& ls = shape.layers[l];
    if (ls.has_mha) {
      total += 4.0 * d * dh * static_cast<double>(ls.heads);
      if (spec.mha[l]) live += 4.0 * d_live * dh * static_cast<double>(count_live(spec.heads[l]));
    }
    if (ls.has_ffn) {
      total += 2.0 * d * static_cast<double>(ls.ff);
      if (spec.ffn[l]) live += 2.0 * d_live * static_cast<double>(count_live(spec.intermediate[l]));
    }
  }
  if (total == 0.0) return 0.0;
  return (total - live) / total;
}

namespace {

void zero_cols(Matrix& m, const Mask& live) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      if (!live[c]) m(r, c) = 0.0;
}

void zero_rows(Matrix& m, const Mask& live) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    if (!live[r]) std::fill(m.row(r).begin(), m.row(r).end(), 0.0);
}

void zero_entries(Vector& v, const Mask& live) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!live[i]) v[i] = 0.0;
}

// Expands a head mask to one bit per attention-projection row.
Mask head_rows(const Mask& heads, std::size_t head_dim) {
  Mask rows;
  for (auto b : heads) rows.insert(rows.end(), head_dim, b);
  return rows;
}

std::vector<std::size_t> live_indices(const Mask& m) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) idx.push_back(i);
  return idx;
}

Matrix gather(const Matrix& m, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
  Matrix out(rows.size(), cols.size());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols.size(); ++c) out(r, c) = m(rows[r], cols[c]);
  return out;
}

Vector gather(const Vector& v, const std::vector<std::size_t>& idx) {
  Vector out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(v[i]);
  return out;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

}  // namespace

EncoderModel apply_masks(const EncoderModel& model, const SparsitySpec& spec) {
  const ModelShape shape = shape_of(model);
  check_matches(spec, shape);
  const SparsitySpec canon = canonicalize(spec);
  EncoderModel out = model;
  const Mask& hid = canon.hidden;
  for (std::size_t l = 0; l < out.layers.size(); ++l) {
    EncoderLayer& layer = out.layers[l];
    if (layer.has_mha) {
      Mask rows = head_rows(canon.heads[l], model.head_dim);
      if (!canon.mha[l]) std::fill(rows.begin(), rows.end(), 0);
      for (Matrix* w : {&layer.wq, &layer.wk, &layer.wv}) {
        zero_rows(*w, rows);
        zero_cols(*w, hid);
      }
      for (Vector* b : {&layer.bq, &layer.bk, &layer.bv}) zero_entries(*b, rows);
      zero_cols(layer.wo, rows);
      zero_rows(layer.wo, hid);
      zero_entries(layer.bo, hid);
      if (!canon.mha[l]) std::fill(layer.bo.begin(), layer.bo.end(), 0.0);
      zero_entries(layer.ln1_gamma, hid);
      zero_entries(layer.ln1_beta, hid);
    }
    if (layer.has_ffn) {
      const Mask& inter = canon.intermediate[l];
      zero_rows(layer.w1, inter);
      zero_cols(layer.w1, hid);
      zero_entries(layer.b1, inter);
      zero_cols(layer.w2, inter);
      zero_rows(layer.w2, hid);
      zero_entries(layer.b2, hid);
      if (!canon.ffn[l]) std::fill(layer.b2.begin(), layer.b2.end(), 0.0);
      zero_entries(layer.ln2_gamma, hid);
      zero_entries(layer.ln2_beta, hid);
    }
  }
  zero_cols(out.classifier, hid);
  zero_cols(out.vocab_proj, hid);
  return out;
}

EncoderModel compact(const EncoderModel& model, const SparsitySpec& spec) {
  const ModelShape shape = shape_of(model);
  check_matches(spec, shape);
  require(is_canonical(spec), ErrorKind::kShape, "compact requires a canonical spec");
  const auto hid = live_indices(spec.hidden);
  require(!hid.empty(), ErrorKind::kDegenerate, "every hidden dimension is masked");
  EncoderModel out;
  out.hidden = hid.size();
  out.head_dim = model.head_dim;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const EncoderLayer& src = model.layers[l];
    EncoderLayer dst;
    dst.has_mha = src.has_mha && spec.mha[l];
    dst.has_ffn = src.has_ffn && spec.ffn[l];
    if (dst.has_mha) {
      const auto heads = live_indices(spec.heads[l]);
      dst.heads = heads.size();
      std::vector<std::size_t> rows;
      for (std::size_t h : heads)
        for (std::size_t k = 0; k < model.head_dim; ++k) rows.push_back(h * model.head_dim + k);
      dst.ln1_gamma = gather(src.ln1_gamma, hid);
      dst.ln1_beta = gather(src.ln1_beta, hid);
      dst.wq = gather(src.wq, rows, hid);
      dst.wk = gather(src.wk, rows, hid);
      dst.wv = gather(src.wv, rows, hid);
      dst.bq = gather(src.bq, rows);
      dst.bk = gather(src.bk, rows);
      dst.bv = gather(src.bv, rows);
      dst.wo = gather(src.wo, hid, rows);
      dst.bo = gather(src.bo, hid);
    }
    if (dst.has_ffn) {
      const auto inter = live_indices(spec.intermediate[l]);
      dst.ln2_gamma = gather(src.ln2_gamma, hid);
      dst.ln2_beta = gather(src.ln2_beta, hid);
      dst.w1 = gather(src.w1, inter, hid);
      dst.b1 = gather(src.b1, inter);
      dst.w2 = gather(src.w2, hid, inter);
      dst.b2 = gather(src.b2, hid);
    }
    out.layers.push_back(std::move(dst));
  }
  out.classifier = gather(model.classifier, iota(model.classifier.rows()), hid);
  out.classifier_bias = model.classifier_bias;
  out.vocab_proj = gather(model.vocab_proj, iota(model.vocab_proj.rows()), hid);
  out.vocab_bias = model.vocab_bias;
  return out;
}

MuxKit align_demux(const MuxKit& kit, const Mask& hidden_mask) {
  require(hidden_mask.size() == kit.demux_in_dim(), ErrorKind::kShape,
          "hidden mask length " + std::to_string(hidden_mask.size()) + " != demux input dim " +
              std::to_string(kit.demux_in_dim()));
  const auto live = live_indices(hidden_mask);
  require(!live.empty(), ErrorKind::kDegenerate, "hidden mask keeps no coordinates");
  MuxKit out = kit;
  for (auto& fn : out.demux) {
    if (fn.second) {
      fn.first.weight = gather(fn.first.weight, iota(fn.first.weight.rows()), live);
      fn.second->weight = gather(fn.second->weight, live, iota(fn.second->weight.cols()));
      fn.second->bias = gather(fn.second->bias, live);
    } else {
      fn.first.weight = gather(fn.first.weight, live, live);
      fn.first.bias = gather(fn.first.bias, live);
    }
  }
  if (kit.input_dim() == hidden_mask.size()) {
    for (auto& key : out.keys) key = gather(key, live);
    std::vector<std::size_t> coords;
    for (std::size_t i : live) coords.push_back(kit.input_coords[i]);
    out.input_coords = std::move(coords);
  }
  return out;
}

SparsitySpec spec_for_sparsity(const ModelShape& shape, double target) {
  require(target >= 0.0 && target <= 1.0, ErrorKind::kDomain, "target sparsity must lie in [0, 1]");
  SparsitySpec spec = SparsitySpec::dense(shape);
  if (sparsity_of(spec, shape) >= target) return spec;
  std::size_t max_ff = 0;
  for (const auto& l : shape.layers) max_ff = std::max(max_ff, l.ff);
  // Intermediate units from the top index down, one per layer per round.
  for (std::size_t k = max_ff; k-- > 0;) {
    for (std::size_t l = 0; l < shape.layers.size(); ++l) {
      if (k >= shape.layers[l].ff || !shape.layers[l].has_ffn) continue;
      spec.intermediate[l][k] = 0;
      if (count_live(spec.intermediate[l]) == 0) spec.ffn[l] = 0;
      if (sparsity_of(spec, shape) >= target) return spec;
    }
  }
  // Then heads, the same way, keeping one head in the model.
  std::size_t max_heads = 0, live_heads = 0;
  for (const auto& l : shape.layers) {
    max_heads = std::max(max_heads, l.heads);
    if (l.has_mha) live_heads += l.heads;
  }
  for (std::size_t k = max_heads; k-- > 0;) {
    for (std::size_t l = 0; l < shape.layers.size(); ++l) {
      if (k >= shape.layers[l].heads || !shape.layers[l].has_mha || live_heads == 1) continue;
      spec.heads[l][k] = 0;
      --live_heads;
      if (count_live(spec.heads[l]) == 0) spec.mha[l] = 0;
      if (sparsity_of(spec, shape) >= target) return spec;
    }
  }
  // Then hidden coordinates, always keeping one.
  for (std::size_t c = shape.hidden; c-- > 1;) {
    spec.hidden[c] = 0;
    if (sparsity_of(spec, shape) >= target) return spec;
  }
  return spec;
}

}  // namespace prumux
