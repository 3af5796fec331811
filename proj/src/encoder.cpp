// SPDX-License-Identifier: Apache-2.0
#include "prumux/encoder.hpp"

#include <cmath>
#include <string>

#include "prumux/error.hpp"

namespace prumux {

namespace {

Vector ones(std::size_t n) { return Vector(n, 1.0); }
Vector zeros(std::size_t n) { return Vector(n, 0.0); }

// x[:, start:start+count] of w · rows → u · w_blockᵀ + b_block
Matrix project_block(const Matrix& u, const Matrix& w, const Vector& b, std::size_t start, std::size_t count) {
  Matrix out(u.rows(), count);
  for (std::size_t t = 0; t < u.rows(); ++t) {
    auto ur = u.row(t);
    for (std::size_t k = 0; k < count; ++k) {
      auto wr = w.row(start + k);
      double acc = b[start + k];
      for (std::size_t c = 0; c < ur.size(); ++c) acc += ur[c] * wr[c];
      out(t, k) = acc;
    }
  }
  return out;
}

Matrix linear_rows(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y = matmul_nt(x, w);
  for (std::size_t t = 0; t < y.rows(); ++t) {
    auto row = y.row(t);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b[c];
  }
  return y;
}

void zero_masked_cols(Matrix& m, const Mask* live) {
  if (live == nullptr) return;
  for (std::size_t t = 0; t < m.rows(); ++t)
    for (std::size_t c = 0; c < m.cols(); ++c)
      if (!(*live)[c]) m(t, c) = 0.0;
}

struct NormTape {
  Matrix xhat;
  Vector inv_std;
};

// Layer norm per row over live coordinates; masked coordinates come out 0.
Matrix layer_norm(const Matrix& x, const Vector& gamma, const Vector& beta, const Mask* live, NormTape* tape) {
  const std::size_t d = x.cols();
  std::size_t n = d;
  if (live != nullptr) n = count_live(*live);
  Matrix y(x.rows(), d);
  if (tape != nullptr) {
    tape->xhat = Matrix(x.rows(), d);
    tape->inv_std.assign(x.rows(), 0.0);
  }
  if (n == 0) return y;
  const auto is_live = [&](std::size_t c) { return live == nullptr || (*live)[c] != 0; };
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto xr = x.row(t);
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      if (is_live(c)) mean += xr[c];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      if (is_live(c)) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t c = 0; c < d; ++c) {
      if (!is_live(c)) continue;
      const double xh = (xr[c] - mean) * inv;
      y(t, c) = xh * gamma[c] + beta[c];
      if (tape != nullptr) tape->xhat(t, c) = xh;
    }
    if (tape != nullptr) tape->inv_std[t] = inv;
  }
  return y;
}

Matrix layer_norm_backward(const NormTape& tape, const Vector& gamma, const Matrix& dy, Vector& dgamma,
                           Vector& dbeta) {
  const std::size_t d = dy.cols();
  const double n = static_cast<double>(d);
  Matrix dx(dy.rows(), d);
  for (std::size_t t = 0; t < dy.rows(); ++t) {
    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
    Vector dxh(d);
    for (std::size_t c = 0; c < d; ++c) {
      const double g = dy(t, c);
      dgamma[c] += g * tape.xhat(t, c);
      dbeta[c] += g;
      dxh[c] = g * gamma[c];
      sum_dxh += dxh[c];
      sum_dxh_xh += dxh[c] * tape.xhat(t, c);
    }
    const double inv = tape.inv_std[t];
    for (std::size_t c = 0; c < d; ++c)
      dx(t, c) = inv / n * (n * dxh[c] - sum_dxh - tape.xhat(t, c) * sum_dxh_xh);
  }
  return dx;
}

void add_colsum(Vector& acc, const Matrix& m, std::size_t offset = 0) {
  for (std::size_t t = 0; t < m.rows(); ++t)
    for (std::size_t c = 0; c < m.cols(); ++c) acc[offset + c] += m(t, c);
}

}  // namespace

struct EncoderTape {
  Matrix x_in;
  NormTape ln1;
  Matrix u1;
  std::vector<Matrix> q, k, v, p;
  Matrix concat;
  Matrix x_mid;
  NormTape ln2;
  Matrix u2;
  Matrix z;
  Matrix g;
};

namespace {

struct LayerMasks {
  const Mask* hidden = nullptr;
  const Mask* heads = nullptr;
  const Mask* intermediate = nullptr;
  bool mha_on = true;
  bool ffn_on = true;
};

Matrix run_block(const EncoderLayer& layer, std::size_t head_dim, const LayerMasks& masks, Matrix x,
                 EncoderTape* tape) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  if (tape != nullptr) tape->x_in = x;
  if (layer.has_mha && masks.mha_on) {
    Matrix u = layer_norm(x, layer.ln1_gamma, layer.ln1_beta, masks.hidden, tape ? &tape->ln1 : nullptr);
    Matrix concat(x.rows(), layer.heads * head_dim);
    for (std::size_t h = 0; h < layer.heads; ++h) {
      if (masks.heads != nullptr && !(*masks.heads)[h]) {
        if (tape != nullptr) {
          tape->q.emplace_back(); tape->k.emplace_back(); tape->v.emplace_back(); tape->p.emplace_back();
        }
        continue;
      }
      const std::size_t start = h * head_dim;
      Matrix q = project_block(u, layer.wq, layer.bq, start, head_dim);
      Matrix k = project_block(u, layer.wk, layer.bk, start, head_dim);
      Matrix v = project_block(u, layer.wv, layer.bv, start, head_dim);
      Matrix p = matmul_nt(q, k);
      for (double& s : p.values()) s *= scale;
      softmax_rows_inplace(p);
      const Matrix ctx = matmul(p, v);
      for (std::size_t t = 0; t < ctx.rows(); ++t)
        for (std::size_t c = 0; c < head_dim; ++c) concat(t, start + c) = ctx(t, c);
      if (tape != nullptr) {
        tape->q.push_back(std::move(q));
        tape->k.push_back(std::move(k));
        tape->v.push_back(std::move(v));
        tape->p.push_back(std::move(p));
      }
    }
    Matrix attn = linear_rows(concat, layer.wo, layer.bo);
    zero_masked_cols(attn, masks.hidden);
    axpy(x, attn);
    if (tape != nullptr) {
      tape->u1 = std::move(u);
      tape->concat = std::move(concat);
    }
  }
  if (tape != nullptr) tape->x_mid = x;
  if (layer.has_ffn && masks.ffn_on) {
    Matrix u = layer_norm(x, layer.ln2_gamma, layer.ln2_beta, masks.hidden, tape ? &tape->ln2 : nullptr);
    Matrix z = linear_rows(u, layer.w1, layer.b1);
    Matrix g(z.rows(), z.cols());
    for (std::size_t t = 0; t < z.rows(); ++t)
      for (std::size_t c = 0; c < z.cols(); ++c)
        if (masks.intermediate == nullptr || (*masks.intermediate)[c]) g(t, c) = gelu(z(t, c));
    Matrix ffn = linear_rows(g, layer.w2, layer.b2);
    zero_masked_cols(ffn, masks.hidden);
    axpy(x, ffn);
    if (tape != nullptr) {
      tape->u2 = std::move(u);
      tape->z = std::move(z);
      tape->g = std::move(g);
    }
  }
  return x;
}

Matrix block_backward(const EncoderLayer& layer, std::size_t head_dim, const EncoderTape& tape, Matrix d_out,
                      EncoderLayer& grad) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix dx = d_out;  // residual path
  if (layer.has_ffn) {
    axpy(grad.w2, matmul_tn(d_out, tape.g));
    add_colsum(grad.b2, d_out);
    Matrix dz = matmul(d_out, layer.w2);
    for (std::size_t i = 0; i < dz.size(); ++i) dz.values()[i] *= gelu_grad(tape.z.values()[i]);
    axpy(grad.w1, matmul_tn(dz, tape.u2));
    add_colsum(grad.b1, dz);
    const Matrix du = matmul(dz, layer.w1);
    axpy(dx, layer_norm_backward(tape.ln2, layer.ln2_gamma, du, grad.ln2_gamma, grad.ln2_beta));
  }
  Matrix d_in = dx;
  if (layer.has_mha) {
    axpy(grad.wo, matmul_tn(dx, tape.concat));
    add_colsum(grad.bo, dx);
    const Matrix dconcat = matmul(dx, layer.wo);
    Matrix du(dx.rows(), dx.cols());
    for (std::size_t h = 0; h < layer.heads; ++h) {
      const std::size_t start = h * head_dim;
      Matrix dctx(dx.rows(), head_dim);
      for (std::size_t t = 0; t < dx.rows(); ++t)
        for (std::size_t c = 0; c < head_dim; ++c) dctx(t, c) = dconcat(t, start + c);
      const Matrix& p = tape.p[h];
      const Matrix dp = matmul_nt(dctx, tape.v[h]);
      const Matrix dv = matmul_tn(p, dctx);
      Matrix ds(p.rows(), p.cols());
      for (std::size_t i = 0; i < p.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < p.cols(); ++j) dot += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < p.cols(); ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
      }
      const Matrix dq = matmul(ds, tape.k[h]);
      const Matrix dk = matmul_tn(ds, tape.q[h]);
      const auto accumulate = [&](const Matrix& dproj, const Matrix& w, Matrix& gw, Vector& gb) {
        const Matrix gblock = matmul_tn(dproj, tape.u1);
        for (std::size_t r = 0; r < head_dim; ++r)
          for (std::size_t c = 0; c < gw.cols(); ++c) gw(start + r, c) += gblock(r, c);
        add_colsum(gb, dproj, start);
        for (std::size_t t = 0; t < dproj.rows(); ++t)
          for (std::size_t r = 0; r < head_dim; ++r) {
            const double g = dproj(t, r);
            auto wr = w.row(start + r);
            for (std::size_t c = 0; c < wr.size(); ++c) du(t, c) += g * wr[c];
          }
      };
      accumulate(dq, layer.wq, grad.wq, grad.bq);
      accumulate(dk, layer.wk, grad.wk, grad.bk);
      accumulate(dv, layer.wv, grad.wv, grad.bv);
    }
    axpy(d_in, layer_norm_backward(tape.ln1, layer.ln1_gamma, du, grad.ln1_gamma, grad.ln1_beta));
  }
  return d_in;
}

}  // namespace

EncoderModel make_encoder(const EncoderConfig& config, RngKey seed, double init_scale) {
  require(config.layers >= 1 && config.heads >= 1 && config.hidden >= 1 && config.ff >= 1, ErrorKind::kDegenerate,
          "encoder dimensions must be positive");
  require(config.hidden % config.heads == 0, ErrorKind::kShape, "hidden size must be divisible by head count");
  require(config.classes >= 1 && config.vocab >= 1, ErrorKind::kDegenerate, "classes and vocab must be positive");
  Rng rng(seed);
  const std::size_t d = config.hidden;
  EncoderModel m;
  m.hidden = d;
  m.head_dim = d / config.heads;
  for (std::size_t l = 0; l < config.layers; ++l) {
    EncoderLayer layer;
    layer.heads = config.heads;
    layer.ln1_gamma = ones(d);
    layer.ln1_beta = zeros(d);
    layer.wq = gaussian_matrix(rng, d, d, init_scale);
    layer.wk = gaussian_matrix(rng, d, d, init_scale);
    layer.wv = gaussian_matrix(rng, d, d, init_scale);
    layer.wo = gaussian_matrix(rng, d, d, init_scale);
    layer.bq = zeros(d);
    layer.bk = zeros(d);
    layer.bv = zeros(d);
    layer.bo = zeros(d);
    layer.ln2_gamma = ones(d);
    layer.ln2_beta = zeros(d);
    layer.w1 = gaussian_matrix(rng, config.ff, d, init_scale);
    layer.b1 = zeros(config.ff);
    layer.w2 = gaussian_matrix(rng, d, config.ff, init_scale);
    layer.b2 = zeros(d);
    m.layers.push_back(std::move(layer));
  }
  m.classifier = gaussian_matrix(rng, config.classes, d, init_scale);
  m.classifier_bias = zeros(config.classes);
  m.vocab_proj = gaussian_matrix(rng, config.vocab, d, init_scale);
  m.vocab_bias = zeros(config.vocab);
  return m;
}

ModelShape shape_of(const EncoderModel& model) {
  ModelShape s{model.hidden, model.head_dim, {}};
  for (const auto& l : model.layers) s.layers.push_back({l.has_mha, l.has_ffn, l.heads, l.ff_dim()});
  return s;
}

void validate(const EncoderModel& model) {
  const std::size_t d = model.hidden;
  const auto mat = [](const Matrix& m, std::size_t r, std::size_t c, const char* what) {
    require(m.rows() == r && m.cols() == c, ErrorKind::kShape,
            std::string(what) + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                std::to_string(r) + "x" + std::to_string(c));
  };
  const auto vec = [](const Vector& v, std::size_t n, const char* what) {
    require(v.size() == n, ErrorKind::kShape, std::string(what) + " length mismatch");
  };
  require(model.head_dim >= 1, ErrorKind::kShape, "head_dim must be positive");
  for (const auto& l : model.layers) {
    const std::size_t a = l.heads * model.head_dim;
    if (l.has_mha) {
      vec(l.ln1_gamma, d, "ln1_gamma");
      vec(l.ln1_beta, d, "ln1_beta");
      mat(l.wq, a, d, "wq");
      mat(l.wk, a, d, "wk");
      mat(l.wv, a, d, "wv");
      mat(l.wo, d, a, "wo");
      vec(l.bq, a, "bq");
      vec(l.bk, a, "bk");
      vec(l.bv, a, "bv");
      vec(l.bo, d, "bo");
    } else {
      require(l.heads == 0 && l.wq.empty() && l.wo.empty(), ErrorKind::kShape, "removed MHA sublayer has weights");
    }
    if (l.has_ffn) {
      const std::size_t ff = l.ff_dim();
      vec(l.ln2_gamma, d, "ln2_gamma");
      vec(l.ln2_beta, d, "ln2_beta");
      mat(l.w1, ff, d, "w1");
      vec(l.b1, ff, "b1");
      mat(l.w2, d, ff, "w2");
      vec(l.b2, d, "b2");
    } else {
      require(l.w1.empty() && l.w2.empty(), ErrorKind::kShape, "removed FFN sublayer has weights");
    }
  }
  mat(model.classifier, model.classifier.rows(), d, "classifier");
  vec(model.classifier_bias, model.classifier.rows(), "classifier_bias");
  mat(model.vocab_proj, model.vocab_proj.rows(), d, "vocab_proj");
  vec(model.vocab_bias, model.vocab_proj.rows(), "vocab_bias");
}

Vector mean_pool(const Matrix& seq) {
  Vector out(seq.cols(), 0.0);
  if (seq.rows() == 0) return out;
  for (std::size_t t = 0; t < seq.rows(); ++t)
    for (std::size_t c = 0; c < seq.cols(); ++c) out[c] += seq(t, c);
  for (double& v : out) v /= static_cast<double>(seq.rows());
  return out;
}

LayerTrace encode(const EncoderModel& model, const SparsitySpec* spec, const Matrix& input) {
  require(input.cols() == model.hidden, ErrorKind::kShape,
          "input dim " + std::to_string(input.cols()) + " != model hidden " + std::to_string(model.hidden));
  if (spec != nullptr) check_matches(*spec, shape_of(model));
  LayerTrace trace;
  Matrix x = input;
  if (spec != nullptr) zero_masked_cols(x, &spec->hidden);
  trace.states.push_back(x);
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    LayerMasks masks;
    if (spec != nullptr) {
      masks.hidden = &spec->hidden;
      masks.heads = &spec->heads[l];
      masks.intermediate = &spec->intermediate[l];
      masks.mha_on = spec->mha[l] != 0;
      masks.ffn_on = spec->ffn[l] != 0;
    }
    x = run_block(model.layers[l], model.head_dim, masks, std::move(x), nullptr);
    trace.states.push_back(x);
  }
  trace.pooled = mean_pool(trace.states.back());
  return trace;
}

Vector classifier_logits(const EncoderModel& model, std::span<const double> pooled) {
  require(pooled.size() == model.classifier.cols(), ErrorKind::kShape, "pooled vector dim mismatch");
  Vector logits(model.classifier_bias);
  for (std::size_t c = 0; c < logits.size(); ++c) {
    auto w = model.classifier.row(c);
    for (std::size_t k = 0; k < pooled.size(); ++k) logits[c] += w[k] * pooled[k];
  }
  return logits;
}

Vector classify(const EncoderModel& model, const LayerTrace& trace) {
  return softmax(classifier_logits(model, trace.pooled));
}

TapedEncode::TapedEncode(const EncoderModel& model, const Matrix& input) : model_(&model) {
  require(input.cols() == model.hidden, ErrorKind::kShape, "input dim != model hidden");
  Matrix x = input;
  trace_.states.push_back(x);
  tapes_.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    x = run_block(model.layers[l], model.head_dim, LayerMasks{}, std::move(x), &tapes_[l]);
    trace_.states.push_back(x);
  }
  trace_.pooled = mean_pool(trace_.states.back());
}

TapedEncode::~TapedEncode() = default;
TapedEncode::TapedEncode(TapedEncode&&) noexcept = default;
TapedEncode& TapedEncode::operator=(TapedEncode&&) noexcept = default;

Matrix TapedEncode::backward(const std::vector<Matrix>& d_states, EncoderModel& grad) const {
  require(d_states.size() == trace_.states.size(), ErrorKind::kShape, "one gradient slot per trace state");
  const Matrix& last = trace_.states.back();
  Matrix d = d_states.back().empty() ? Matrix(last.rows(), last.cols()) : d_states.back();
  for (std::size_t l = model_->layers.size(); l-- > 0;) {
    d = block_backward(model_->layers[l], model_->head_dim, tapes_[l], std::move(d), grad.layers[l]);
    if (!d_states[l].empty()) axpy(d, d_states[l]);
  }
  return d;
}

EncoderModel zeros_like(const EncoderModel& model) {
  EncoderModel z = model;
  for (auto span : trainable_params(z)) std::fill(span.begin(), span.end(), 0.0);
  return z;
}

std::vector<std::span<double>> trainable_params(EncoderModel& model) {
  std::vector<std::span<double>> out;
  for (auto& l : model.layers) {
    for (Vector* v : {&l.ln1_gamma, &l.ln1_beta, &l.bq, &l.bk, &l.bv, &l.bo, &l.ln2_gamma, &l.ln2_beta, &l.b1, &l.b2})
      if (!v->empty()) out.emplace_back(*v);
    for (Matrix* m : {&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2})
      if (!m->empty()) out.emplace_back(m->values());
  }
  out.emplace_back(model.classifier.values());
  out.emplace_back(model.classifier_bias);
  out.emplace_back(model.vocab_proj.values());
  out.emplace_back(model.vocab_bias);
  return out;
}

}  // namespace prumux
