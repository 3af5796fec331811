// SPDX-License-Identifier: Apache-2.0
#include "prumux/toytrain.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>

#include "prumux/error.hpp"
#include "prumux/pruner.hpp"

namespace prumux {

namespace {

constexpr std::uint64_t kEmbeddingSalt = 0x243f6a8885a308d3ULL;
constexpr std::uint64_t kLabelSalt = 0x13198a2e03707344ULL;
constexpr std::uint64_t kDataSalt = 0xa4093822299f31d0ULL;
constexpr std::size_t kMaxMarginAttempts = 10000;

std::vector<std::size_t> random_tokens(Rng& rng, std::size_t vocab, std::size_t length) {
  std::vector<std::size_t> t(length);
  for (auto& id : t) id = rng.index(vocab);
  return t;
}

}  // namespace

namespace {

// Class scores u_c · (mean embedding − vocabulary mean embedding).
Vector label_scores(const SyntheticTask& task, std::span<const std::size_t> tokens) {
  const auto& o = task.options;
  Vector mean(o.dim, 0.0);
  for (std::size_t id : tokens) axpy(mean, task.embedding.row(id), 1.0 / static_cast<double>(tokens.size()));
  // Centre on the vocabulary mean so that labels split evenly.
  for (std::size_t v = 0; v < o.vocab; ++v) axpy(mean, task.embedding.row(v), -1.0 / static_cast<double>(o.vocab));
  Vector scores(o.classes, 0.0);
  for (std::size_t c = 0; c < o.classes; ++c)
    for (std::size_t k = 0; k < o.dim; ++k) scores[c] += task.label_weights(c, k) * mean[k];
  return scores;
}

}  // namespace

std::size_t label_of(const SyntheticTask& task, std::span<const std::size_t> tokens) {
  if (task.options.rule == LabelRule::kFirstToken) return tokens.front() % task.options.classes;
  const Vector s = label_scores(task, tokens);
  return static_cast<std::size_t>(std::max_element(s.begin(), s.end()) - s.begin());
}

double label_margin(const SyntheticTask& task, std::span<const std::size_t> tokens) {
  if (task.options.rule == LabelRule::kFirstToken) return INFINITY;
  Vector s = label_scores(task, tokens);
  std::sort(s.begin(), s.end(), std::greater<>());
  return s[0] - s[1];
}

SyntheticTask gen_task(RngKey seed, const TaskOptions& options) {
  require(options.vocab >= options.classes && options.classes >= 2, ErrorKind::kDomain, "need vocab >= classes >= 2");
  require(options.length >= 1 && options.width >= 1 && options.dim >= 1, ErrorKind::kDomain,
          "length, width and dim must be positive");
  require(options.rule != LabelRule::kFirstToken || options.vocab == options.classes, ErrorKind::kDomain,
          "first-token labelling needs vocab == classes");
  SyntheticTask task;
  task.options = options;
  task.seed = seed;
  Rng emb_rng(RngKey{seed.seed ^ kEmbeddingSalt});
  task.embedding = gaussian_matrix(emb_rng, options.vocab, options.dim, 1.0);
  Rng label_rng(RngKey{seed.seed ^ kLabelSalt});
  task.label_weights = gaussian_matrix(label_rng, options.classes, options.dim, 1.0);
  Rng data_rng(RngKey{seed.seed ^ kDataSalt});
  const auto make = [&](std::size_t count, std::vector<MuxExample>& out) {
    for (std::size_t e = 0; e < count; ++e) {
      MuxExample ex;
      for (std::size_t i = 0; i < options.width; ++i) {
        std::vector<std::size_t> tokens;
        std::size_t attempts = 0;
        do {
          require(attempts++ < kMaxMarginAttempts, ErrorKind::kDegenerate, "min_margin rejects every sequence");
          tokens = random_tokens(data_rng, options.vocab, options.length);
        } while (label_margin(task, tokens) < options.min_margin);
        ex.labels.push_back(label_of(task, tokens));
        ex.tokens.push_back(std::move(tokens));
      }
      out.push_back(std::move(ex));
    }
  };
  make(options.train_count, task.train);
  make(options.eval_count, task.eval);
  return task;
}

Phase parse_phase(const std::string& name) {
  if (name == "warmup") return Phase::kRetrievalWarmup;
  if (name == "task") return Phase::kTask;
  if (name == "prune") return Phase::kPruneDistill;
  fail(ErrorKind::kParse, "unknown phase '" + name + "' (expected warmup, task or prune)");
}

std::string to_string(Phase phase) {
  switch (phase) {
    case Phase::kRetrievalWarmup: return "warmup";
    case Phase::kTask: return "task";
    case Phase::kPruneDistill: return "prune";
  }
  return "?";
}

void validate(const TrainConfig& cfg) {
  require(cfg.learning_rate >= 0.0 && std::isfinite(cfg.learning_rate), ErrorKind::kDomain,
          "learning rate must be finite and non-negative");
  require(cfg.batch_size >= 1, ErrorKind::kDomain, "batch size must be positive");
  require(cfg.max_grad_norm >= 0.0, ErrorKind::kDomain, "max_grad_norm must be non-negative");
}

Matrix embed(const SyntheticTask& task, const MuxKit& kit, std::span<const std::size_t> tokens) {
  Matrix x(tokens.size(), kit.input_coords.size());
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    require(tokens[t] < task.embedding.rows(), ErrorKind::kIndex, "token id beyond vocabulary");
    auto src = task.embedding.row(tokens[t]);
    for (std::size_t c = 0; c < kit.input_coords.size(); ++c) x(t, c) = src[kit.input_coords[c]];
  }
  return x;
}

namespace {

Matrix mix(const SyntheticTask& task, const MuxKit& kit, const MuxExample& ex) {
  require(ex.tokens.size() == kit.width, ErrorKind::kShape, "example width != kit width");
  std::vector<Matrix> streams;
  streams.reserve(kit.width);
  for (const auto& t : ex.tokens) streams.push_back(embed(task, kit, t));
  return multiplex(kit, streams);
}

Matrix logits_rows(const Matrix& h, const Matrix& w, const Vector& b) {
  Matrix y = matmul_nt(h, w);
  for (std::size_t t = 0; t < y.rows(); ++t)
    for (std::size_t c = 0; c < y.cols(); ++c) y(t, c) += b[c];
  return y;
}

// Scratch gradient sink for a demux map when the caller does not want kit gradients.
DemuxFn zero_fn(const DemuxFn& fn) {
  DemuxFn z = fn;
  z.first.weight.fill(0.0);
  std::fill(z.first.bias.begin(), z.first.bias.end(), 0.0);
  if (z.second) {
    z.second->weight.fill(0.0);
    std::fill(z.second->bias.begin(), z.second->bias.end(), 0.0);
  }
  return z;
}

struct StreamHead {
  Vector logits;
  Matrix demuxed;
  Vector pooled;
};

StreamHead classify_stream(const EncoderModel& model, const MuxKit& kit, const Matrix& final_state, std::size_t i) {
  StreamHead s;
  s.demuxed = demultiplex(kit, final_state, i);
  s.pooled = mean_pool(s.demuxed);
  s.logits = classifier_logits(model, s.pooled);
  return s;
}

// Pushes d(logits) of stream i back to the shared final state; accumulates head and demux grads.
void classify_stream_backward(const EncoderModel& model, const MuxKit& kit, const Matrix& final_state, std::size_t i,
                              const StreamHead& s, const Vector& d_logits, EncoderModel* d_model, MuxKit* d_kit,
                              Matrix& d_final) {
  Vector d_pooled(s.pooled.size(), 0.0);
  for (std::size_t c = 0; c < d_logits.size(); ++c) {
    if (d_model != nullptr) {
      axpy(d_model->classifier.row(c), s.pooled, d_logits[c]);
      d_model->classifier_bias[c] += d_logits[c];
    }
    axpy(d_pooled, model.classifier.row(c), d_logits[c]);
  }
  Matrix d_demuxed(s.demuxed.rows(), s.demuxed.cols());
  const double inv = 1.0 / static_cast<double>(s.demuxed.rows());
  for (std::size_t t = 0; t < d_demuxed.rows(); ++t)
    for (std::size_t c = 0; c < d_demuxed.cols(); ++c) d_demuxed(t, c) = d_pooled[c] * inv;
  DemuxFn scratch;
  DemuxFn* sink = nullptr;
  if (d_kit != nullptr) {
    sink = &d_kit->demux[i];
  } else {
    scratch = zero_fn(kit.demux[i]);
    sink = &scratch;
  }
  axpy(d_final, demultiplex_backward(kit, final_state, i, d_demuxed, *sink));
}

double cross_entropy(const Vector& logits, std::size_t label, Vector* d_logits) {
  const Vector p = softmax(logits);
  if (d_logits != nullptr) {
    *d_logits = p;
    if (p[label] >= kLogProbFloor) (*d_logits)[label] -= 1.0;
    else std::fill(d_logits->begin(), d_logits->end(), 0.0);
  }
  return -std::log(std::max(p[label], kLogProbFloor));
}

}  // namespace

double retrieval_example_loss(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                              const MuxExample& ex, std::size_t stream, EncoderModel* d_model, MuxKit* d_kit) {
  require(stream < kit.width, ErrorKind::kIndex, "stream index out of range");
  const Matrix mixed = mix(task, kit, ex);
  const bool want_grad = d_model != nullptr || d_kit != nullptr;
  if (!want_grad) {
    const LayerTrace trace = encode(model, mixed);
    const Matrix h = demultiplex(kit, trace.final_state(), stream);
    return retrieval_loss_from_logits(logits_rows(h, model.vocab_proj, model.vocab_bias), ex.tokens[stream]);
  }
  const TapedEncode enc(model, mixed);
  const Matrix& final_state = enc.trace().final_state();
  const Matrix h = demultiplex(kit, final_state, stream);
  Matrix d_logits;
  const double loss =
      retrieval_loss_from_logits(logits_rows(h, model.vocab_proj, model.vocab_bias), ex.tokens[stream], &d_logits);
  if (d_model != nullptr) {
    axpy(d_model->vocab_proj, matmul_tn(d_logits, h));
    for (std::size_t t = 0; t < d_logits.rows(); ++t)
      for (std::size_t v = 0; v < d_logits.cols(); ++v) d_model->vocab_bias[v] += d_logits(t, v);
  }
  const Matrix d_h = matmul(d_logits, model.vocab_proj);
  DemuxFn scratch;
  DemuxFn* sink = nullptr;
  if (d_kit != nullptr) {
    sink = &d_kit->demux[stream];
  } else {
    scratch = zero_fn(kit.demux[stream]);
    sink = &scratch;
  }
  std::vector<Matrix> d_states(enc.trace().states.size());
  d_states.back() = demultiplex_backward(kit, final_state, stream, d_h, *sink);
  if (d_model != nullptr) enc.backward(d_states, *d_model);
  return loss;
}

double task_example_loss(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                         const MuxExample& ex, EncoderModel* d_model, MuxKit* d_kit) {
  const Matrix mixed = mix(task, kit, ex);
  const double inv_n = 1.0 / static_cast<double>(kit.width);
  const bool want_grad = d_model != nullptr || d_kit != nullptr;
  if (!want_grad) {
    const LayerTrace trace = encode(model, mixed);
    double loss = 0.0;
    for (std::size_t i = 0; i < kit.width; ++i)
      loss += cross_entropy(classify_stream(model, kit, trace.final_state(), i).logits, ex.labels[i], nullptr);
    return loss * inv_n;
  }
  const TapedEncode enc(model, mixed);
  const Matrix& final_state = enc.trace().final_state();
  Matrix d_final(final_state.rows(), final_state.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < kit.width; ++i) {
    const StreamHead s = classify_stream(model, kit, final_state, i);
    Vector d_logits;
    loss += cross_entropy(s.logits, ex.labels[i], &d_logits);
    for (double& g : d_logits) g *= inv_n;
    classify_stream_backward(model, kit, final_state, i, s, d_logits, d_model, d_kit, d_final);
  }
  if (d_model != nullptr) {
    std::vector<Matrix> d_states(enc.trace().states.size());
    d_states.back() = std::move(d_final);
    enc.backward(d_states, *d_model);
  }
  return loss * inv_n;
}

double distill_example_loss(const EncoderModel& student, const MuxKit& student_kit, const DistillMapping& mapping,
                            const Teacher& teacher, const SyntheticTask& task, const MuxExample& ex,
                            const LossWeights& weights, EncoderModel* d_student, MuxKit* d_kit,
                            std::vector<Matrix>* d_transforms) {
  const LayerTrace t_trace = encode(*teacher.model, mix(task, *teacher.kit, ex));
  const double inv_n = 1.0 / static_cast<double>(student_kit.width);
  const TapedEncode enc(student, mix(task, student_kit, ex));
  const Matrix& final_state = enc.trace().final_state();
  Matrix d_final(final_state.rows(), final_state.cols());
  double ce = 0.0;
  const bool want_grad = d_student != nullptr || d_kit != nullptr || d_transforms != nullptr;
  for (std::size_t i = 0; i < student_kit.width; ++i) {
    const StreamHead s = classify_stream(student, student_kit, final_state, i);
    const Vector t_logits = classify_stream(*teacher.model, *teacher.kit, t_trace.final_state(), i).logits;
    Vector d_logits;
    ce += soft_cross_entropy(s.logits, t_logits, weights.temperature, want_grad ? &d_logits : nullptr);
    if (want_grad) {
      for (double& g : d_logits) g *= inv_n * weights.ce;
      classify_stream_backward(student, student_kit, final_state, i, s, d_logits, d_student, d_kit, d_final);
    }
  }
  ce *= inv_n;
  LayerLossGrad lg;
  const double layer = layer_loss_with_grad(enc.trace(), t_trace, mapping, lg);
  if (want_grad) {
    std::vector<Matrix> d_states(enc.trace().states.size());
    for (std::size_t k = 0; k < d_states.size(); ++k) {
      if (!lg.d_student_states[k].empty()) {
        d_states[k] = lg.d_student_states[k];
        for (double& g : d_states[k].values()) g *= weights.layer;
      }
    }
    if (d_states.back().empty())
      d_states.back() = std::move(d_final);
    else
      axpy(d_states.back(), d_final);
    if (d_student != nullptr) enc.backward(d_states, *d_student);
    if (d_transforms != nullptr) {
      for (std::size_t k = 0; k < lg.d_transforms.size(); ++k) axpy((*d_transforms)[k], lg.d_transforms[k], weights.layer);
    }
  }
  return combined_loss(ce, layer, weights);
}

double retrieval_accuracy(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                          std::span<const MuxExample> examples) {
  std::size_t hits = 0, total = 0;
  for (const auto& ex : examples) {
    const LayerTrace trace = encode(model, mix(task, kit, ex));
    for (std::size_t i = 0; i < kit.width; ++i) {
      const Matrix logits = logits_rows(demultiplex(kit, trace.final_state(), i), model.vocab_proj, model.vocab_bias);
      for (std::size_t t = 0; t < logits.rows(); ++t) {
        auto row = logits.row(t);
        const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += pred == ex.tokens[i][t] ? 1 : 0;
        ++total;
      }
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

double task_accuracy(const EncoderModel& model, const MuxKit& kit, const SyntheticTask& task,
                     std::span<const MuxExample> examples) {
  std::size_t hits = 0, total = 0;
  for (const auto& ex : examples) {
    const LayerTrace trace = encode(model, mix(task, kit, ex));
    for (std::size_t i = 0; i < kit.width; ++i) {
      const Vector logits = classify_stream(model, kit, trace.final_state(), i).logits;
      const auto pred = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      hits += pred == ex.labels[i] ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

namespace {

struct ParamGroup {
  std::vector<std::span<double>> params;
  std::vector<std::span<double>> grads;
};

void zero(const std::vector<std::span<double>>& spans) {
  for (auto s : spans) std::fill(s.begin(), s.end(), 0.0);
}

// One SGD update with the batch-mean gradient; gradients are cleared afterwards.
void sgd_update(const ParamGroup& group, double lr, std::size_t batch, double max_norm) {
  const double inv = 1.0 / static_cast<double>(batch);
  double scale = inv;
  if (max_norm > 0.0) {
    double sq = 0.0;
    for (auto g : group.grads)
      for (double v : g) sq += v * v * inv * inv;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) scale *= max_norm / norm;
  }
  for (std::size_t k = 0; k < group.params.size(); ++k) axpy(group.params[k], group.grads[k], -lr * scale);
  zero(group.grads);
}

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  return order;
}

void check_divergence(std::vector<EpochStats>& history, double loss) {
  require(std::isfinite(loss), ErrorKind::kDivergence, "epoch loss is not finite");
  require(history.empty() || loss <= 10.0 * history.front().loss, ErrorKind::kDivergence,
          "epoch loss " + std::to_string(loss) + " exceeds 10x the initial epoch loss");
}

// Runs cfg.epochs of shuffled mini-batch SGD. step(example, batch_rng_draw) returns the example loss
// and accumulates gradients into group.grads.
template <class BatchSetup, class Step, class Eval>
std::vector<EpochStats> sgd_loop(const ParamGroup& group, std::size_t n_examples, const TrainConfig& cfg,
                                 BatchSetup&& on_batch, Step&& step, Eval&& eval) {
  validate(cfg);
  Rng rng(cfg.seed);
  std::vector<EpochStats> history;
  zero(group.grads);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = shuffled(n_examples, rng);
    double total = 0.0;
    for (std::size_t start = 0; start < n_examples; start += cfg.batch_size) {
      const std::size_t end = std::min(n_examples, start + cfg.batch_size);
      on_batch(rng);
      for (std::size_t k = start; k < end; ++k) total += step(order[k]);
      sgd_update(group, cfg.learning_rate, end - start, cfg.max_grad_norm);
    }
    const double loss = total / static_cast<double>(std::max<std::size_t>(n_examples, 1));
    check_divergence(history, loss);
    history.push_back({epoch + 1, loss, eval()});
  }
  return history;
}

ParamGroup model_group(EncoderModel& model, EncoderModel& grad, MuxKit& kit, MuxKit& kit_grad) {
  ParamGroup g{trainable_params(model), trainable_params(grad)};
  auto kp = trainable_params(kit);
  auto kg = trainable_params(kit_grad);
  g.params.insert(g.params.end(), kp.begin(), kp.end());
  g.grads.insert(g.grads.end(), kg.begin(), kg.end());
  return g;
}

}  // namespace

TrainResult train_phase1(MuxKit kit, EncoderModel model, const SyntheticTask& task, const TrainConfig& cfg) {
  require(cfg.phase == Phase::kRetrievalWarmup, ErrorKind::kDomain, "train_phase1 needs phase = warmup");
  validate(kit);
  validate(model);
  EncoderModel d_model = zeros_like(model);
  MuxKit d_kit = zeros_like(kit);
  const ParamGroup group = model_group(model, d_model, kit, d_kit);
  std::size_t sentence = 0;
  auto history = sgd_loop(
      group, task.train.size(), cfg, [&](Rng& rng) { sentence = rng.index(kit.width); },
      [&](std::size_t idx) {
        return retrieval_example_loss(model, kit, task, task.train[idx], sentence, &d_model, &d_kit);
      },
      [&] { return retrieval_accuracy(model, kit, task, task.eval); });
  return {std::move(kit), std::move(model), std::move(history)};
}

TrainResult train_task(MuxKit kit, EncoderModel model, const SyntheticTask& task, const TrainConfig& cfg) {
  require(cfg.phase == Phase::kTask, ErrorKind::kDomain, "train_task needs phase = task");
  validate(kit);
  validate(model);
  require(model.classes() == task.options.classes, ErrorKind::kShape, "classifier size != task classes");
  EncoderModel d_model = zeros_like(model);
  MuxKit d_kit = zeros_like(kit);
  const ParamGroup group = model_group(model, d_model, kit, d_kit);
  auto history = sgd_loop(
      group, task.train.size(), cfg, [](Rng&) {},
      [&](std::size_t idx) { return task_example_loss(model, kit, task, task.train[idx], &d_model, &d_kit); },
      [&] { return task_accuracy(model, kit, task, task.eval); });
  return {std::move(kit), std::move(model), std::move(history)};
}

DistillResult train_prune_distill(const MuxKit& teacher_kit, const EncoderModel& teacher, const SparsitySpec& spec,
                                  const SyntheticTask& task, const TrainConfig& cfg, const LossWeights& weights) {
  require(cfg.phase == Phase::kPruneDistill, ErrorKind::kDomain, "train_prune_distill needs phase = prune");
  validate(weights);
  require(is_canonical(spec), ErrorKind::kShape, "prune-distill needs a canonical spec");
  EncoderModel student = compact(teacher, spec);
  MuxKit kit = align_demux(teacher_kit, spec.hidden);
  DistillResult result;
  result.untuned_accuracy = task_accuracy(student, kit, task, task.eval);
  const auto layers = live_layers(student);
  if (!layers.empty()) result.mapping = build_mapping(layers, teacher.layers.size(), spec.hidden);
  EncoderModel d_model = zeros_like(student);
  MuxKit d_kit = zeros_like(kit);
  ParamGroup group = model_group(student, d_model, kit, d_kit);
  std::vector<Matrix> d_transforms;
  for (auto& m : result.mapping.matches) {
    d_transforms.emplace_back(m.transform.rows(), m.transform.cols());
    group.params.emplace_back(m.transform.values());
  }
  for (auto& g : d_transforms) group.grads.emplace_back(g.values());
  const Teacher t{&teacher, &teacher_kit};
  auto history = sgd_loop(
      group, task.train.size(), cfg, [](Rng&) {},
      [&](std::size_t idx) {
        return distill_example_loss(student, kit, result.mapping, t, task, task.train[idx], weights, &d_model, &d_kit,
                                    &d_transforms);
      },
      [&] { return task_accuracy(student, kit, task, task.eval); });
  result.student = {std::move(kit), std::move(student), std::move(history)};
  return result;
}

double grad_check(const LossFn& loss, std::span<const double> analytic, std::span<const double> point, double eps) {
  require(eps > 0.0 && eps <= 1e-2, ErrorKind::kDomain, "grad_check eps must lie in (0, 1e-2]");
  require(analytic.size() == point.size(), ErrorKind::kShape, "gradient length != parameter count");
  Vector x(point.begin(), point.end());
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = loss(x);
    x[i] = saved - eps;
    const double down = loss(x);
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max(std::abs(analytic[i]) + std::abs(numeric), kGradCheckFloor);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

Vector flatten(const std::vector<std::span<double>>& params) {
  Vector out;
  for (auto s : params) out.insert(out.end(), s.begin(), s.end());
  return out;
}

void unflatten(const std::vector<std::span<double>>& params, std::span<const double> values) {
  std::size_t total = 0;
  for (auto s : params) total += s.size();
  require(total == values.size(), ErrorKind::kShape, "parameter vector length mismatch");
  std::size_t k = 0;
  for (auto s : params)
    for (double& v : s) v = values[k++];
}

}  // namespace prumux
