// SPDX-License-Identifier: Apache-2.0
#include "prumux/distiller.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "prumux/error.hpp"

namespace prumux {

void validate(const LossWeights& w) {
  require(w.layer >= 0.0 && w.layer <= 1.0 && w.ce >= 0.0 && w.ce <= 1.0, ErrorKind::kDomain,
          "distillation alphas must lie in [0, 1]");
  require(std::abs(w.layer + w.ce - 1.0) <= 1e-12, ErrorKind::kDomain, "distillation alphas must sum to 1");
  require(w.temperature > 0.0, ErrorKind::kDomain, "distillation temperature must be positive");
}

DistillMapping build_mapping(std::span<const std::size_t> student_live_layers, std::size_t teacher_layers,
                             const Mask& hidden_live) {
  require(!student_live_layers.empty(), ErrorKind::kDegenerate, "student has no layers");
  require(count_live(hidden_live) > 0, ErrorKind::kDegenerate, "student has no hidden coordinates");
  DistillMapping mapping;
  const Matrix transform = selection_matrix(hidden_live);
  for (std::size_t layer : student_live_layers) {
    require(layer < teacher_layers, ErrorKind::kIndex,
            "student layer " + std::to_string(layer) + " has no teacher counterpart");
    for (const auto& m : mapping.matches)
      require(m.student_layer != layer, ErrorKind::kDuplicate, "student layer listed twice");
    mapping.matches.push_back({layer, layer, transform});
  }
  return mapping;
}

std::vector<std::size_t> live_layers(const EncoderModel& model) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < model.layers.size(); ++l)
    if (model.layers[l].has_mha || model.layers[l].has_ffn) out.push_back(l);
  return out;
}

double layer_loss_with_grad(const LayerTrace& student, const LayerTrace& teacher, const DistillMapping& mapping,
                            LayerLossGrad& grad) {
  grad.d_student_states.assign(student.states.size(), Matrix{});
  grad.d_transforms.clear();
  double loss = 0.0;
  for (const auto& m : mapping.matches) {
    require(m.student_layer + 1 < student.states.size() && m.teacher_layer + 1 < teacher.states.size(),
            ErrorKind::kShape, "mapping refers to a layer missing from a trace");
    const Matrix& hs = student.states[m.student_layer + 1];
    const Matrix& ht = teacher.states[m.teacher_layer + 1];
    require(hs.cols() == m.transform.rows() && ht.cols() == m.transform.cols() && hs.rows() == ht.rows(),
            ErrorKind::kShape, "trace and transform shapes disagree");
    Matrix diff = matmul(hs, m.transform);
    axpy(diff, ht, -1.0);
    const double count = static_cast<double>(diff.size());
    double sq = 0.0;
    for (double v : diff.values()) sq += v * v;
    loss += sq / count;
    Matrix d_pred = diff;
    for (double& v : d_pred.values()) v *= 2.0 / count;
    grad.d_transforms.push_back(matmul_tn(hs, d_pred));
    Matrix& slot = grad.d_student_states[m.student_layer + 1];
    const Matrix d_hs = matmul_nt(d_pred, m.transform);
    if (slot.empty())
      slot = d_hs;
    else
      axpy(slot, d_hs);
  }
  return loss;
}

double layer_loss(const LayerTrace& student, const LayerTrace& teacher, const DistillMapping& mapping) {
  LayerLossGrad unused;
  return layer_loss_with_grad(student, teacher, mapping, unused);
}

double combined_loss(double ce, double layer, const LossWeights& w) { return w.ce * ce + w.layer * layer; }

double soft_cross_entropy(std::span<const double> student_logits, std::span<const double> teacher_logits,
                          double temperature, Vector* d_student_logits) {
  require(student_logits.size() == teacher_logits.size(), ErrorKind::kShape, "logit count mismatch");
  require(temperature > 0.0, ErrorKind::kDomain, "temperature must be positive");
  Vector s(student_logits.begin(), student_logits.end());
  Vector t(teacher_logits.begin(), teacher_logits.end());
  for (double& v : s) v /= temperature;
  for (double& v : t) v /= temperature;
  const Vector q = softmax(t);
  const Vector p = softmax(s);
  const double mx = *std::max_element(s.begin(), s.end());
  double lse = 0.0;
  for (double v : s) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  double loss = 0.0;
  for (std::size_t c = 0; c < q.size(); ++c) loss -= q[c] * (s[c] - lse);
  if (d_student_logits != nullptr) {
    d_student_logits->resize(q.size());
    for (std::size_t c = 0; c < q.size(); ++c) (*d_student_logits)[c] = (p[c] - q[c]) / temperature;
  }
  return loss;
}

}  // namespace prumux
