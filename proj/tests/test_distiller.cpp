// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "prumux/distiller.hpp"
#include "prumux/error.hpp"
#include "support.hpp"

using namespace prumux;
using testing::random_matrix;

namespace {

LayerTrace trace_of(std::vector<Matrix> states) {
  LayerTrace t;
  t.states = std::move(states);
  t.pooled = mean_pool(t.states.back());
  return t;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kEmptyRequest;
}

}  // namespace

TEST_CASE("build_mapping examples") {
  SUBCASE("no layers pruned gives the identity map") {
    const std::vector<std::size_t> live{0, 1, 2};
    const DistillMapping m = build_mapping(live, 3, Mask{1, 1});
    REQUIRE(m.matches.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(m.matches[i].student_layer == i);
      CHECK(m.matches[i].teacher_layer == i);
      CHECK(m.matches[i].transform == Matrix::identity(2));
    }
  }
  SUBCASE("surviving layers keep their original index") {
    const std::vector<std::size_t> live{0, 2};
    const DistillMapping m = build_mapping(live, 4, Mask{1, 1, 1, 1});
    REQUIRE(m.matches.size() == 2);
    CHECK(m.matches[0].teacher_layer == 0);
    CHECK(m.matches[1].student_layer == 2);
    CHECK(m.matches[1].teacher_layer == 2);
  }
  SUBCASE("hidden mask keeping 3 of 4 gives a row selection of the identity") {
    const std::vector<std::size_t> live{0};
    const DistillMapping m = build_mapping(live, 1, Mask{1, 0, 1, 1});
    CHECK(m.matches[0].transform == Matrix::from_rows({{1, 0, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}}));
  }
  SUBCASE("errors") {
    const std::vector<std::size_t> none;
    CHECK(kind_of([&] { build_mapping(none, 2, Mask{1}); }) == ErrorKind::kDegenerate);
    const std::vector<std::size_t> far{3};
    CHECK(kind_of([&] { build_mapping(far, 2, Mask{1}); }) == ErrorKind::kIndex);
    const std::vector<std::size_t> dup{1, 1};
    CHECK(kind_of([&] { build_mapping(dup, 2, Mask{1}); }) == ErrorKind::kDuplicate);
    const std::vector<std::size_t> one{0};
    CHECK(kind_of([&] { build_mapping(one, 2, Mask{0, 0}); }) == ErrorKind::kDegenerate);
  }
}

TEST_CASE("live_layers skips emptied slots") {
  EncoderConfig cfg;
  cfg.layers = 3;
  cfg.hidden = 4;
  cfg.ff = 4;
  EncoderModel m = make_encoder(cfg, RngKey{1});
  m.layers[1].has_mha = false;
  m.layers[1].has_ffn = false;
  m.layers[2].has_mha = false;
  CHECK(live_layers(m) == std::vector<std::size_t>{0, 2});
}

TEST_CASE("layer_loss examples") {
  Rng rng(RngKey{2});
  SUBCASE("identical traces with identity transforms") {
    const LayerTrace t = trace_of({random_matrix(rng, 3, 4), random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)});
    const std::vector<std::size_t> live{0, 1};
    CHECK(layer_loss(t, t, build_mapping(live, 2, Mask{1, 1, 1, 1})) == 0.0);
  }
  SUBCASE("one dimension, one position, one layer") {
    const LayerTrace s = trace_of({Matrix(1, 1, 0.0), Matrix(1, 1, 2.0)});
    const LayerTrace t = trace_of({Matrix(1, 1, 0.0), Matrix(1, 1, 5.0)});
    const std::vector<std::size_t> live{0};
    CHECK(layer_loss(s, t, build_mapping(live, 1, Mask{1})) == 9.0);
  }
  SUBCASE("zero transforms give the mean square of the teacher states") {
    const LayerTrace s = trace_of({random_matrix(rng, 3, 2), random_matrix(rng, 3, 2), random_matrix(rng, 3, 2)});
    const LayerTrace t = trace_of({random_matrix(rng, 3, 4), random_matrix(rng, 3, 4), random_matrix(rng, 3, 4)});
    const std::vector<std::size_t> live{0, 1};
    DistillMapping m = build_mapping(live, 2, Mask{1, 0, 0, 1});
    for (auto& match : m.matches) match.transform.fill(0.0);
    double expect = 0.0;
    for (std::size_t i = 1; i <= 2; ++i) {
      double sq = 0.0;
      for (double v : t.states[i].values()) sq += v * v;
      expect += sq / 12.0;
    }
    CHECK(layer_loss(s, t, m) == doctest::Approx(expect).epsilon(1e-14));
  }
  SUBCASE("shape errors") {
    const LayerTrace s = trace_of({Matrix(2, 3), Matrix(2, 3)});
    const LayerTrace t = trace_of({Matrix(2, 4), Matrix(2, 4)});
    const std::vector<std::size_t> live{0};
    CHECK(kind_of([&] { layer_loss(s, t, build_mapping(live, 1, Mask{1, 1, 1, 1})); }) == ErrorKind::kShape);
    const std::vector<std::size_t> deep{1};
    CHECK(kind_of([&] { layer_loss(s, s, build_mapping(deep, 2, Mask{1, 1, 1})); }) == ErrorKind::kShape);
  }
}

TEST_CASE("combined_loss examples") {
  LossWeights w;
  CHECK(combined_loss(2.0, 4.0, w) == doctest::Approx(3.8).epsilon(1e-15));
  w.layer = 0.0;
  w.ce = 1.0;
  CHECK(combined_loss(2.0, 4.0, w) == 2.0);
  w.layer = 1.0;
  w.ce = 0.0;
  CHECK(combined_loss(2.0, 4.0, w) == 4.0);
}

TEST_CASE("LossWeights validation") {
  LossWeights w;
  CHECK_NOTHROW(validate(w));
  w.layer = 0.8;
  CHECK(kind_of([&] { validate(w); }) == ErrorKind::kDomain);
  w = LossWeights{};
  w.temperature = 0.0;
  CHECK(kind_of([&] { validate(w); }) == ErrorKind::kDomain);
  w = LossWeights{1.5, -0.5, 2.0};
  CHECK(kind_of([&] { validate(w); }) == ErrorKind::kDomain);
}

TEST_CASE("soft_cross_entropy examples") {
  // Equal logits: the entropy of a uniform distribution over 3 classes.
  const Vector z{0.3, 0.3, 0.3};
  CHECK(soft_cross_entropy(z, z, 2.0) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  // Self-distillation reaches the teacher entropy at temperature T and has zero gradient.
  const Vector t{1.0, -2.0, 0.5};
  const Vector q = softmax(Vector{0.5, -1.0, 0.25});
  double entropy = 0.0;
  for (double p : q) entropy -= p * std::log(p);
  Vector d;
  CHECK(soft_cross_entropy(t, t, 2.0, &d) == doctest::Approx(entropy).epsilon(1e-14));
  CHECK(testing::max_abs(d) <= 1e-15);
  CHECK(kind_of([&] { soft_cross_entropy(t, Vector{1.0}, 2.0); }) == ErrorKind::kShape);
  CHECK(kind_of([&] { soft_cross_entropy(t, t, 0.0); }) == ErrorKind::kDomain);
}

TEST_CASE("property: layer_loss is zero iff the transformed student matches the teacher") {
  Rng rng(RngKey{3});
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t layers = 1 + rng.index(3), len = 1 + rng.index(3), ds = 1 + rng.index(3),
                      dt = ds + rng.index(3);
    std::vector<Matrix> ss{Matrix(len, ds)}, ts{Matrix(len, dt)};
    DistillMapping m;
    for (std::size_t l = 0; l < layers; ++l) {
      ss.push_back(random_matrix(rng, len, ds));
      const Matrix w = random_matrix(rng, ds, dt);
      ts.push_back(matmul(ss.back(), w));
      m.matches.push_back({l, l, w});
    }
    const LayerTrace s = trace_of(ss), t = trace_of(ts);
    CHECK(layer_loss(s, t, m) <= 1e-12);
    // Nudging one teacher entry by 1e-3 gives a strictly positive loss.
    LayerTrace t2 = t;
    t2.states[1 + rng.index(layers)].values()[0] += 1e-3;
    CHECK(layer_loss(s, t2, m) > 1e-12);
  }
}

TEST_CASE("property: layer_loss does not depend on the order of the matched set") {
  Rng rng(RngKey{4});
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t layers = 2 + rng.index(3);
    std::vector<Matrix> ss{Matrix(2, 3)}, ts{Matrix(2, 3)};
    for (std::size_t l = 0; l < layers; ++l) {
      ss.push_back(random_matrix(rng, 2, 3));
      ts.push_back(random_matrix(rng, 2, 3));
    }
    std::vector<std::size_t> live(layers);
    for (std::size_t l = 0; l < layers; ++l) live[l] = l;
    DistillMapping m = build_mapping(live, layers, Mask{1, 1, 1});
    for (auto& match : m.matches) match.transform = random_matrix(rng, 3, 3);
    const double base = layer_loss(trace_of(ss), trace_of(ts), m);
    DistillMapping shuffled = m;
    std::reverse(shuffled.matches.begin(), shuffled.matches.end());
    std::rotate(shuffled.matches.begin(), shuffled.matches.begin() + 1, shuffled.matches.end());
    CHECK(layer_loss(trace_of(ss), trace_of(ts), shuffled) == doctest::Approx(base).epsilon(1e-13));
  }
}
