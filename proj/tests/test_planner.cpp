// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "doctest.h"
#include "prumux/error.hpp"
#include "prumux/planner.hpp"
#include "support.hpp"
#include "synthetic_surface.hpp"

using namespace prumux;
using namespace prumux::testing;

namespace {

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::kEmptyRequest;
}

double linear_surface(double n, double s) { return 0.9 - 0.01 * n - 0.05 * s; }

std::vector<MeasurementRecord> grid_records(const std::vector<std::size_t>& ns, const std::vector<double>& ss,
                                            double (*f)(double, double)) {
  std::vector<MeasurementRecord> out;
  for (std::size_t n : ns)
    for (double s : ss) out.push_back({"t", n, s, f(static_cast<double>(n), s), 1.0});
  return out;
}

// Exhaustive ranking over candidates with the given accuracy and throughput functions.
template <class Acc, class Thr>
std::vector<Candidate> brute_force(const std::vector<Candidate>& cands, double xi, Acc acc, Thr thr, std::size_t k) {
  std::vector<std::pair<double, Candidate>> scored;
  for (const auto& c : cands) {
    const double a = acc(c), t = thr(c);
    if (a >= xi - kThresholdSlack) scored.push_back({t, c});
  }
  std::sort(scored.begin(), scored.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < std::min(k, scored.size()); ++i) out.push_back(scored[i].second);
  return out;
}

}  // namespace

TEST_CASE("measurement validation") {
  std::vector<MeasurementRecord> rows{{"a", 1, 0.0, 0.9, 1.0}, {"a", 2, 0.5, 0.85, 3.0}};
  CHECK_NOTHROW(validate(rows));
  rows.push_back({"a", 2, 0.5, 0.8, 3.0});
  CHECK(kind_of([&] { validate(rows); }) == ErrorKind::kDuplicate);
  rows.pop_back();
  rows.push_back({"b", 2, 0.5, 0.8, 3.0});
  CHECK_NOTHROW(validate(rows));
  for (const MeasurementRecord& bad : {MeasurementRecord{"a", 0, 0.0, 0.9, 1.0}, MeasurementRecord{"a", 3, 1.5, 0.9, 1.0},
                                       MeasurementRecord{"a", 3, 0.5, 1.1, 1.0}, MeasurementRecord{"a", 3, 0.5, 0.9, 0.0},
                                       MeasurementRecord{"", 3, 0.5, 0.9, 1.0}}) {
    std::vector<MeasurementRecord> r{bad};
    CHECK(kind_of([&] { validate(r); }) == ErrorKind::kDomain);
  }
  CHECK(task_names(rows) == std::vector<std::string>{"a", "b"});
  CHECK(rows_for(rows, "b").size() == 1);
}

TEST_CASE("bilinear coefficients reproduce the corners") {
  const auto k = bilinear_coefficients(2.0, 5.0, 0.6, 0.7, 0.8, 0.7, 0.75, 0.6);
  const auto at = [&](double n, double s) { return k[0] + k[1] * s + k[2] * n + k[3] * n * s; };
  CHECK(at(2.0, 0.6) == doctest::Approx(0.8).epsilon(1e-13));
  CHECK(at(5.0, 0.6) == doctest::Approx(0.7).epsilon(1e-13));
  CHECK(at(2.0, 0.7) == doctest::Approx(0.75).epsilon(1e-13));
  CHECK(at(5.0, 0.7) == doctest::Approx(0.6).epsilon(1e-13));
}

TEST_CASE("fit_accuracy examples and errors") {
  const std::vector<std::size_t> ns{2, 5, 10};
  const std::vector<double> ss{0.6, 0.7, 0.8, 0.9, 0.95};
  const auto rows = grid_records(ns, ss, linear_surface);
  const AccuracyModel m = fit_accuracy(rows);
  CHECK(m.widths() == Vector{2, 5, 10});
  CHECK(m.sparsities() == Vector(ss.begin(), ss.end()));
  CHECK(m(3.5, 0.65) == doctest::Approx(0.8325).epsilon(1e-12));
  CHECK(std::abs(m(3.5, 0.65) - 0.8325) <= 1e-9);
  CHECK(kind_of([&] { m(1.5, 0.7); }) == ErrorKind::kDomain);
  CHECK(kind_of([&] { m(3.0, 0.97); }) == ErrorKind::kDomain);
  CHECK(kind_of([&] { m.coefficients(2, 0); }) == ErrorKind::kIndex);

  auto missing = rows;
  missing.erase(missing.begin() + 3);
  CHECK(kind_of([&] { fit_accuracy(missing); }) == ErrorKind::kIncompleteGrid);
  auto dup = rows;
  dup.push_back(dup.front());
  CHECK(kind_of([&] { fit_accuracy(dup); }) == ErrorKind::kDuplicate);
  const auto one_column = grid_records(ns, {0.6}, linear_surface);
  CHECK(kind_of([&] { fit_accuracy(one_column); }) == ErrorKind::kDegenerate);
  // Rows with N = 1 or s = 0 are not knots.
  auto extra = rows;
  extra.push_back({"t", 1, 0.0, 0.9, 1.0});
  extra.push_back({"t", 5, 0.0, 0.85, 5.0});
  CHECK(fit_accuracy(extra).widths() == m.widths());
}

TEST_CASE("property: collocation at every knot and cell centers equal corner means") {
  Rng rng(RngKey{1});
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t p = 2 + rng.index(4), q = 2 + rng.index(5);
    Vector ns{2.0}, ss{0.1 + 0.1 * rng.uniform()};
    for (std::size_t i = 1; i < p; ++i) ns.push_back(ns.back() + 1.0 + static_cast<double>(rng.index(4)));
    for (std::size_t j = 1; j < q; ++j) ss.push_back(ss.back() + 0.01 + 0.1 * rng.uniform());
    Matrix grid(p, q);
    for (double& v : grid.values()) v = rng.uniform();
    const AccuracyModel m(ns, ss, grid);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < q; ++j) CHECK(std::abs(m(ns[i], ss[j]) - grid(i, j)) <= 1e-9);
    for (std::size_t i = 0; i + 1 < p; ++i)
      for (std::size_t j = 0; j + 1 < q; ++j) {
        const double mean = 0.25 * (grid(i, j) + grid(i + 1, j) + grid(i, j + 1) + grid(i + 1, j + 1));
        CHECK(std::abs(m(0.5 * (ns[i] + ns[i + 1]), 0.5 * (ss[j] + ss[j + 1])) - mean) <= 1e-12);
      }
  }
}

TEST_CASE("property: surfaces linear in each variable are reproduced on a 50x50 sample") {
  Rng rng(RngKey{2});
  for (int trial = 0; trial < 10; ++trial) {
    const double a = rng.uniform(), b = rng.gaussian(), c = rng.gaussian(), d = rng.gaussian();
    const auto f = [&](double n, double s) { return a + b * n + c * s + d * n * s; };
    const Vector ns{2, 5, 10}, ss{0.6, 0.7, 0.8, 0.9, 0.95};
    Matrix grid(3, 5);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 5; ++j) grid(i, j) = f(ns[i], ss[j]);
    const AccuracyModel m(ns, ss, grid);
    for (int u = 0; u < 50; ++u)
      for (int v = 0; v < 50; ++v) {
        const double n = 2.0 + 8.0 * u / 49.0, s = 0.6 + 0.35 * v / 49.0;
        CHECK(std::abs(m(n, s) - f(n, s)) <= 1e-9);
      }
  }
}

TEST_CASE("property: within a cell the model is monotone along an axis when its corners are") {
  Rng rng(RngKey{3});
  for (int trial = 0; trial < 50; ++trial) {
    Matrix grid(2, 2);
    // Decreasing in s along both edges.
    grid(0, 0) = rng.uniform();
    grid(0, 1) = grid(0, 0) - rng.uniform();
    grid(1, 0) = rng.uniform();
    grid(1, 1) = grid(1, 0) - rng.uniform();
    const AccuracyModel m(Vector{2, 5}, Vector{0.5, 0.9}, grid);
    for (int u = 0; u <= 20; ++u) {
      const double n = 2.0 + 3.0 * u / 20.0;
      double prev = m(n, 0.5);
      for (int v = 1; v <= 20; ++v) {
        const double cur = m(n, 0.5 + 0.4 * v / 20.0);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
      }
    }
  }
}

TEST_CASE("eval_accuracy passes measured rows through") {
  auto rows = grid_records({2, 5, 10}, {0.6, 0.7, 0.8, 0.9, 0.95}, linear_surface);
  rows.push_back({"t", 1, 0.95, 0.9017, 10.6});
  rows.push_back({"t", 1, 0.0, 0.91, 1.0});
  const AccuracyModel m = fit_accuracy(rows);
  CHECK(eval_accuracy(m, rows, 1, 0.95) == 0.9017);
  CHECK(eval_accuracy(m, rows, 2, 0.6) == doctest::Approx(linear_surface(2, 0.6)).epsilon(1e-12));
  CHECK(kind_of([&] { eval_accuracy(m, rows, 1, 0.5); }) == ErrorKind::kDomain);
  CHECK(kind_of([&] { eval_accuracy(m, rows, 3, 0.0); }) == ErrorKind::kDomain);
  CHECK(kind_of([&] { eval_accuracy(m, rows, 12, 0.7); }) == ErrorKind::kDomain);
}

TEST_CASE("throughput lookup") {
  const std::vector<MeasurementRecord> rows{{"qqp", 1, 0.0, 0.91, 1.0}, {"qqp", 2, 0.9, 0.895, 12.4},
                                            {"mnli", 2, 0.9, 0.8, 99.0}};
  const ThroughputModel t = fit_throughput(rows, "qqp");
  CHECK(eval_throughput(t, 2, 0.9) == 12.4);
  CHECK(kind_of([&] { eval_throughput(t, 4, 0.5); }) == ErrorKind::kMissingMeasurement);
  CHECK(kind_of([&] { fit_throughput(rows, "sst2"); }) == ErrorKind::kMissingMeasurement);
  CHECK(eval_throughput_model(t, rows_for(rows, "qqp")) == 1.0);
}

TEST_CASE("throughput model quality") {
  const std::vector<MeasurementRecord> ref{{"r", 1, 0.0, 0.9, 1.0}, {"r", 2, 0.6, 0.9, 4.0}, {"r", 5, 0.9, 0.9, 20.0}};
  const ThroughputModel t = fit_throughput(ref, "r");
  const auto scaled_by = [&](double f) {
    std::vector<MeasurementRecord> out;
    for (auto r : ref) {
      r.task = "o";
      r.throughput *= f;
      out.push_back(r);
    }
    return out;
  };
  CHECK(eval_throughput_model(t, ref) == 1.0);
  // The error is relative to the measured value: 1.25x measured is exactly 20% off.
  CHECK(eval_throughput_model(t, scaled_by(1.25)) == 1.0);
  auto scaled = scaled_by(1.3);
  CHECK(eval_throughput_model(t, scaled) == 0.0);
  CHECK(eval_throughput_model(t, scaled_by(0.8)) == 0.0);
  scaled[0].throughput = 1.1;
  CHECK(eval_throughput_model(t, scaled) == doctest::Approx(1.0 / 3.0));
  const std::vector<MeasurementRecord> disjoint{{"o", 3, 0.3, 0.9, 2.0}};
  CHECK(kind_of([&] { eval_throughput_model(t, disjoint); }) == ErrorKind::kDegenerate);
}

TEST_CASE("zeta examples") {
  CHECK(zeta(0.82, 5.0, 0.80) == 5.0);
  CHECK(zeta(0.79, 12.0, 0.80) == 0.0);
  CHECK(zeta(0.80, 7.0, 0.80) == 7.0);
  const std::vector<MeasurementRecord> rows{{"t", 1, 0.0, 0.9, 1.0}};
  CHECK(accuracy_threshold(rows, 0.05) == 0.9 - 0.05);
  CHECK(kind_of([&] { accuracy_threshold(rows, -0.01); }) == ErrorKind::kDomain);
  const std::vector<MeasurementRecord> no_base{{"t", 2, 0.5, 0.9, 1.0}};
  CHECK(kind_of([&] { accuracy_threshold(no_base, 0.01); }) == ErrorKind::kMissingMeasurement);
}

TEST_CASE("predict_topk on the synthetic surface picks (2, 0.6) at budget 0.05") {
  std::vector<MeasurementRecord> rows;
  for (std::size_t n : {1, 2, 5, 10})
    for (double s : {0.0, 0.6, 0.9}) rows.push_back(surface_row(n, s));
  const AccuracyModel acc = fit_accuracy(rows);
  const ThroughputModel thr = fit_throughput(rows, "synthetic");
  const auto top = predict_topk(acc, thr, rows, PlannerQuery{0.05, candidates_of(rows), 3});
  REQUIRE(!top.empty());
  CHECK(top[0].candidate == Candidate{2, 0.6});
  CHECK(top[0].score == doctest::Approx(6.8).epsilon(1e-14));
  const auto oracle = brute_force(
      candidates_of(rows), 0.9 - 0.05, [](const Candidate& c) { return surface_accuracy(c.n, c.sparsity); },
      [](const Candidate& c) { return surface_multiplier(c.n, c.sparsity); }, 3);
  REQUIRE(top.size() == oracle.size());
  for (std::size_t i = 0; i < top.size(); ++i) CHECK(top[i].candidate == oracle[i]);

  SUBCASE("an inactive threshold returns the largest multiplier") {
    const auto all = predict_topk(acc, thr, rows, PlannerQuery{1.0, candidates_of(rows), 1});
    CHECK(all[0].candidate == Candidate{10, 0.9});
  }
  SUBCASE("no feasible candidate is an empty result") {
    const std::vector<Candidate> hard{{10, 0.9}};
    CHECK(predict_topk(acc, thr, rows, PlannerQuery{0.0, hard, 3}).empty());
  }
  SUBCASE("empty candidate set") {
    CHECK(kind_of([&] { predict_topk(acc, thr, rows, PlannerQuery{0.05, {}, 3}); }) == ErrorKind::kEmptyRequest);
  }
}

TEST_CASE("property: predict_topk agrees with brute force and keeps its invariants") {
  Rng rng(RngKey{4});
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MeasurementRecord> rows{{"t", 1, 0.0, 0.9, 1.0}};
    const std::vector<std::size_t> ns{2, 4, 8};
    const std::vector<double> ss{0.5, 0.7, 0.9};
    for (std::size_t n : ns)
      for (double s : ss)
        rows.push_back({"t", n, s, 0.8 + 0.1 * rng.uniform(), 1.0 + static_cast<double>(rng.index(20))});
    for (double s : ss) rows.push_back({"t", 1, s, 0.85 + 0.05 * rng.uniform(), 1.0 + static_cast<double>(rng.index(5))});
    const AccuracyModel acc = fit_accuracy(rows);
    const ThroughputModel thr = fit_throughput(rows, "t");
    const double budget = 0.1 * rng.uniform();
    const std::size_t k = 1 + rng.index(5);
    const auto cands = candidates_of(rows);
    const auto top = predict_topk(acc, thr, rows, PlannerQuery{budget, cands, k});
    const double xi = accuracy_threshold(rows, budget);
    const auto measured = [&](const Candidate& c) {
      for (const auto& r : rows)
        if (r.n == c.n && r.sparsity == c.sparsity) return r;
      return MeasurementRecord{};
    };
    const auto oracle = brute_force(
        cands, xi, [&](const Candidate& c) { return measured(c).accuracy; },
        [&](const Candidate& c) { return measured(c).throughput; }, k);
    REQUIRE(top.size() == oracle.size());
    for (std::size_t i = 0; i < top.size(); ++i) {
      CHECK(top[i].candidate == oracle[i]);
      CHECK(top[i].accuracy >= xi - kThresholdSlack);
      if (i > 0) CHECK(ranks_before(top[i - 1], top[i]));
    }
    // Scaling every multiplier by the same positive constant keeps the ranking.
    std::vector<MeasurementRecord> scaled = rows;
    for (auto& r : scaled) r.throughput *= 3.7;
    const auto top2 = predict_topk(acc, fit_throughput(scaled, "t"), scaled, PlannerQuery{budget, cands, k});
    REQUIRE(top2.size() == top.size());
    for (std::size_t i = 0; i < top.size(); ++i) CHECK(top2[i].candidate == top[i].candidate);
  }
}

TEST_CASE("ties break toward smaller N, then smaller s") {
  const Prediction a{{2, 0.9}, 0.9, 5.0, 5.0}, b{{5, 0.6}, 0.9, 5.0, 5.0}, c{{2, 0.95}, 0.9, 5.0, 5.0};
  CHECK(ranks_before(a, b));
  CHECK_FALSE(ranks_before(b, a));
  CHECK(ranks_before(a, c));
  CHECK_FALSE(ranks_before(a, a));
}

TEST_CASE("loocv examples") {
  const std::vector<std::size_t> ns{2, 4, 6, 8};
  const std::vector<double> ss{0.6, 0.7, 0.8, 0.9};
  auto rows = grid_records(ns, ss, linear_surface);
  const AccuracyModel clean = fit_accuracy(rows);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(loocv_predict(clean, i, j) - clean.grid()(i, j)) <= 1e-12);
  CHECK(loocv_accuracy(clean) == 1.0);
  rows[0].accuracy += 0.05;
  const AccuracyModel bumped = fit_accuracy(rows);
  CHECK(std::abs(loocv_predict(bumped, 0, 0) - bumped.grid()(0, 0)) == doctest::Approx(0.05).epsilon(1e-9));
  CHECK(loocv_accuracy(bumped) == 15.0 / 16.0);
  CHECK(kind_of([&] { loocv_predict(clean, 4, 0); }) == ErrorKind::kIndex);

  SUBCASE("an interior knot uses its diagonal neighbours") {
    Matrix g(3, 3, 0.0);
    g(0, 0) = 1.0;
    g(2, 0) = 2.0;
    g(0, 2) = 3.0;
    g(2, 2) = 4.0;
    g(1, 1) = 100.0;
    const AccuracyModel m(Vector{1, 2, 3}, Vector{0.1, 0.2, 0.3}, g);
    CHECK(loocv_predict(m, 1, 1) == doctest::Approx(2.5).epsilon(1e-14));
  }
  SUBCASE("an edge knot averages the two axis lines") {
    // 2 x 3 grid: along N only one other knot remains, along s two do.
    Matrix g(2, 3, 0.0);
    g(0, 1) = 1.0;
    g(0, 2) = 2.0;
    const AccuracyModel m(Vector{2, 4}, Vector{0.1, 0.2, 0.3}, g);
    CHECK(loocv_predict(m, 0, 0) == doctest::Approx(0.0).epsilon(1e-14));
  }
  SUBCASE("a 2x2 grid cannot hold a knot out") {
    const AccuracyModel m(Vector{2, 4}, Vector{0.1, 0.2}, Matrix(2, 2, 0.5));
    CHECK(kind_of([&] { loocv_predict(m, 0, 0); }) == ErrorKind::kDegenerate);
  }
}

TEST_CASE("budget sweep against its own truth hits every budget") {
  const auto truth = fine_records();
  const AccuracyModel acc = fit_accuracy(truth);
  const ThroughputModel thr = fit_throughput(truth, "synthetic");
  const auto budgets = default_budgets();
  REQUIRE(budgets.size() == 21);
  CHECK(budgets[1] == 0.005);
  CHECK(budgets.back() == 0.1);
  const auto cands = candidates_of(truth);
  const BudgetSweep sweep = budget_sweep(acc, thr, truth, cands, budgets);
  CHECK(sweep.hit_rate == 1.0);
  for (const auto& o : sweep.outcomes) {
    REQUIRE(o.oracle.has_value());
    CHECK(o.top.front().candidate == *o.oracle);
  }
  CHECK(kind_of([&] { budget_sweep(acc, thr, truth, cands, std::vector<double>{}); }) == ErrorKind::kEmptyRequest);
}

TEST_CASE("coarse fit against the fine grid") {
  const auto coarse = coarse_records();
  const auto fine = fine_records();
  const AccuracyModel acc = fit_accuracy(coarse);
  const ThroughputModel thr = fit_throughput(fine, "synthetic");
  const auto cands = candidates_of(fine);
  const BudgetSweep sweep = budget_sweep(acc, thr, fine, cands, default_budgets());
  CHECK(sweep.hit_rate >= 0.9);
  // Feasibility of every candidate matches the truth at every budget.
  for (double b : default_budgets()) {
    const auto all = predict_topk(acc, thr, fine, PlannerQuery{b, cands, cands.size()});
    const double xi = accuracy_threshold(fine, b);
    std::size_t feasible = 0;
    for (const auto& c : cands) feasible += surface_accuracy(c.n, c.sparsity) >= xi - kThresholdSlack ? 1 : 0;
    CHECK(all.size() == feasible);
    for (const auto& p : all) CHECK(surface_accuracy(p.candidate.n, p.candidate.sparsity) >= xi - kThresholdSlack);
  }
}

TEST_CASE("fit_planner fits every task on a shared throughput table") {
  auto rows = coarse_records();
  for (auto r : coarse_records()) {
    r.task = "other";
    r.accuracy -= 0.01;
    rows.push_back(r);
  }
  const PlannerModel pm = fit_planner(rows, "synthetic");
  CHECK(pm.tasks.size() == 2);
  CHECK(pm.throughput.reference_task == "synthetic");
  CHECK(pm.tasks.at("other")(2.0, 0.6) == doctest::Approx(surface_accuracy(2, 0.6) - 0.01).epsilon(1e-12));
}
