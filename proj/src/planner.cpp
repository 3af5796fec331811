// SPDX-License-Identifier: Apache-2.0
#include "prumux/planner.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "prumux/error.hpp"
#include "prumux/io.hpp"

namespace prumux {

namespace {

std::string pair_name(std::size_t n, double s) { return "(" + std::to_string(n) + ", " + format_number(s) + ")"; }

const MeasurementRecord* find_row(std::span<const MeasurementRecord> records, std::size_t n, double s) {
  for (const auto& r : records)
    if (r.n == n && r.sparsity == s) return &r;
  return nullptr;
}

// Index of the cell [v[i], v[i+1]] containing x (x already inside the hull).
std::size_t cell_of(const Vector& v, double x) {
  const auto it = std::upper_bound(v.begin(), v.end(), x);
  const std::size_t i = static_cast<std::size_t>(it - v.begin());
  return std::min(i == 0 ? 0 : i - 1, v.size() - 2);
}

double line_at(double x0, double y0, double x1, double y1, double x) { return y0 + (y1 - y0) * (x - x0) / (x1 - x0); }

// Prediction along one axis from the two nearest other knots, or nullopt.
std::optional<double> axis_estimate(const Vector& coords, std::size_t held, const std::vector<double>& values) {
  std::vector<std::size_t> others;
  for (std::size_t k = 0; k < coords.size(); ++k)
    if (k != held) others.push_back(k);
  if (others.size() < 2) return std::nullopt;
  std::stable_sort(others.begin(), others.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(coords[a] - coords[held]) < std::abs(coords[b] - coords[held]);
  });
  std::size_t a = others[0];
  std::size_t b = others[1];
  if (a > b) std::swap(a, b);
  return line_at(coords[a], values[a], coords[b], values[b], coords[held]);
}

}  // namespace

void validate(std::span<const MeasurementRecord> records) {
  std::set<std::tuple<std::string, std::size_t, double>> seen;
  for (const auto& r : records) {
    const std::string where = r.task + " " + pair_name(r.n, r.sparsity);
    require(!r.task.empty(), ErrorKind::kDomain, "empty task name");
    require(r.n >= 1, ErrorKind::kDomain, where + ": N must be >= 1");
    require(r.sparsity >= 0.0 && r.sparsity <= 1.0, ErrorKind::kDomain, where + ": sparsity outside [0, 1]");
    require(r.accuracy >= 0.0 && r.accuracy <= 1.0, ErrorKind::kDomain, where + ": accuracy outside [0, 1]");
    require(std::isfinite(r.throughput) && r.throughput > 0.0, ErrorKind::kDomain,
            where + ": throughput must be positive");
    require(seen.emplace(r.task, r.n, r.sparsity).second, ErrorKind::kDuplicate, where + ": duplicate measurement");
  }
}

std::vector<MeasurementRecord> rows_for(std::span<const MeasurementRecord> records, const std::string& task) {
  std::vector<MeasurementRecord> out;
  for (const auto& r : records)
    if (r.task == task) out.push_back(r);
  return out;
}

std::vector<std::string> task_names(std::span<const MeasurementRecord> records) {
  std::vector<std::string> out;
  for (const auto& r : records)
    if (std::find(out.begin(), out.end(), r.task) == out.end()) out.push_back(r.task);
  return out;
}

std::array<double, 4> bilinear_coefficients(double n0, double n1, double s0, double s1, double f00, double f10,
                                            double f01, double f11) {
  const double d = (n1 - n0) * (s1 - s0);
  return {(f00 * n1 * s1 - f10 * n0 * s1 - f01 * n1 * s0 + f11 * n0 * s0) / d,
          (-f00 * n1 + f10 * n0 + f01 * n1 - f11 * n0) / d,
          (-f00 * s1 + f10 * s1 + f01 * s0 - f11 * s0) / d,
          (f00 - f10 - f01 + f11) / d};
}

AccuracyModel::AccuracyModel(Vector widths, Vector sparsities, Matrix grid)
    : widths_(std::move(widths)), sparsities_(std::move(sparsities)), grid_(std::move(grid)) {
  require(widths_.size() >= 2 && sparsities_.size() >= 2, ErrorKind::kDegenerate,
          "accuracy grid needs at least 2 widths and 2 sparsities");
  require(grid_.rows() == widths_.size() && grid_.cols() == sparsities_.size(), ErrorKind::kShape,
          "grid shape does not match the knots");
  for (std::size_t i = 1; i < widths_.size(); ++i)
    require(widths_[i - 1] < widths_[i], ErrorKind::kDomain, "width knots must increase strictly");
  for (std::size_t j = 1; j < sparsities_.size(); ++j)
    require(sparsities_[j - 1] < sparsities_[j], ErrorKind::kDomain, "sparsity knots must increase strictly");
  const std::size_t p = widths_.size();
  const std::size_t q = sparsities_.size();
  coeffs_.reserve((p - 1) * (q - 1));
  for (std::size_t i = 0; i + 1 < p; ++i)
    for (std::size_t j = 0; j + 1 < q; ++j)
      coeffs_.push_back(bilinear_coefficients(widths_[i], widths_[i + 1], sparsities_[j], sparsities_[j + 1],
                                              grid_(i, j), grid_(i + 1, j), grid_(i, j + 1), grid_(i + 1, j + 1)));
}

const std::array<double, 4>& AccuracyModel::coefficients(std::size_t i, std::size_t j) const {
  require(i + 1 < widths_.size() && j + 1 < sparsities_.size(), ErrorKind::kIndex, "cell index out of range");
  return coeffs_[i * (sparsities_.size() - 1) + j];
}

bool AccuracyModel::contains(double n, double s) const {
  return !widths_.empty() && n >= widths_.front() && n <= widths_.back() && s >= sparsities_.front() &&
         s <= sparsities_.back();
}

double AccuracyModel::operator()(double n, double s) const {
  require(contains(n, s), ErrorKind::kDomain,
          "(" + format_number(n) + ", " + format_number(s) + ") lies outside the fitted knot hull");
  const auto& k = coefficients(cell_of(widths_, n), cell_of(sparsities_, s));
  return k[0] + k[1] * s + k[2] * n + k[3] * n * s;
}

AccuracyModel fit_accuracy(std::span<const MeasurementRecord> records) {
  std::map<std::pair<double, double>, double> cells;
  std::set<double> ns;
  std::set<double> ss;
  for (const auto& r : records) {
    if (r.n <= 1 || r.sparsity <= 0.0) continue;
    const double n = static_cast<double>(r.n);
    require(cells.emplace(std::pair{n, r.sparsity}, r.accuracy).second, ErrorKind::kDuplicate,
            "duplicate grid point " + pair_name(r.n, r.sparsity));
    ns.insert(n);
    ss.insert(r.sparsity);
  }
  require(ns.size() >= 2 && ss.size() >= 2, ErrorKind::kDegenerate,
          "accuracy grid needs at least 2 widths (N > 1) and 2 sparsities (s > 0)");
  Vector widths(ns.begin(), ns.end());
  Vector sparsities(ss.begin(), ss.end());
  Matrix grid(widths.size(), sparsities.size());
  for (std::size_t i = 0; i < widths.size(); ++i) {
    for (std::size_t j = 0; j < sparsities.size(); ++j) {
      const auto it = cells.find({widths[i], sparsities[j]});
      require(it != cells.end(), ErrorKind::kIncompleteGrid,
              "grid point " + pair_name(static_cast<std::size_t>(widths[i]), sparsities[j]) + " is not measured");
      grid(i, j) = it->second;
    }
  }
  return AccuracyModel(std::move(widths), std::move(sparsities), std::move(grid));
}

double eval_accuracy(const AccuracyModel& model, std::span<const MeasurementRecord> records, std::size_t n,
                     double sparsity) {
  if (n == 1 || sparsity == 0.0) {
    const MeasurementRecord* row = find_row(records, n, sparsity);
    require(row != nullptr, ErrorKind::kDomain, pair_name(n, sparsity) + " needs a measured row");
    return row->accuracy;
  }
  return model(static_cast<double>(n), sparsity);
}

ThroughputModel fit_throughput(std::span<const MeasurementRecord> records, const std::string& reference_task) {
  ThroughputModel model;
  model.reference_task = reference_task;
  for (const auto& r : records) {
    if (r.task != reference_task) continue;
    require(model.table.emplace(Candidate{r.n, r.sparsity}, r.throughput).second, ErrorKind::kDuplicate,
            "duplicate throughput row " + pair_name(r.n, r.sparsity));
  }
  require(!model.table.empty(), ErrorKind::kMissingMeasurement, "no rows for reference task '" + reference_task + "'");
  return model;
}

double eval_throughput(const ThroughputModel& model, std::size_t n, double sparsity) {
  const auto it = model.table.find(Candidate{n, sparsity});
  require(it != model.table.end(), ErrorKind::kMissingMeasurement,
          "reference task '" + model.reference_task + "' has no throughput for " + pair_name(n, sparsity));
  return it->second;
}

double zeta(double predicted_accuracy, double predicted_throughput, double xi) {
  return predicted_accuracy >= xi ? predicted_throughput : 0.0;
}

double accuracy_threshold(std::span<const MeasurementRecord> records, double budget) {
  require(budget >= 0.0 && std::isfinite(budget), ErrorKind::kDomain, "budget must be >= 0");
  const MeasurementRecord* base = find_row(records, 1, 0.0);
  require(base != nullptr, ErrorKind::kMissingMeasurement, "baseline row (1, 0) is missing");
  return base->accuracy - budget;
}

bool ranks_before(const Prediction& a, const Prediction& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.candidate.n != b.candidate.n) return a.candidate.n < b.candidate.n;
  return a.candidate.sparsity < b.candidate.sparsity;
}

std::vector<Prediction> predict_topk(const AccuracyModel& acc, const ThroughputModel& thr,
                                     std::span<const MeasurementRecord> records, const PlannerQuery& query) {
  require(!query.candidates.empty(), ErrorKind::kEmptyRequest, "no candidates to rank");
  const double xi = accuracy_threshold(records, query.budget) - kThresholdSlack;
  std::vector<Prediction> out;
  for (const Candidate& c : query.candidates) {
    Prediction p;
    p.candidate = c;
    p.accuracy = eval_accuracy(acc, records, c.n, c.sparsity);
    p.throughput = eval_throughput(thr, c.n, c.sparsity);
    p.score = zeta(p.accuracy, p.throughput, xi);
    if (p.score > 0.0) out.push_back(p);
  }
  std::sort(out.begin(), out.end(), ranks_before);
  if (out.size() > query.k) out.resize(query.k);
  return out;
}

std::vector<Candidate> candidates_of(std::span<const MeasurementRecord> records) {
  std::vector<Candidate> out;
  for (const auto& r : records) {
    const Candidate c{r.n, r.sparsity};
    if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
  }
  return out;
}

double loocv_predict(const AccuracyModel& model, std::size_t i, std::size_t j) {
  const Vector& ns = model.widths();
  const Vector& ss = model.sparsities();
  const Matrix& g = model.grid();
  require(i < ns.size() && j < ss.size(), ErrorKind::kIndex, "knot index out of range");
  const bool interior = i > 0 && i + 1 < ns.size() && j > 0 && j + 1 < ss.size();
  if (interior) {
    const auto k = bilinear_coefficients(ns[i - 1], ns[i + 1], ss[j - 1], ss[j + 1], g(i - 1, j - 1), g(i + 1, j - 1),
                                         g(i - 1, j + 1), g(i + 1, j + 1));
    return k[0] + k[1] * ss[j] + k[2] * ns[i] + k[3] * ns[i] * ss[j];
  }
  std::vector<double> column(ns.size());
  for (std::size_t a = 0; a < ns.size(); ++a) column[a] = g(a, j);
  std::vector<double> row(g.row(i).begin(), g.row(i).end());
  const auto along_n = axis_estimate(ns, i, column);
  const auto along_s = axis_estimate(ss, j, row);
  require(along_n || along_s, ErrorKind::kDegenerate, "grid too small to leave a knot out");
  if (along_n && along_s) return 0.5 * (*along_n + *along_s);
  return along_n ? *along_n : *along_s;
}

double loocv_accuracy(const AccuracyModel& model, double band) {
  std::size_t ok = 0;
  const std::size_t p = model.widths().size();
  const std::size_t q = model.sparsities().size();
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      if (std::abs(loocv_predict(model, i, j) - model.grid()(i, j)) <= band) ++ok;
  return static_cast<double>(ok) / static_cast<double>(p * q);
}

double eval_throughput_model(const ThroughputModel& model, std::span<const MeasurementRecord> records, double band) {
  std::size_t total = 0;
  std::size_t ok = 0;
  for (const auto& r : records) {
    const auto it = model.table.find(Candidate{r.n, r.sparsity});
    if (it == model.table.end()) continue;
    ++total;
    if (std::abs(it->second / r.throughput - 1.0) <= band) ++ok;
  }
  require(total > 0, ErrorKind::kDegenerate, "no (N, s) pair overlaps the reference table");
  return static_cast<double>(ok) / static_cast<double>(total);
}

std::vector<double> default_budgets() {
  std::vector<double> out;
  for (int i = 0; i <= 20; ++i) out.push_back(static_cast<double>(i) / 200.0);
  return out;
}

std::optional<Candidate> oracle_best(std::span<const MeasurementRecord> truth, std::span<const Candidate> candidates,
                                     double budget) {
  const double xi = accuracy_threshold(truth, budget) - kThresholdSlack;
  std::optional<Prediction> best;
  for (const Candidate& c : candidates) {
    const MeasurementRecord* row = find_row(truth, c.n, c.sparsity);
    require(row != nullptr, ErrorKind::kMissingMeasurement, "oracle has no measurement for " + pair_name(c.n, c.sparsity));
    Prediction p{c, row->accuracy, row->throughput, zeta(row->accuracy, row->throughput, xi)};
    if (p.score > 0.0 && (!best || ranks_before(p, *best))) best = p;
  }
  if (!best) return std::nullopt;
  return best->candidate;
}

BudgetSweep budget_sweep(const AccuracyModel& acc, const ThroughputModel& thr,
                         std::span<const MeasurementRecord> truth, std::span<const Candidate> candidates,
                         std::span<const double> budgets, std::size_t k) {
  require(!budgets.empty(), ErrorKind::kEmptyRequest, "no budgets to sweep");
  BudgetSweep sweep;
  std::size_t hits = 0;
  for (double b : budgets) {
    BudgetOutcome o;
    o.budget = b;
    o.top = predict_topk(acc, thr, truth, PlannerQuery{b, {candidates.begin(), candidates.end()}, k});
    o.oracle = oracle_best(truth, candidates, b);
    if (o.oracle) {
      o.hit = std::any_of(o.top.begin(), o.top.end(), [&](const Prediction& p) { return p.candidate == *o.oracle; });
    } else {
      o.hit = o.top.empty();
    }
    hits += o.hit ? 1 : 0;
    sweep.outcomes.push_back(std::move(o));
  }
  sweep.hit_rate = static_cast<double>(hits) / static_cast<double>(budgets.size());
  return sweep;
}

PlannerModel fit_planner(std::span<const MeasurementRecord> records, const std::string& reference_task) {
  validate(records);
  PlannerModel model;
  model.throughput = fit_throughput(records, reference_task);
  for (const auto& task : task_names(records)) model.tasks.emplace(task, fit_accuracy(rows_for(records, task)));
  return model;
}

}  // namespace prumux
