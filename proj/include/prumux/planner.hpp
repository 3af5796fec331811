// SPDX-License-Identifier: Apache-2.0
//
// Auto-PruMUX: choose (N, s) under an accuracy-loss budget from a sparse set
// of measurements.
//
//   f_A   piecewise bilinear over a p × q knot grid (N > 1, s > 0);
//         A_ij(N, s) = k00 + k01·s + k10·N + k11·N·s in cell (i, j)
//   f_T   exact lookup in one reference task's measured multipliers
//   ζ     Throu(N, s) · g(Acc(N, s)),  g(x) = [x ≥ ξ],  ξ = Acc(1, 0) − budget
//
// Rows with N = 1 or s = 0 are never modelled; their measured values are used.
#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prumux/core_math.hpp"

namespace prumux {

struct MeasurementRecord {
  std::string task;
  std::size_t n = 1;
  double sparsity = 0.0;
  double accuracy = 0.0;
  double throughput = 1.0;  // multiplier over the dense N = 1 model

  bool operator==(const MeasurementRecord&) const = default;
};

/// Throws kDomain for out-of-range fields and kDuplicate for repeated (task, N, s).
void validate(std::span<const MeasurementRecord> records);

/// Rows of one task, in input order.
std::vector<MeasurementRecord> rows_for(std::span<const MeasurementRecord> records, const std::string& task);

/// Distinct task names in first-appearance order.
std::vector<std::string> task_names(std::span<const MeasurementRecord> records);

struct Candidate {
  std::size_t n = 1;
  double sparsity = 0.0;

  bool operator==(const Candidate&) const = default;
  auto operator<=>(const Candidate&) const = default;
};

class AccuracyModel {
 public:
  AccuracyModel() = default;
  /// grid(i, j) = Acc(widths[i], sparsities[j]).
  AccuracyModel(Vector widths, Vector sparsities, Matrix grid);

  const Vector& widths() const { return widths_; }
  const Vector& sparsities() const { return sparsities_; }
  const Matrix& grid() const { return grid_; }
  /// {k00, k01, k10, k11} of cell (i, j), i < p − 1, j < q − 1.
  const std::array<double, 4>& coefficients(std::size_t i, std::size_t j) const;

  bool contains(double n, double s) const;
  /// Throws kDomain outside the knot hull.
  double operator()(double n, double s) const;

 private:
  Vector widths_;
  Vector sparsities_;
  Matrix grid_;
  std::vector<std::array<double, 4>> coeffs_;
};

/// Bilinear coefficients through the four corners (n0, s0)…(n1, s1);
/// f00 = value at (n0, s0), f10 at (n1, s0), f01 at (n0, s1), f11 at (n1, s1).
std::array<double, 4> bilinear_coefficients(double n0, double n1, double s0, double s1, double f00, double f10,
                                            double f01, double f11);

/// Fits on the rows with N > 1 and s > 0, which must form a complete grid.
/// Errors: kDuplicate, kIncompleteGrid, kDegenerate (p < 2 or q < 2).
AccuracyModel fit_accuracy(std::span<const MeasurementRecord> records);

/// N = 1 or s = 0: the measured value; otherwise the model inside its hull.
double eval_accuracy(const AccuracyModel& model, std::span<const MeasurementRecord> records, std::size_t n,
                     double sparsity);

struct ThroughputModel {
  std::string reference_task;
  std::map<Candidate, double> table;
};

ThroughputModel fit_throughput(std::span<const MeasurementRecord> records, const std::string& reference_task);

/// Throws kMissingMeasurement for pairs the reference task never measured.
double eval_throughput(const ThroughputModel& model, std::size_t n, double sparsity);

/// Throu · g(Acc) with the inclusive threshold acc ≥ xi.
double zeta(double predicted_accuracy, double predicted_throughput, double xi);

/// Feasibility uses xi − kThresholdSlack so that thresholds formed by decimal
/// subtraction (e.g. 0.9 − 0.05) do not reject a value that equals them exactly.
inline constexpr double kThresholdSlack = 1e-12;

/// ξ = measured Acc(1, 0) − budget. Throws kMissingMeasurement without a baseline row.
double accuracy_threshold(std::span<const MeasurementRecord> records, double budget);

struct PlannerQuery {
  double budget = 0.0;
  std::vector<Candidate> candidates;
  std::size_t k = 3;
};

struct Prediction {
  Candidate candidate;
  double accuracy = 0.0;
  double throughput = 0.0;
  double score = 0.0;
};

/// Score descending, then smaller N, then smaller s.
bool ranks_before(const Prediction& a, const Prediction& b);

/// Infeasible candidates are dropped; at most query.k results. records are the
/// queried task's rows (baseline and N = 1 / s = 0 passthrough values).
std::vector<Prediction> predict_topk(const AccuracyModel& acc, const ThroughputModel& thr,
                                     std::span<const MeasurementRecord> records, const PlannerQuery& query);

/// Every (N, s) present in records.
std::vector<Candidate> candidates_of(std::span<const MeasurementRecord> records);

inline constexpr double kAccuracyBand = 0.015;
inline constexpr double kThroughputBand = 0.20;

/// Leave-one-out prediction of knot (i, j) from the other knots of grid.
///   interior knot: bilinear over (i±1, j±1);
///   edge knot:     along each axis with at least 2 other knots, the line through
///                  the two nearest of them (ties to the lower index), evaluated at
///                  the held-out coordinate; the axis estimates are averaged.
/// Throws kDegenerate when no axis has 2 remaining knots.
double loocv_predict(const AccuracyModel& model, std::size_t i, std::size_t j);

/// Fraction of knots whose leave-one-out prediction lies within band.
double loocv_accuracy(const AccuracyModel& model, double band = kAccuracyBand);

/// Fraction of the task's measured pairs (present in the table) whose
/// multiplier the reference lookup predicts within the relative band.
double eval_throughput_model(const ThroughputModel& model, std::span<const MeasurementRecord> records,
                             double band = kThroughputBand);

/// 0, 0.005, …, 0.1 (each value is i / 200 so the grid has no accumulated error).
std::vector<double> default_budgets();

struct BudgetOutcome {
  double budget = 0.0;
  std::vector<Prediction> top;
  std::optional<Candidate> oracle;  // best feasible candidate by measured values
  bool hit = false;
};

struct BudgetSweep {
  std::vector<BudgetOutcome> outcomes;
  double hit_rate = 0.0;
};

/// The oracle ranks candidates by their measured accuracy and throughput in
/// truth. A budget with no feasible oracle candidate counts as a hit iff the
/// prediction is empty too.
BudgetSweep budget_sweep(const AccuracyModel& acc, const ThroughputModel& thr,
                         std::span<const MeasurementRecord> truth, std::span<const Candidate> candidates,
                         std::span<const double> budgets, std::size_t k = 3);

/// Oracle best for one budget over candidates measured in truth.
std::optional<Candidate> oracle_best(std::span<const MeasurementRecord> truth, std::span<const Candidate> candidates,
                                     double budget);

/// Fitted models for several tasks sharing one throughput table.
struct PlannerModel {
  ThroughputModel throughput;
  std::map<std::string, AccuracyModel> tasks;
};

PlannerModel fit_planner(std::span<const MeasurementRecord> records, const std::string& reference_task);

}  // namespace prumux
