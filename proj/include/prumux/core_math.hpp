// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major matrices and a platform-stable random stream. Everything is
// double precision; sizes in this project are small enough that no blocking or
// vectorization tricks are needed.
#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <vector>

namespace prumux {

using Vector = std::vector<double>;
/// Structural bit vector, one byte per unit (0 = pruned, 1 = live).
using Mask = std::vector<std::uint8_t>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Takes ownership of row-major data; throws if the length is wrong or a value is not finite.
  Matrix(std::size_t rows, std::size_t cols, Vector data);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool all_finite() const noexcept;
  void fill(double v);

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

/// a · b
Matrix matmul(const Matrix& a, const Matrix& b);
/// a · bᵀ
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

/// a += scale * b, shapes must match.
void axpy(Matrix& a, const Matrix& b, double scale = 1.0);
void axpy(std::span<double> a, std::span<const double> b, double scale = 1.0);

double max_abs_diff(const Matrix& a, const Matrix& b);

/// Max-shifted softmax.
Vector softmax(std::span<const double> v);
void softmax_rows_inplace(Matrix& m);

/// Exact (erf-based) GELU and its derivative.
double gelu(double x);
double gelu_grad(double x);

/// Row-selection matrix: rows of the n×n identity whose mask bit is set.
Matrix selection_matrix(std::span<const std::uint8_t> mask);

struct RngKey {
  std::uint64_t seed = 0;
};

/// Reproducible pseudo-random stream. The engine (mt19937_64) has a
/// standard-mandated output sequence; uniform and Gaussian draws are derived
/// from it by hand rather than through <random> distributions, whose
/// algorithms are implementation-defined.
class Rng {
 public:
  explicit Rng(RngKey key) : engine_(key.seed) {}

  std::uint64_t next_u64() { return engine_(); }
  /// Uniform on [0, 1) with 53 random bits.
  double uniform();
  /// Standard normal via the Marsaglia polar method.
  double gaussian();
  /// Uniform integer in [0, n) by rejection sampling.
  std::size_t index(std::size_t n);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// n standard-normal draws fully determined by key.
Vector seeded_gaussian(RngKey key, std::size_t n);

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale);

}  // namespace prumux
