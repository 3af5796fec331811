// SPDX-License-Identifier: Apache-2.0
#include "prumux/core_math.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "prumux/error.hpp"

namespace prumux {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kEmptyRequest: return "empty request";
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kShape: return "shape error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kDegenerate: return "degenerate";
    case ErrorKind::kDomain: return "out of domain";
    case ErrorKind::kDuplicate: return "duplicate";
    case ErrorKind::kIncompleteGrid: return "incomplete grid";
    case ErrorKind::kMissingMeasurement: return "missing measurement";
    case ErrorKind::kInvalidBaseline: return "invalid baseline";
    case ErrorKind::kInsufficientWork: return "insufficient work";
    case ErrorKind::kDivergence: return "divergence";
    case ErrorKind::kParse: return "parse error";
    case ErrorKind::kFormatVersion: return "format version";
    case ErrorKind::kIo: return "io error";
  }
  return "error";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, Vector data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require(data_.size() == rows * cols, ErrorKind::kShape,
          "matrix data length " + std::to_string(data_.size()) + " != " + std::to_string(rows) +
              "x" + std::to_string(cols));
  require(all_finite(), ErrorKind::kDomain, "matrix data contains non-finite values");
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Vector data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    require(row.size() == c, ErrorKind::kShape, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::kDimension,
          "matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) + " by " +
              std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), ErrorKind::kDimension, "matmul_nt inner dimension mismatch");
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      double acc = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), ErrorKind::kDimension, "matmul_tn inner dimension mismatch");
  Matrix out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

void axpy(Matrix& a, const Matrix& b, double scale) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kShape, "axpy shape mismatch");
  axpy(a.values(), b.values(), scale);
}

void axpy(std::span<double> a, std::span<const double> b, double scale) {
  require(a.size() == b.size(), ErrorKind::kShape, "axpy length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorKind::kShape, "max_abs_diff shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

Vector softmax(std::span<const double> v) {
  Vector out(v.begin(), v.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double total = 0.0;
  for (double& x : out) {
    x = std::exp(x - mx);
    total += x;
  }
  for (double& x : out) x /= total;
  return out;
}

void softmax_rows_inplace(Matrix& m) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Vector p = softmax(row);
    std::copy(p.begin(), p.end(), row.begin());
  }
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
  return cdf + x * pdf;
}

Matrix selection_matrix(std::span<const std::uint8_t> mask) {
  const auto live = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
  Matrix s(live, mask.size());
  std::size_t r = 0;
  for (std::size_t c = 0; c < mask.size(); ++c)
    if (mask[c]) s(r++, c) = 1.0;
  return s;
}

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u = 0.0, v = 0.0, s = 0.0;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double factor = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * factor;
  has_spare_ = true;
  return u * factor;
}

std::size_t Rng::index(std::size_t n) {
  require(n > 0, ErrorKind::kEmptyRequest, "index range is empty");
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t x = 0;
  do {
    x = engine_();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

Vector seeded_gaussian(RngKey key, std::size_t n) {
  require(n >= 1, ErrorKind::kEmptyRequest, "seeded_gaussian needs n >= 1");
  Rng rng(key);
  Vector out(n);
  for (double& x : out) x = rng.gaussian();
  return out;
}

Matrix gaussian_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
  Matrix m(rows, cols);
  for (double& x : m.values()) x = scale * rng.gaussian();
  return m;
}

}  // namespace prumux
