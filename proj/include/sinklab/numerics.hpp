#pragma once

// Dense 64-bit linear algebra and statistics kernel.
//
// Every reduction accumulates in ascending index order starting from 0.0, so
// results are bit-reproducible across runs and thread counts. Masked logits
// use a true -infinity sentinel.

#include <cstddef>
#include <initializer_list>
#include <limits>
#include <span>
#include <vector>

namespace sinklab {

using Vector = std::vector<double>;

inline constexpr double kMasked = -std::numeric_limits<double>::infinity();

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  // Row-major construction from nested lists; all rows must share a length.
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix from_rows(const std::vector<Vector>& rows, std::size_t cols);
  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  void append_row(std::span<const double> values);
  void reserve_rows(std::size_t rows) { data_.reserve(rows * cols_); }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T without materialising the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);
// Row vector times matrix: x (1 x rows) * m.
Vector vecmat(std::span<const double> x, const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);

// Columns [begin, begin + count) of m.
Matrix column_block(const Matrix& m, std::size_t begin, std::size_t count);
// Copies block into columns [begin, begin + block.cols()) of dst.
void set_column_block(Matrix& dst, std::size_t begin, const Matrix& block);
Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
double rms(std::span<const double> v);
double cosine(std::span<const double> a, std::span<const double> b);
Vector softmax_row(std::span<const double> logits);
double median_abs(std::span<const double> values);
double pearson(std::span<const double> x, std::span<const double> y);
Vector project_onto(std::span<const double> v, std::span<const double> dir);

bool all_finite(std::span<const double> values);
inline bool all_finite(const Matrix& m) { return all_finite(m.data()); }

}  // namespace sinklab
