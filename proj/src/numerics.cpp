#include "sinklab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "sinklab/error.hpp"

namespace sinklab {

namespace {

std::string shape(std::size_t r, std::size_t c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

}  // namespace

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t cols = rows.size() == 0 ? 0 : rows.begin()->size();
  Matrix m(rows.size(), cols);
  std::size_t r = 0;
  for (const auto& row : rows) {
    if (row.size() != cols) throw InvalidArgument("Matrix::from_rows: ragged rows");
    std::copy(row.begin(), row.end(), m.row(r).begin());
    ++r;
  }
  return m;
}

Matrix Matrix::from_rows(const std::vector<Vector>& rows, std::size_t cols) {
  Matrix m(rows.size(), cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw InvalidArgument("Matrix::from_rows: ragged rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

void Matrix::append_row(std::span<const double> values) {
  if (values.size() != cols_) throw InvalidArgument("Matrix::append_row: width mismatch");
  data_.insert(data_.end(), values.begin(), values.end());
  ++rows_;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw InvalidArgument("matmul: " + shape(a.rows(), a.cols()) + " * " +
                          shape(b.rows(), b.cols()));
  }
  Matrix out(a.rows(), b.cols());
  // i-k-j order: each out(i, j) still accumulates k = 0, 1, ... in sequence.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto dst = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      const auto src = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
    }
  }
  return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw InvalidArgument("matmul_transposed: " + shape(a.rows(), a.cols()) + " * (" +
                          shape(b.rows(), b.cols()) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
  }
  return out;
}

Vector vecmat(std::span<const double> x, const Matrix& m) {
  if (x.size() != m.rows()) {
    throw InvalidArgument("vecmat: 1x" + std::to_string(x.size()) + " * " +
                          shape(m.rows(), m.cols()));
  }
  Vector out(m.cols(), 0.0);
  for (std::size_t k = 0; k < m.rows(); ++k) {
    const auto src = m.row(k);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += x[k] * src[j];
  }
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InvalidArgument("add: " + shape(a.rows(), a.cols()) + " + " +
                          shape(b.rows(), b.cols()));
  }
  Matrix out = a;
  auto dst = out.data();
  const auto src = b.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  return out;
}

Matrix column_block(const Matrix& m, std::size_t begin, std::size_t count) {
  if (begin + count > m.cols()) throw InvalidArgument("column_block: range out of bounds");
  Matrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto src = m.row(r).subspan(begin, count);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

void set_column_block(Matrix& dst, std::size_t begin, const Matrix& block) {
  if (block.rows() != dst.rows() || begin + block.cols() > dst.cols()) {
    throw InvalidArgument("set_column_block: shape mismatch");
  }
  for (std::size_t r = 0; r < dst.rows(); ++r) {
    const auto src = block.row(r);
    std::copy(src.begin(), src.end(), dst.row(r).begin() + static_cast<std::ptrdiff_t>(begin));
  }
}

Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows()) throw InvalidArgument("select_rows: index out of range");
    const auto src = m.row(rows[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("dot: length mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double rms(std::span<const double> v) {
  if (v.empty()) throw InvalidArgument("rms: empty vector");
  return std::sqrt(dot(v, v) / static_cast<double>(v.size()));
}

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw ZeroDirection("cosine: zero-norm argument");
  return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

Vector softmax_row(std::span<const double> logits) {
  if (logits.empty()) throw InvalidArgument("softmax_row: empty row");
  const double peak = *std::max_element(logits.begin(), logits.end());
  if (peak == kMasked) throw DegenerateRow("softmax_row: every entry is masked");
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] == kMasked ? 0.0 : std::exp(logits[i] - peak);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

double median_abs(std::span<const double> values) {
  if (values.empty()) throw InvalidArgument("median_abs: empty input");
  std::vector<double> mags(values.size());
  std::transform(values.begin(), values.end(), mags.begin(),
                 [](double v) { return std::abs(v); });
  const std::size_t mid = mags.size() / 2;
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mid), mags.end());
  const double upper = mags[mid];
  if (mags.size() % 2 == 1) return upper;
  const double lower =
      *std::max_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lower + upper);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("pearson: length mismatch");
  if (x.size() < 2) throw InvalidArgument("pearson: need at least two samples");
  const auto constant = [](std::span<const double> s) {
    return std::all_of(s.begin(), s.end(), [&](double v) { return v == s.front(); });
  };
  if (constant(x) || constant(y)) throw UndefinedCorrelation("pearson: constant input");
  const double n = static_cast<double>(x.size());
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw UndefinedCorrelation("pearson: constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

Vector project_onto(std::span<const double> v, std::span<const double> dir) {
  const double denom = dot(dir, dir);
  if (denom == 0.0) throw ZeroDirection("project_onto: zero direction");
  const double scale = dot(v, dir) / denom;
  Vector out(dir.size());
  for (std::size_t i = 0; i < dir.size(); ++i) out[i] = scale * dir[i];
  return out;
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace sinklab
