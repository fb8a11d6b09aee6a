#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace dbl {

// Structural problems: inconsistent shapes, bad graph wiring, invalid config.
class shape_error : public std::runtime_error {
 public:
  explicit shape_error(const std::string& what) : std::runtime_error(what) {}
};

// Numeric problems: NaN/Inf intermediates, zero-norm embeddings.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major matrix of doubles. The only tensor type in the project;
// vectors are 1xN or Nx1 matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw shape_error("Matrix: negative dimension");
  }
  Matrix(int rows, int cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != static_cast<size_t>(rows) * cols)
      throw shape_error("Matrix: data length does not match rows*cols");
  }
  Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows_ = static_cast<int>(init.size());
    cols_ = rows_ ? static_cast<int>(init.begin()->size()) : 0;
    data_.reserve(static_cast<size_t>(rows_) * cols_);
    for (const auto& row : init) {
      if (static_cast<int>(row.size()) != cols_)
        throw shape_error("Matrix: ragged initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  double operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static Matrix zeros(int r, int c) { return Matrix(r, c, 0.0); }
  static Matrix full(int r, int c, double v) { return Matrix(r, c, v); }
  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  // Ones everywhere except the diagonal; masks off positive-pair cells.
  static Matrix off_diagonal_mask(int n) {
    Matrix m(n, n, 1.0);
    for (int i = 0; i < n; ++i) m(i, i) = 0.0;
    return m;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw shape_error("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.raw()[i] - b.raw()[i]));
  return m;
}

// C = op_a(A) * op_b(B) with optional transposes.
inline Matrix matmul(const Matrix& a, const Matrix& b, bool trans_a = false, bool trans_b = false) {
  const int ar = trans_a ? a.cols() : a.rows();
  const int ac = trans_a ? a.rows() : a.cols();
  const int br = trans_b ? b.cols() : b.rows();
  const int bc = trans_b ? b.rows() : b.cols();
  if (ac != br)
    throw shape_error("matmul: inner dimensions " + std::to_string(ac) + " vs " +
                      std::to_string(br));
  Matrix c(ar, bc);
  for (int i = 0; i < ar; ++i) {
    for (int k = 0; k < ac; ++k) {
      const double av = trans_a ? a(k, i) : a(i, k);
      if (av == 0.0) continue;
      for (int j = 0; j < bc; ++j) {
        const double bv = trans_b ? b(j, k) : b(k, j);
        c(i, j) += av * bv;
      }
    }
  }
  return c;
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline double row_norm(const Matrix& a, int r) {
  double s = 0.0;
  for (int j = 0; j < a.cols(); ++j) s += a(r, j) * a(r, j);
  return std::sqrt(s);
}

// Row-wise L2 normalization. Zero rows map to zero rows.
inline Matrix normalize_rows(const Matrix& a) {
  Matrix out = a;
  for (int i = 0; i < a.rows(); ++i) {
    const double n = row_norm(a, i);
    if (n == 0.0) continue;
    for (int j = 0; j < a.cols(); ++j) out(i, j) /= n;
  }
  return out;
}

}  // namespace dbl
