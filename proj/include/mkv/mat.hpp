#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mkv/errors.hpp"
#include "mkv/rng.hpp"

namespace mkv {

// Dense row-major matrix of doubles.  Row vectors are the working convention
// throughout: activations are (n_positions x width) and weights multiply on
// the right.
class Mat {
 public:
  Mat() = default;
  Mat(int rows, int cols) : rows_(rows), cols_(cols), data_(size_t(rows) * cols, 0.0) {
    if (rows < 0 || cols < 0) throw ShapeMismatch("Mat: negative dimension");
  }
  Mat(int rows, int cols, std::vector<double> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != size_t(rows) * cols) throw ShapeMismatch("Mat: data size does not match shape");
  }

  static Mat zeros(int rows, int cols) { return Mat(rows, cols); }
  static Mat identity(int n) {
    Mat m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Mat random_normal(int rows, int cols, Rng& rng, double scale = 1.0) {
    Mat m(rows, cols);
    for (auto& v : m.data_) v = scale * rng.next_normal();
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int i, int j) { return data_[size_t(i) * cols_ + j]; }
  double operator()(int i, int j) const { return data_[size_t(i) * cols_ + j]; }
  double* row_ptr(int i) { return data_.data() + size_t(i) * cols_; }
  const double* row_ptr(int i) const { return data_.data() + size_t(i) * cols_; }
  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline void check_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeMismatch(std::string(op) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

inline Mat add(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "add");
  Mat out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

inline Mat sub(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "sub");
  Mat out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

inline Mat scale(const Mat& a, double c) {
  Mat out = a;
  for (auto& v : out.data()) v *= c;
  return out;
}

inline Mat hadamard(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "hadamard");
  Mat out = a;
  for (size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

// i-k-j loop order keeps the inner loop contiguous in both b and out.
inline Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows())
    throw ShapeMismatch("matmul: " + shape_str(a) + " * " + shape_str(b));
  Mat out(a.rows(), b.cols());
  const int n = b.cols();
  for (int i = 0; i < a.rows(); ++i) {
    double* orow = out.row_ptr(i);
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.row_ptr(k);
      for (int j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

inline double frob_norm(const Mat& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return std::sqrt(s);
}

inline double max_abs(const Mat& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::fabs(v));
  return m;
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

inline bool all_finite(const Mat& a) {
  for (double v : a.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// Columns [begin, end) as a new matrix.
inline Mat slice_cols(const Mat& a, int begin, int end) {
  if (begin < 0 || end > a.cols() || begin >= end)
    throw ShapeMismatch("slice_cols: [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") of " + shape_str(a));
  Mat out(a.rows(), end - begin);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
  return out;
}

inline Mat slice_rows(const Mat& a, int begin, int end) {
  if (begin < 0 || end > a.rows() || begin >= end)
    throw ShapeMismatch("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                        ") of " + shape_str(a));
  Mat out(end - begin, a.cols());
  for (int i = begin; i < end; ++i)
    for (int j = 0; j < a.cols(); ++j) out(i - begin, j) = a(i, j);
  return out;
}

}  // namespace mkv
