#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "fhvae/error.hpp"
#include "fhvae/kernels.hpp"

namespace fhvae {

// Dense row-major matrix. Vectors are stored as 1 x n.
template <class T>
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* row(std::size_t r) { return data_.data() + r * cols_; }
  const T* row(std::size_t r) const { return data_.data() + r * cols_; }
  std::span<T> row_span(std::size_t r) { return {row(r), cols_}; }
  std::span<const T> row_span(std::size_t r) const { return {row(r), cols_}; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }
  void resize(std::size_t rows, std::size_t cols) {
    rows_ = rows;
    cols_ = cols;
    data_.assign(rows * cols, T(0));
  }

  bool all_finite() const {
    for (T v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  Mat<U> cast() const {
    Mat<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const Mat& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<T> data_;
};

// c += a * b^T  with a: m x k, b: n x k, c: m x n
template <class T>
void matmul_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  require_dim(a.cols() == b.cols() && c.rows() == a.rows() && c.cols() == b.rows(),
              "matmul_nt shape mismatch");
  kern::matmul_nt(a.data(), b.data(), c.data(), a.rows(), b.rows(), a.cols());
}

// c += a * b  with a: m x n, b: n x k, c: m x k
template <class T>
void matmul_nn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  require_dim(a.cols() == b.rows() && c.rows() == a.rows() && c.cols() == b.cols(),
              "matmul_nn shape mismatch");
  kern::matmul_nn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
}

// c += a^T * b  with a: m x n, b: m x k, c: n x k
template <class T>
void matmul_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
  require_dim(a.rows() == b.rows() && c.rows() == a.cols() && c.cols() == b.cols(),
              "matmul_tn shape mismatch");
  kern::matmul_tn(a.data(), b.data(), c.data(), a.rows(), a.cols(), b.cols());
}

template <class T>
void add_row_inplace(Mat<T>& m, std::span<const T> v) {
  require_dim(v.size() == m.cols(), "bias length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) kern::axpy(T(1), v.data(), m.row(r), m.cols());
}

// out += column sums of m
template <class T>
void add_col_sums(const Mat<T>& m, std::span<T> out) {
  require_dim(out.size() == m.cols(), "colsum length mismatch");
  for (std::size_t r = 0; r < m.rows(); ++r) kern::axpy(T(1), m.row(r), out.data(), m.cols());
}

}  // namespace fhvae
