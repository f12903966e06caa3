#include "mop/matrix.hpp"

#include <algorithm>

#include <Eigen/Dense>

namespace mop {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  require_shape(data_.size() == rows * cols, "matrix data length does not match shape");
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::row_vector(std::vector<double> values) {
  const auto n = values.size();
  return Matrix(1, n, std::move(values));
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

std::string Matrix::shape_string() const {
  return "(" + std::to_string(rows_) + "x" + std::to_string(cols_) + ")";
}

void require_shape(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMajor> view(const Matrix& m) { return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())}; }
Eigen::Map<RowMajor> view(Matrix& m) { return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())}; }

}  // namespace

void gemm_nn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.empty() || b.empty()) return;
  view(c).noalias() += view(a) * view(b);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_shape(a.cols() == b.rows(), "matmul " + a.shape_string() + " * " + b.shape_string());
  Matrix c(a.rows(), b.cols());
  gemm_nn_acc(a, b, c);
  return c;
}

void gemm_nt_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.empty() || b.empty()) return;
  view(c).noalias() += view(a) * view(b).transpose();
}

void gemm_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.empty() || b.empty()) return;
  view(c).noalias() += view(a).transpose() * view(b);
}

}  // namespace mop
