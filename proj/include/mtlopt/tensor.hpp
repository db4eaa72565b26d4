#pragma once

#include <Eigen/Core>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "mtlopt/common.hpp"

namespace mtlopt {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;

// Dense 64-bit-float tensor. Storage is a flat row-major buffer plus a shape
// vector; a rank-0 tensor (empty shape) is a scalar. Construction rejects
// non-finite entries, so a Tensor always holds finite values.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1) { data_[0] = 0.0; }

  Tensor(std::vector<Index> shape, Eigen::VectorXd data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate();
  }

  Tensor(std::vector<Index> shape, std::initializer_list<double> values)
      : shape_(std::move(shape)),
        data_(Eigen::Map<const Eigen::VectorXd>(values.begin(),
                                                static_cast<Index>(values.size()))) {
    validate();
  }

  static Tensor scalar(double v) {
    Eigen::VectorXd d(1);
    d[0] = v;
    return Tensor({}, std::move(d));
  }

  static Tensor zeros(std::vector<Index> shape) {
    Index n = numel_of(shape);
    return Tensor(std::move(shape), Eigen::VectorXd::Zero(n));
  }

  static Tensor full(std::vector<Index> shape, double v) {
    Index n = numel_of(shape);
    return Tensor(std::move(shape), Eigen::VectorXd::Constant(n, v));
  }

  // Wraps a matrix as a rank-2 tensor (row-major copy of the values).
  static Tensor from_matrix(const Eigen::MatrixXd& m) {
    MatrixRM rm = m;
    return Tensor({m.rows(), m.cols()},
                  Eigen::Map<const Eigen::VectorXd>(rm.data(), rm.size()));
  }

  static Tensor from_vector(const Eigen::VectorXd& v) { return Tensor({v.size()}, v); }

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index numel() const { return data_.size(); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }

  const Eigen::VectorXd& flat() const { return data_; }
  Eigen::VectorXd& flat() { return data_; }

  double scalar_value() const {
    if (numel() != 1) throw ShapeError("scalar_value: tensor has " + std::to_string(numel()) + " elements");
    return data_[0];
  }

  // Rank-1 and rank-2 tensors viewed as a matrix; rank-1 maps to a row vector.
  ConstMatMap as_matrix() const {
    if (rank() == 2) return ConstMatMap(data_.data(), shape_[0], shape_[1]);
    if (rank() <= 1) return ConstMatMap(data_.data(), 1, numel());
    throw ShapeError("as_matrix: rank > 2");
  }

  Index rows() const { return rank() == 2 ? shape_[0] : 1; }
  Index cols() const { return rank() == 2 ? shape_[1] : numel(); }

  double operator()(Index i) const { return data_[i]; }
  double operator()(Index r, Index c) const { return data_[r * cols() + c]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor reshaped(std::vector<Index> shape) const {
    if (numel_of(shape) != numel()) throw ShapeError("reshaped: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_.size() == other.data_.size() && data_ == other.data_;
  }

 private:
  static Index numel_of(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  void validate() const {
    if (numel_of(shape_) != data_.size())
      throw ShapeError("tensor shape " + shape_str() + " does not match buffer of " +
                       std::to_string(data_.size()));
    if (!data_.allFinite()) throw NumericError("tensor holds non-finite values");
  }

  std::vector<Index> shape_;
  Eigen::VectorXd data_;
};

}  // namespace mtlopt
