// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "gkd/errors.hpp"

namespace gkd {

using Scalar = double;
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
using MatrixRM =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Shape = std::vector<int>;

inline std::int64_t shape_size(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    check_param(d >= 0, "shape_size: negative dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

/// Dense n-d array of doubles in row-major logical order, backed by a flat
/// Eigen array. Shapes follow the [batch, channels, height, width] layout
/// wherever four dimensions are involved.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    data_ = ArrayX::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
    data_ = ArrayX::Constant(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : shape_(std::move(shape)) {
    check_param(static_cast<std::int64_t>(values.size()) == shape_size(shape_),
                "Tensor: initializer size does not match shape " +
                    shape_str(shape_));
    data_.resize(static_cast<Eigen::Index>(values.size()));
    Eigen::Index i = 0;
    for (Scalar v : values) data_[i++] = v;
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  Eigen::Index size() const { return data_.size(); }

  int dim(int i) const {
    check_param(i >= 0 && i < rank(), "Tensor::dim: axis out of range");
    return shape_[static_cast<std::size_t>(i)];
  }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  ArrayX& array() { return data_; }
  const ArrayX& array() const { return data_; }

  Scalar& operator[](Eigen::Index i) { return data_[i]; }
  Scalar operator[](Eigen::Index i) const { return data_[i]; }

  Scalar& at(int b, int c, int h, int w) {
    return data_[flat4(b, c, h, w)];
  }
  Scalar at(int b, int c, int h, int w) const {
    return data_[flat4(b, c, h, w)];
  }
  Scalar& at(int r, int c) {
    check_param(rank() == 2, "Tensor::at(r,c) on non-2d tensor");
    return data_[static_cast<Eigen::Index>(r) * dim(1) + c];
  }
  Scalar at(int r, int c) const {
    check_param(rank() == 2, "Tensor::at(r,c) on non-2d tensor");
    return data_[static_cast<Eigen::Index>(r) * dim(1) + c];
  }

  /// Row-major matrix view over the flat payload; rows*cols must equal size().
  Eigen::Map<MatrixRM> mat(Eigen::Index rows, Eigen::Index cols) {
    check_param(rows * cols == size(), "Tensor::mat: element count mismatch");
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const MatrixRM> mat(Eigen::Index rows, Eigen::Index cols) const {
    check_param(rows * cols == size(), "Tensor::mat: element count mismatch");
    return {data_.data(), rows, cols};
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    check_param(shape_size(s) == size(),
                "Tensor::reshaped: element count mismatch " + shape_str(shape_) +
                    " -> " + shape_str(s));
    Tensor out = *this;
    out.shape_ = std::move(s);
    return out;
  }

  bool all_finite() const { return data_.isFinite().all(); }

 private:
  Eigen::Index flat4(int b, int c, int h, int w) const {
    check_param(rank() == 4, "Tensor::at(b,c,h,w) on non-4d tensor");
    return ((static_cast<Eigen::Index>(b) * dim(1) + c) * dim(2) + h) * dim(3) +
           w;
  }

  Shape shape_;
  ArrayX data_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const std::string& who) {
  check_param(a.same_shape(b), who + ": shape mismatch " + shape_str(a.shape()) +
                                   " vs " + shape_str(b.shape()));
}

}  // namespace gkd
