#pragma once

#include <Eigen/Dense>

#include <complex>
#include <cstdint>
#include <numeric>
#include <vector>

namespace uwloc {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixR = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using ArrayX = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

using ComplexMatrix = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic,
                                    Eigen::RowMajor>;

/// Flat dense tensor: a shape plus contiguous row-major storage.
template <typename Scalar>
struct Tensor {
  std::vector<Index> shape;
  VectorX<Scalar> values;

  Tensor() = default;
  explicit Tensor(std::vector<Index> dims) : shape(std::move(dims)) {
    values = VectorX<Scalar>::Zero(element_count(shape));
  }

  static Index element_count(const std::vector<Index>& dims) {
    return std::accumulate(dims.begin(), dims.end(), Index{1}, std::multiplies<>());
  }

  Index size() const { return values.size(); }
  Index rank() const { return static_cast<Index>(shape.size()); }

  Scalar* data() { return values.data(); }
  const Scalar* data() const { return values.data(); }

  /// Row-major matrix view; rows * cols must equal size().
  Eigen::Map<MatrixR<Scalar>> matrix(Index rows, Index cols) {
    return {values.data(), rows, cols};
  }
  Eigen::Map<const MatrixR<Scalar>> matrix(Index rows, Index cols) const {
    return {values.data(), rows, cols};
  }

  template <typename Other>
  Tensor<Other> cast() const {
    Tensor<Other> out;
    out.shape = shape;
    out.values = values.template cast<Other>();
    return out;
  }
};

}  // namespace uwloc
