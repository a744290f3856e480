#pragma once

#include <Eigen/Core>

namespace tablefree {

// Row-major so that a [rows, cols] tensor whose rows are flattened leading
// axes (batch x time) maps directly onto contiguous memory.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Index = Eigen::Index;

}  // namespace tablefree
