#pragma once

#include <Eigen/Dense>

namespace dida {

using Index = Eigen::Index;
/// Dense fp64 storage used throughout; row-major so per-sample rows are contiguous.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

}  // namespace dida
