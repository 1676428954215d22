#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "dida/error.hpp"
#include "dida/types.hpp"

// Reverse-mode automatic differentiation over dense fp64 tensors of rank 0, 1
// or 2. Values are stored row-major; a rank-1 tensor of length n is held as an
// n x 1 matrix and a scalar as 1 x 1.
namespace dida::ad {

using dida::Index;
using dida::Matrix;
using dida::Vector;
using Shape = std::vector<Index>;

struct TensorData {
  Shape shape;
  Matrix value;
  Matrix grad;  // empty until the first accumulation
  bool requires_grad = false;
  bool leaf = true;
};

/// Shared handle to tensor storage. Copies alias the same values and gradient.
class Tensor {
 public:
  Tensor() = default;

  /// Rank-2 tensor. Throws a numeric error on NaN/Inf.
  static Tensor matrix(Matrix values, bool requires_grad = false);
  /// Rank-1 tensor.
  static Tensor vector(const Vector& values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  /// Generic constructor; `values` must already be laid out as rows x cols of `shape`.
  static Tensor from_shape(const Shape& shape, Matrix values, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  Index rows() const { return data_->value.rows(); }
  Index cols() const { return data_->value.cols(); }
  Index size() const { return data_->value.size(); }

  const Matrix& value() const { return data_->value; }
  /// In-place access for optimizers and finite-difference probes. Not recorded.
  Matrix& mutable_value() { return data_->value; }
  double item() const;
  Vector as_vector() const;

  bool requires_grad() const { return data_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const { return data_->leaf; }

  bool has_grad() const { return data_->grad.size() != 0; }
  /// Gradient, or zeros of the value shape when nothing has been accumulated.
  Matrix grad() const;
  void zero_grad();
  void accumulate_grad(const Matrix& g) const;

  const TensorData* id() const { return data_.get(); }

 private:
  friend class Tape;
  std::shared_ptr<TensorData> data_;
};

std::string shape_string(const Shape& shape);

/// Ordered record of differentiable operations. Nodes are appended as the
/// forward pass runs, so the storage order is already topological.
class Tape {
 public:
  using BackwardFn = std::function<void(const Matrix& output_grad)>;

  /// Creates the output tensor and, when any input requires a gradient,
  /// records `backward` for it. Returns a constant tensor otherwise.
  Tensor record(const Shape& shape, Matrix value, const std::vector<Tensor>& inputs, BackwardFn backward);

  /// Propagates d(loss)/d(node) through the tape. Intermediate gradients are
  /// reset on every call; leaf gradients accumulate across calls until the
  /// caller zeroes them.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool empty() const { return nodes_.empty(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::shared_ptr<TensorData> output;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

enum class Activation { identity, relu, tanh, sigmoid };

Activation parse_activation(std::string_view name);
std::string_view to_string(Activation kind);
/// Lipschitz constant of the scalar activation.
double activation_lipschitz(Activation kind);

double apply_activation(Activation kind, double x);
/// Derivative expressed through the pre-activation `x`; relu'(0) = 0.
double activation_derivative(Activation kind, double x);

template <typename Derived>
auto activate(Activation kind, const Eigen::ArrayBase<Derived>& x) {
  using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Array out = x;
  switch (kind) {
    case Activation::identity: break;
    case Activation::relu: out = out.max(0.0); break;
    case Activation::tanh: out = out.tanh(); break;
    case Activation::sigmoid: out = out.unaryExpr([](double v) { return apply_activation(Activation::sigmoid, v); }); break;
  }
  return out;
}

template <typename Derived>
auto activate_derivative(Activation kind, const Eigen::ArrayBase<Derived>& x) {
  using Array = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Array out(x.rows(), x.cols());
  switch (kind) {
    case Activation::identity: out.setOnes(); break;
    case Activation::relu: out = (x > 0.0).template cast<double>(); break;
    case Activation::tanh: out = 1.0 - x.tanh().square(); break;
    case Activation::sigmoid:
      out = x.unaryExpr([](double v) { return activation_derivative(Activation::sigmoid, v); });
      break;
  }
  return out;
}

enum class Reduction { mean, sum };
/// `all` reduces every element to a scalar; `rows` collapses axis 0
/// (column-wise result); `cols` collapses axis 1 (row-wise result).
enum class Axis { all, rows, cols };

// ---- operations -----------------------------------------------------------

/// W [m x n], b [m], x [n] -> [m]; or x [batch x n] -> [batch x m].
Tensor affine(Tape& tape, const Tensor& W, const Tensor& b, const Tensor& x);
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor activation(Tape& tape, Activation kind, const Tensor& x);
Tensor reduce(Tape& tape, Reduction kind, const Tensor& x, Axis axis);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);
Tensor sub(Tape& tape, const Tensor& a, const Tensor& b);
Tensor mul(Tape& tape, const Tensor& a, const Tensor& b);
Tensor scale(Tape& tape, const Tensor& x, double factor);
Tensor add_scalar(Tape& tape, const Tensor& x, double offset);
Tensor exp(Tape& tape, const Tensor& x);
Tensor log(Tape& tape, const Tensor& x);
/// Clamp with zero gradient outside [lo, hi].
Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi);
/// Euclidean norm of all elements; the subgradient at 0 is 0.
Tensor norm2(Tape& tape, const Tensor& x);
/// Concatenates rank-1 tensors.
Tensor concat(Tape& tape, const std::vector<Tensor>& parts);
Tensor reshape(Tape& tape, const Tensor& x, const Shape& shape);
/// weight * BCE(sigmoid(logit), label), evaluated in the overflow-free form.
Tensor bce_with_logits(Tape& tape, const Tensor& logit, double label, double weight);

// ---- gradient checking ----------------------------------------------------

struct KinkCoordinate {
  std::size_t param;
  Index index;
};

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates whose one-sided differences disagree (the function is not
  /// differentiable inside [x - eps, x + eps]); reported, not scored.
  std::vector<KinkCoordinate> kinks;
};

using LossFn = std::function<Tensor(Tape&)>;

/// Central-difference comparison of every coordinate of `params` against the
/// reverse-mode gradient of `loss`. Relative error denominators are
/// max(|analytic|, |numeric|, 1e-6 max(1, |loss|)). Coordinates where the
/// differences at eps and eps/2 disagree are kinks. Parameter values are
/// restored on exit.
GradientCheckReport check_gradients(const LossFn& loss, std::vector<Tensor> params, double eps);

// ---- Adam -----------------------------------------------------------------

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  long step_count = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam_state(std::span<const Tensor> params, double learning_rate = 1e-3);

/// One bias-corrected Adam update applied in place.
void adam_step(std::span<Tensor> params, std::span<const Matrix> grads, AdamState& state);

/// Same, taking the gradients accumulated on the parameters.
void adam_step(std::span<Tensor> params, AdamState& state);

void zero_grads(std::span<Tensor> params);

}  // namespace dida::ad
