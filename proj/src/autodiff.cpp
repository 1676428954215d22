#include "dida/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace dida::ad {
namespace {

Index shape_rows(const Shape& shape) {
  if (shape.empty()) return 1;
  return shape[0];
}

Index shape_cols(const Shape& shape) {
  if (shape.size() < 2) return 1;
  return shape[1];
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) fail(ErrorKind::numeric, std::string(what) + ": non-finite value");
}

void check_shape(const Shape& shape) {
  if (shape.size() > 2) fail(ErrorKind::dimension, "rank > 2 is not supported: " + shape_string(shape));
  for (Index d : shape) {
    if (d < 0) fail(ErrorKind::dimension, "negative dimension in " + shape_string(shape));
  }
}

bool any_requires_grad(const std::vector<Tensor>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::dimension,
         std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::from_shape(const Shape& shape, Matrix values, bool requires_grad) {
  check_shape(shape);
  if (values.rows() != shape_rows(shape) || values.cols() != shape_cols(shape)) {
    fail(ErrorKind::dimension, "value layout does not match shape " + shape_string(shape));
  }
  check_finite(values, "tensor creation");
  Tensor t;
  t.data_ = std::make_shared<TensorData>();
  t.data_->shape = shape;
  t.data_->value = std::move(values);
  t.data_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::matrix(Matrix values, bool requires_grad) {
  const Shape shape{values.rows(), values.cols()};
  return from_shape(shape, std::move(values), requires_grad);
}

Tensor Tensor::vector(const Vector& values, bool requires_grad) {
  Matrix m = values;
  return from_shape(Shape{values.size()}, std::move(m), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  Matrix m(1, 1);
  m(0, 0) = value;
  return from_shape(Shape{}, std::move(m), requires_grad);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  check_shape(shape);
  return from_shape(shape, Matrix::Zero(shape_rows(shape), shape_cols(shape)), requires_grad);
}

double Tensor::item() const {
  if (size() != 1) fail(ErrorKind::contract, "item() on tensor of shape " + shape_string(shape()));
  return data_->value(0, 0);
}

Vector Tensor::as_vector() const {
  return Eigen::Map<const Vector>(data_->value.data(), data_->value.size());
}

Tensor& Tensor::set_requires_grad(bool flag) {
  data_->requires_grad = flag;
  return *this;
}

Matrix Tensor::grad() const {
  if (has_grad()) return data_->grad;
  return Matrix::Zero(rows(), cols());
}

void Tensor::zero_grad() {
  data_->grad.setZero(rows(), cols());
}

void Tensor::accumulate_grad(const Matrix& g) const {
  if (!data_->requires_grad) return;
  if (g.rows() != rows() || g.cols() != cols()) {
    fail(ErrorKind::contract, "gradient shape mismatch for tensor " + shape_string(shape()));
  }
  if (data_->grad.size() == 0) {
    data_->grad = g;
  } else {
    data_->grad += g;
  }
}

// ---- Tape -------------------------------------------------------------------

Tensor Tape::record(const Shape& shape, Matrix value, const std::vector<Tensor>& inputs, BackwardFn backward) {
  Tensor out = Tensor::from_shape(shape, std::move(value), false);
  if (any_requires_grad(inputs)) {
    out.data_->requires_grad = true;
    out.data_->leaf = false;
    nodes_.push_back(Node{out.data_, std::move(backward)});
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    fail(ErrorKind::contract, "backward() needs a scalar loss");
  }
  if (nodes_.empty()) fail(ErrorKind::contract, "backward() on an empty tape");
  for (auto& node : nodes_) node.output->grad.resize(0, 0);
  if (!loss.requires_grad()) return;
  loss.data_->grad = Matrix::Ones(1, 1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.size() == 0) continue;
    it->backward(it->output->grad);
  }
}

// ---- activations --------------------------------------------------------------

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  fail(ErrorKind::configuration, "unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

double activation_lipschitz(Activation kind) { return kind == Activation::sigmoid ? 0.25 : 1.0; }

double apply_activation(Activation kind, double x) {
  switch (kind) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::tanh: return std::tanh(x);
    case Activation::sigmoid:
      if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
      {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
  }
  return x;
}

double activation_derivative(Activation kind, double x) {
  switch (kind) {
    case Activation::identity: return 1.0;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::sigmoid: {
      const double s = apply_activation(Activation::sigmoid, x);
      return s * (1.0 - s);
    }
  }
  return 1.0;
}

// ---- operations -----------------------------------------------------------------

Tensor affine(Tape& tape, const Tensor& W, const Tensor& b, const Tensor& x) {
  if (W.rank() != 2 || b.rank() != 1 || b.shape()[0] != W.shape()[0]) {
    fail(ErrorKind::dimension, "affine: W " + shape_string(W.shape()) + " and b " + shape_string(b.shape()) +
                                   " do not conform");
  }
  const Index m = W.shape()[0];
  const Index n = W.shape()[1];
  if (x.rank() == 1) {
    if (x.shape()[0] != n) {
      fail(ErrorKind::dimension, "affine: x " + shape_string(x.shape()) + " vs W " + shape_string(W.shape()));
    }
    Matrix out = W.value() * x.value() + b.value();
    return tape.record(Shape{m}, std::move(out), {W, b, x}, [W, b, x](const Matrix& g) mutable {
      if (W.requires_grad()) W.accumulate_grad(g * x.value().transpose());
      if (b.requires_grad()) b.accumulate_grad(g);
      if (x.requires_grad()) x.accumulate_grad(W.value().transpose() * g);
    });
  }
  if (x.rank() != 2 || x.shape()[1] != n) {
    fail(ErrorKind::dimension, "affine: x " + shape_string(x.shape()) + " vs W " + shape_string(W.shape()));
  }
  const Index batch = x.shape()[0];
  Matrix out = x.value() * W.value().transpose();
  out.rowwise() += b.value().col(0).transpose();
  return tape.record(Shape{batch, m}, std::move(out), {W, b, x}, [W, b, x](const Matrix& g) mutable {
    if (W.requires_grad()) W.accumulate_grad(g.transpose() * x.value());
    if (b.requires_grad()) b.accumulate_grad(g.colwise().sum().transpose());
    if (x.requires_grad()) x.accumulate_grad(g * W.value());
  });
}

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    fail(ErrorKind::dimension, "matmul: " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Matrix out = a.value() * b.value();
  const Shape shape{a.shape()[0], b.shape()[1]};
  return tape.record(shape, std::move(out), {a, b}, [a, b](const Matrix& g) mutable {
    if (a.requires_grad()) a.accumulate_grad(g * b.value().transpose());
    if (b.requires_grad()) b.accumulate_grad(a.value().transpose() * g);
  });
}

Tensor activation(Tape& tape, Activation kind, const Tensor& x) {
  Matrix out = activate(kind, x.value().array()).matrix();
  return tape.record(x.shape(), std::move(out), {x}, [kind, x](const Matrix& g) mutable {
    Matrix d = (g.array() * activate_derivative(kind, x.value().array())).matrix();
    x.accumulate_grad(d);
  });
}

Tensor reduce(Tape& tape, Reduction kind, const Tensor& x, Axis axis) {
  if (x.rank() == 0) fail(ErrorKind::domain, "reduce: scalar input has no axis");
  if (x.rank() == 1 && axis == Axis::cols) fail(ErrorKind::domain, "reduce: rank-1 tensor has no axis 1");
  const Index rows = x.rows();
  const Index cols = x.cols();
  Index count = 0;
  Shape shape;
  Matrix out;
  switch (axis) {
    case Axis::all:
      count = x.size();
      shape = {};
      out = Matrix::Constant(1, 1, x.value().sum());
      break;
    case Axis::rows:
      count = rows;
      if (x.rank() == 1) {
        shape = {};
        out = Matrix::Constant(1, 1, x.value().sum());
      } else {
        shape = {cols};
        out = x.value().colwise().sum().transpose();
      }
      break;
    case Axis::cols:
      count = cols;
      shape = {rows};
      out = x.value().rowwise().sum();
      break;
  }
  if (count == 0) fail(ErrorKind::domain, "reduce over an empty axis");
  const double factor = kind == Reduction::mean ? 1.0 / static_cast<double>(count) : 1.0;
  out *= factor;
  const int rank = x.rank();
  return tape.record(shape, std::move(out), {x}, [x, axis, factor, rows, cols, rank](const Matrix& g) mutable {
    Matrix d(rows, cols);
    if (axis == Axis::all || (axis == Axis::rows && rank == 1)) {
      d.setConstant(g(0, 0) * factor);
    } else if (axis == Axis::rows) {
      d = (g.transpose() * factor).replicate(rows, 1);
    } else {
      d = (g * factor).replicate(1, cols);
    }
    x.accumulate_grad(d);
  });
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix out = a.value() + b.value();
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b](const Matrix& g) mutable {
    a.accumulate_grad(g);
    b.accumulate_grad(g);
  });
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a.value() - b.value();
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b](const Matrix& g) mutable {
    a.accumulate_grad(g);
    b.accumulate_grad(-g);
  });
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix out = a.value().cwiseProduct(b.value());
  return tape.record(a.shape(), std::move(out), {a, b}, [a, b](const Matrix& g) mutable {
    if (a.requires_grad()) a.accumulate_grad(g.cwiseProduct(b.value()));
    if (b.requires_grad()) b.accumulate_grad(g.cwiseProduct(a.value()));
  });
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  Matrix out = x.value() * factor;
  return tape.record(x.shape(), std::move(out), {x}, [x, factor](const Matrix& g) mutable {
    x.accumulate_grad(g * factor);
  });
}

Tensor add_scalar(Tape& tape, const Tensor& x, double offset) {
  Matrix out = x.value().array() + offset;
  return tape.record(x.shape(), std::move(out), {x}, [x](const Matrix& g) mutable { x.accumulate_grad(g); });
}

Tensor exp(Tape& tape, const Tensor& x) {
  Matrix out = x.value().array().exp();
  Matrix saved = out;
  return tape.record(x.shape(), std::move(out), {x}, [x, saved](const Matrix& g) mutable {
    x.accumulate_grad(g.cwiseProduct(saved));
  });
}

Tensor log(Tape& tape, const Tensor& x) {
  if ((x.value().array() <= 0.0).any()) fail(ErrorKind::numeric, "log of a non-positive value");
  Matrix out = x.value().array().log();
  return tape.record(x.shape(), std::move(out), {x}, [x](const Matrix& g) mutable {
    x.accumulate_grad((g.array() / x.value().array()).matrix());
  });
}

Tensor clamp(Tape& tape, const Tensor& x, double lo, double hi) {
  Matrix out = x.value().cwiseMax(lo).cwiseMin(hi);
  return tape.record(x.shape(), std::move(out), {x}, [x, lo, hi](const Matrix& g) mutable {
    const auto inside = (x.value().array() >= lo && x.value().array() <= hi).cast<double>();
    x.accumulate_grad((g.array() * inside).matrix());
  });
}

Tensor norm2(Tape& tape, const Tensor& x) {
  const double n = x.value().norm();
  return tape.record(Shape{}, Matrix::Constant(1, 1, n), {x}, [x, n](const Matrix& g) mutable {
    if (n == 0.0) {
      x.accumulate_grad(Matrix::Zero(x.rows(), x.cols()));
      return;
    }
    x.accumulate_grad(x.value() * (g(0, 0) / n));
  });
}

Tensor concat(Tape& tape, const std::vector<Tensor>& parts) {
  Index total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 1) fail(ErrorKind::dimension, "concat expects rank-1 tensors");
    total += p.size();
  }
  Matrix out(total, 1);
  Index offset = 0;
  for (const auto& p : parts) {
    out.block(offset, 0, p.size(), 1) = p.value();
    offset += p.size();
  }
  return tape.record(Shape{total}, std::move(out), parts, [parts](const Matrix& g) mutable {
    Index at = 0;
    for (auto& p : parts) {
      if (p.requires_grad()) p.accumulate_grad(g.block(at, 0, p.size(), 1));
      at += p.size();
    }
  });
}

Tensor reshape(Tape& tape, const Tensor& x, const Shape& shape) {
  check_shape(shape);
  const Index rows = shape_rows(shape);
  const Index cols = shape_cols(shape);
  if (rows * cols != x.size()) {
    fail(ErrorKind::dimension, "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  Matrix out = Eigen::Map<const Matrix>(x.value().data(), rows, cols);
  const Index in_rows = x.rows();
  const Index in_cols = x.cols();
  return tape.record(shape, std::move(out), {x}, [x, in_rows, in_cols](const Matrix& g) mutable {
    x.accumulate_grad(Eigen::Map<const Matrix>(g.data(), in_rows, in_cols));
  });
}

Tensor bce_with_logits(Tape& tape, const Tensor& logit, double label, double weight) {
  if (logit.size() != 1) fail(ErrorKind::dimension, "bce_with_logits expects a single logit");
  const double z = logit.value()(0, 0);
  const double loss = weight * (std::max(z, 0.0) - z * label + std::log1p(std::exp(-std::abs(z))));
  return tape.record(Shape{}, Matrix::Constant(1, 1, loss), {logit}, [logit, z, label, weight](const Matrix& g) mutable {
    const double p = apply_activation(Activation::sigmoid, z);
    logit.accumulate_grad(Matrix::Constant(logit.rows(), logit.cols(), g(0, 0) * weight * (p - label)));
  });
}

// ---- gradient checking ----------------------------------------------------------

GradientCheckReport check_gradients(const LossFn& loss, std::vector<Tensor> params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) fail(ErrorKind::domain, "check_gradients: eps must lie in (0, 1e-2]");

  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    const Tensor value = loss(tape);
    if (!std::isfinite(value.item())) fail(ErrorKind::numeric, "check_gradients: non-finite loss");
    if (!tape.empty()) tape.backward(value);
  }
  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  auto evaluate = [&]() {
    Tape tape;
    const double v = loss(tape).item();
    if (!std::isfinite(v)) fail(ErrorKind::numeric, "check_gradients: non-finite loss under perturbation");
    return v;
  };

  GradientCheckReport report;
  const double f0 = evaluate();
  // central differences carry roundoff of order 1e-16 |f| / eps
  const double noise_floor = std::max(1e-12, 1e-6 * std::max(1.0, std::abs(f0)));
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Matrix& value = params[pi].mutable_value();
    for (Index k = 0; k < value.size(); ++k) {
      double& coord = value.data()[k];
      const double saved = coord;
      coord = saved + eps;
      const double f_plus = evaluate();
      coord = saved - eps;
      const double f_minus = evaluate();
      coord = saved + 0.5 * eps;
      const double f_half_plus = evaluate();
      coord = saved - 0.5 * eps;
      const double f_half_minus = evaluate();
      coord = saved;

      const double forward = (f_plus - f0) / eps;
      const double backward = (f0 - f_minus) / eps;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double numeric_half = (f_half_plus - f_half_minus) / eps;
      // smooth: the one-sided gap halves with the window and the central
      // difference barely moves
      const double gap = forward - backward;
      const double gap_half = ((f_half_plus - f0) - (f0 - f_half_minus)) / (0.5 * eps);
      const double scale = std::max({1.0, std::abs(forward), std::abs(backward)});
      const double fine = 1e-7 * std::max(1.0, std::abs(f0));
      if (std::abs(gap) > 1e-3 * scale || std::abs(gap - 2.0 * gap_half) > fine ||
          std::abs(numeric - numeric_half) > fine * std::max(1.0, std::abs(numeric))) {
        report.kinks.push_back({pi, k});
        continue;
      }
      const double a = analytic[pi].data()[k];
      const double denom = std::max({std::abs(a), std::abs(numeric), noise_floor});
      report.max_relative_error = std::max(report.max_relative_error, std::abs(a - numeric) / denom);
      ++report.checked;
    }
  }
  for (auto& p : params) p.zero_grad();
  return report;
}

// ---- Adam -------------------------------------------------------------------------

AdamState make_adam_state(std::span<const Tensor> params, double learning_rate) {
  AdamState state;
  state.learning_rate = learning_rate;
  for (const auto& p : params) {
    state.first_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
    state.second_moment.push_back(Matrix::Zero(p.rows(), p.cols()));
  }
  return state;
}

void adam_step(std::span<Tensor> params, std::span<const Matrix> grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    fail(ErrorKind::contract, "adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols() ||
        state.first_moment[i].rows() != p.rows() || state.first_moment[i].cols() != p.cols()) {
      fail(ErrorKind::contract, "adam_step: shape mismatch at parameter " + std::to_string(i));
    }
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
    v = state.beta2 * v + (1.0 - state.beta2) * grads[i].cwiseAbs2();
    const auto m_hat = m.array() / correction1;
    const auto v_hat = v.array() / correction2;
    params[i].mutable_value().array() -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
  }
}

void adam_step(std::span<Tensor> params, AdamState& state) {
  std::vector<Matrix> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.push_back(p.grad());
  adam_step(params, grads, state);
}

void zero_grads(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

}  // namespace dida::ad
