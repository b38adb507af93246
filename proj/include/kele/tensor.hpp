// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 arithmetic on Eigen matrices plus a small reverse-mode tape.
// Vectors are n x 1 matrices; activations are stored column-per-token.

#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace kele {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLayerNormEps = 1e-5;

std::string shape_string(Eigen::Index rows, Eigen::Index cols);

template <typename Derived>
std::string shape_of(const Eigen::MatrixBase<Derived>& m) {
  return shape_string(m.rows(), m.cols());
}

/// Checked matrix product. Throws ShapeError naming both shapes on mismatch.
template <typename DerivedA, typename DerivedB>
Eigen::Matrix<typename DerivedA::Scalar, Eigen::Dynamic, Eigen::Dynamic> matmul(
    const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_of(a) + " * " + shape_of(b));
  }
  return a * b;
}

/// Max-shifted softmax of a vector.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw ShapeError("softmax: empty input");
  const Scalar top = x.maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> e = (x.reshaped().array() - top).exp().matrix();
  return e / e.sum();
}

template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> log_softmax(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  if (x.size() == 0) throw ShapeError("log_softmax: empty input");
  const Scalar top = x.maxCoeff();
  const Scalar lse = top + std::log((x.reshaped().array() - top).exp().sum());
  return (x.reshaped().array() - lse).matrix();
}

/// (x - mean) / sqrt(var + eps) * gain + bias, population variance.
template <typename DX, typename DG, typename DB>
Eigen::Matrix<typename DX::Scalar, Eigen::Dynamic, 1> layer_norm(const Eigen::MatrixBase<DX>& x,
                                                                 const Eigen::MatrixBase<DG>& gain,
                                                                 const Eigen::MatrixBase<DB>& bias) {
  using Scalar = typename DX::Scalar;
  if (x.size() < 2) throw ShapeError("layer_norm: need at least 2 features, got " + shape_of(x));
  if (gain.size() != x.size() || bias.size() != x.size()) {
    throw ShapeError("layer_norm: gain/bias " + shape_of(gain) + "/" + shape_of(bias) + " vs input " + shape_of(x));
  }
  const auto n = static_cast<Scalar>(x.size());
  const Scalar mean = x.sum() / n;
  const auto centered = (x.reshaped().array() - mean).eval();
  const Scalar var = centered.square().sum() / n;
  const Scalar inv = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
  return (centered * inv * gain.reshaped().array() + bias.reshaped().array()).matrix();
}

// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

template <typename Derived>
Matrix gelu(const Eigen::MatrixBase<Derived>& x) {
  return x.unaryExpr([](double v) { return gelu(v); });
}

bool all_finite(const Matrix& m);

// ---------------------------------------------------------------------------
// Reverse-mode tape

class Tape;

/// Handle to a node recorded on a Tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
};

/// Contiguous token range of one sequence inside a column-concatenated batch.
struct Segment {
  Eigen::Index start = 0;
  Eigen::Index length = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers a differentiable leaf owning its value.
  Var leaf(Matrix value);
  /// Registers a differentiable leaf aliasing external storage; the storage
  /// must outlive the tape and stay unmodified until backward() returns.
  Var leaf_ref(const Matrix& value);
  Var constant(Matrix value);
  Var constant_ref(const Matrix& value);

  const Matrix& value(Var v) const;
  /// Gradient of the last backward() loss with respect to a leaf.
  const Matrix& grad(Var v) const;

  /// Propagates d(loss)/d(leaf) to every leaf. A tape supports one pass.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool needs_grad(Var v) const { return nodes_.at(v.id).needs_grad; }

  using Backprop = std::function<void(Tape&, std::size_t)>;

  // Used by op implementations.
  Var record(Matrix value, std::vector<std::size_t> inputs, Backprop backprop);
  Matrix& grad_buffer(std::size_t id);
  const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }
  const Matrix& value_of(std::size_t id) const;

 private:
  struct Node {
    Matrix owned;
    const Matrix* external = nullptr;
    Matrix grad;
    std::vector<std::size_t> inputs;
    Backprop backprop;
    bool needs_grad = false;
    bool is_leaf = false;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

/// Differentiable operations. Gradients flow only into inputs that depend on
/// a registered leaf.
namespace ad {

Var matmul(Var a, Var b);
/// a^T b without materializing the transpose.
Var matmul_tn(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var a, double s);
Var exp(Var a);
Var gelu(Var a);
Var relu(Var a);
Var sum(Var a);
Var dot(Var a, Var b);
/// Normalizes every column over its rows; gain and bias are n x 1.
Var layer_norm_cols(Var x, Var gain, Var bias);
/// Column-wise log-softmax.
Var log_softmax_cols(Var x);
/// Column-wise softmax.
Var softmax_cols(Var x);
/// Columns of table chosen by ids.
Var gather_cols(Var table, std::vector<Eigen::Index> ids);
Var select_cols(Var x, std::vector<Eigen::Index> cols);
Var pick(Var x, Eigen::Index row, Eigen::Index col);
/// Copy of x with h (n x 1) added to one column.
Var add_to_col(Var x, Eigen::Index col, Var h);
/// Multi-head causal self-attention inside each segment. q, k, v are d x T.
Var causal_attention(Var q, Var k, Var v, std::vector<Segment> segments, int n_heads);
/// Mean over columns j of -logp(target_j, j).
Var nll_cols(Var logp, std::vector<Eigen::Index> targets);

}  // namespace ad

/// Compares the tape gradient of f at x against central differences.
/// Returns max_i |analytic_i - numeric_i| / max(1, |analytic_i|).
double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double step);

}  // namespace kele
