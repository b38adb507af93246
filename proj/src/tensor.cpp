// Copyright (c) 2026, The KELE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0

#include "kele/tensor.hpp"

#include <algorithm>
#include <limits>
#include <utility>

namespace kele {

std::string shape_string(Eigen::Index rows, Eigen::Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

const Matrix& Var::value() const {
  if (tape == nullptr) throw TapeError("Var: detached handle");
  return tape->value(*this);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("Var::scalar on " + shape_string(v.rows(), v.cols()));
  return v(0, 0);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Matrix value) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = true;
  n.is_leaf = true;
  return push(std::move(n));
}

Var Tape::leaf_ref(const Matrix& value) {
  Node n;
  n.external = &value;
  n.needs_grad = true;
  n.is_leaf = true;
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Matrix& value) {
  Node n;
  n.external = &value;
  return push(std::move(n));
}

const Matrix& Tape::value_of(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.external != nullptr ? *n.external : n.owned;
}

const Matrix& Tape::value(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw TapeError("Tape: handle belongs to another tape");
  return value_of(v.id);
}

const Matrix& Tape::grad(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw TapeError("Tape: handle belongs to another tape");
  const Node& n = nodes_[v.id];
  if (!n.is_leaf) throw TapeError("Tape::grad: node " + std::to_string(v.id) + " is not a leaf");
  if (!backward_done_) throw TapeError("Tape::grad: backward() has not run");
  return n.grad;
}

Matrix& Tape::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Matrix& v = value_of(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

Var Tape::record(Matrix value, std::vector<std::size_t> inputs, Backprop backprop) {
  Node n;
  n.owned = std::move(value);
  n.needs_grad = std::any_of(inputs.begin(), inputs.end(), [&](std::size_t i) { return nodes_[i].needs_grad; });
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backprop = std::move(backprop);
  return push(std::move(n));
}

void Tape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) throw TapeError("backward: loss is detached from this tape");
  if (backward_done_) throw TapeError("backward: tape already differentiated; build a new tape");
  const Matrix& lv = value_of(loss.id);
  if (lv.size() != 1) throw TapeError("backward: loss must be scalar, got " + shape_string(lv.rows(), lv.cols()));
  if (!nodes_[loss.id].needs_grad) throw TapeError("backward: loss does not depend on any leaf");
  backward_done_ = true;

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].is_leaf) grad_buffer(i);
  }
  grad_buffer(loss.id).setConstant(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.is_leaf || n.grad.size() == 0) continue;
    n.backprop(*this, i);
    // Interior gradients are dead once propagated.
    n.grad.resize(0, 0);
  }
}

namespace ad {
namespace {

void check_same_tape(Var a, Var b, const char* op) {
  if (a.tape == nullptr || a.tape != b.tape) throw TapeError(std::string(op) + ": operands on different tapes");
}

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.rows(), a.cols()) + " vs " +
                     shape_string(b.rows(), b.cols()));
  }
}

}  // namespace

Var matmul(Var a, Var b) {
  check_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions disagree: " + shape_string(av.rows(), av.cols()) + " * " +
                     shape_string(bv.rows(), bv.cols()));
  }
  Matrix out(av.rows(), bv.cols());
  out.noalias() = av * bv;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(Var{&tp, ia})) tp.grad_buffer(ia).noalias() += g * tp.value_of(ib).transpose();
    if (tp.needs_grad(Var{&tp, ib})) tp.grad_buffer(ib).noalias() += tp.value_of(ia).transpose() * g;
  });
}

Var matmul_tn(Var a, Var b) {
  check_same_tape(a, b, "matmul_tn");
  Tape& t = *a.tape;
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows()) {
    throw ShapeError("matmul_tn: inner dimensions disagree: " + shape_string(av.cols(), av.rows()) + " * " +
                     shape_string(bv.rows(), bv.cols()));
  }
  Matrix out(av.cols(), bv.cols());
  out.noalias() = av.transpose() * bv;
  const std::size_t ia = a.id, ib = b.id;
  return t.record(std::move(out), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(Var{&tp, ia})) tp.grad_buffer(ia).noalias() += tp.value_of(ib) * g.transpose();
    if (tp.needs_grad(Var{&tp, ib})) tp.grad_buffer(ib).noalias() += tp.value_of(ia) * g;
  });
}

Var add(Var a, Var b) {
  check_same_tape(a, b, "add");
  check_same_shape(a.value(), b.value(), "add");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(Var{&tp, ia})) tp.grad_buffer(ia) += g;
    if (tp.needs_grad(Var{&tp, ib})) tp.grad_buffer(ib) += g;
  });
}

Var sub(Var a, Var b) {
  check_same_tape(a, b, "sub");
  check_same_shape(a.value(), b.value(), "sub");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(Var{&tp, ia})) tp.grad_buffer(ia) += g;
    if (tp.needs_grad(Var{&tp, ib})) tp.grad_buffer(ib) -= g;
  });
}

Var mul(Var a, Var b) {
  check_same_tape(a, b, "mul");
  check_same_shape(a.value(), b.value(), "mul");
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(Var{&tp, ia})) tp.grad_buffer(ia) += g.cwiseProduct(tp.value_of(ib));
    if (tp.needs_grad(Var{&tp, ib})) tp.grad_buffer(ib) += g.cwiseProduct(tp.value_of(ia));
  });
}

Var scale(Var a, double s) {
  const std::size_t ia = a.id;
  return a.tape->record(a.value() * s, {ia}, [ia, s](Tape& tp, std::size_t self) {
    tp.grad_buffer(ia) += tp.grad_of(self) * s;
  });
}

Var exp(Var a) {
  const std::size_t ia = a.id;
  Matrix out = a.value().array().exp().matrix();
  return a.tape->record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    tp.grad_buffer(ia) += tp.grad_of(self).cwiseProduct(tp.value_of(self));
  });
}

Var gelu(Var a) {
  const std::size_t ia = a.id;
  return a.tape->record(kele::gelu(a.value()), {ia}, [ia](Tape& tp, std::size_t self) {
    const Matrix& x = tp.value_of(ia);
    tp.grad_buffer(ia) += tp.grad_of(self).cwiseProduct(x.unaryExpr([](double v) { return gelu_grad(v); }));
  });
}

Var relu(Var a) {
  const std::size_t ia = a.id;
  return a.tape->record(a.value().cwiseMax(0.0), {ia}, [ia](Tape& tp, std::size_t self) {
    const Matrix& x = tp.value_of(ia);
    tp.grad_buffer(ia) += (x.array() > 0.0).select(tp.grad_of(self), 0.0);
  });
}

Var sum(Var a) {
  const std::size_t ia = a.id;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record(std::move(out), {ia}, [ia](Tape& tp, std::size_t self) {
    tp.grad_buffer(ia).array() += tp.grad_of(self)(0, 0);
  });
}

Var dot(Var a, Var b) { return sum(mul(a, b)); }

Var layer_norm_cols(Var x, Var gain, Var bias) {
  check_same_tape(x, gain, "layer_norm_cols");
  check_same_tape(x, bias, "layer_norm_cols");
  const Matrix& xv = x.value();
  const Matrix& g = gain.value();
  const Matrix& b = bias.value();
  const Eigen::Index n = xv.rows();
  if (n < 2) throw ShapeError("layer_norm_cols: need at least 2 features, got " + shape_string(xv.rows(), xv.cols()));
  if (g.rows() != n || g.cols() != 1 || b.rows() != n || b.cols() != 1) {
    throw ShapeError("layer_norm_cols: gain/bias must be " + shape_string(n, 1));
  }
  Matrix xhat(n, xv.cols());
  Eigen::RowVectorXd inv(xv.cols());
  for (Eigen::Index c = 0; c < xv.cols(); ++c) {
    const double mean = xv.col(c).mean();
    xhat.col(c) = xv.col(c).array() - mean;
    const double var = xhat.col(c).squaredNorm() / static_cast<double>(n);
    inv(c) = 1.0 / std::sqrt(var + kLayerNormEps);
    xhat.col(c) *= inv(c);
  }
  Matrix out = (xhat.array().colwise() * g.col(0).array()).colwise() + b.col(0).array();
  const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(std::move(out), {ix, ig, ib},
                        [ix, ig, ib, xhat = std::move(xhat), inv = std::move(inv)](Tape& tp, std::size_t self) {
                          const Matrix& dy = tp.grad_of(self);
                          if (tp.needs_grad(Var{&tp, ig})) tp.grad_buffer(ig) += dy.cwiseProduct(xhat).rowwise().sum();
                          if (tp.needs_grad(Var{&tp, ib})) tp.grad_buffer(ib) += dy.rowwise().sum();
                          if (tp.needs_grad(Var{&tp, ix})) {
                            const Matrix dxhat = dy.array().colwise() * tp.value_of(ig).col(0).array();
                            const Eigen::RowVectorXd m1 = dxhat.colwise().mean();
                            const Eigen::RowVectorXd m2 = dxhat.cwiseProduct(xhat).colwise().mean();
                            Matrix& dx = tp.grad_buffer(ix);
                            for (Eigen::Index c = 0; c < dy.cols(); ++c) {
                              dx.col(c).array() += inv(c) * (dxhat.col(c).array() - m1(c) - xhat.col(c).array() * m2(c));
                            }
                          }
                        });
}

Var log_softmax_cols(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index c = 0; c < xv.cols(); ++c) out.col(c) = log_softmax(xv.col(c));
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Matrix& dy = tp.grad_of(self);
    const Matrix& y = tp.value_of(self);
    const Eigen::RowVectorXd s = dy.colwise().sum();
    tp.grad_buffer(ix) += dy - (y.array().exp().rowwise() * s.array()).matrix();
  });
}

Var softmax_cols(Var x) {
  const Matrix& xv = x.value();
  Matrix out(xv.rows(), xv.cols());
  for (Eigen::Index c = 0; c < xv.cols(); ++c) out.col(c) = softmax(xv.col(c));
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix](Tape& tp, std::size_t self) {
    const Matrix& dy = tp.grad_of(self);
    const Matrix& p = tp.value_of(self);
    const Eigen::RowVectorXd s = p.cwiseProduct(dy).colwise().sum();
    tp.grad_buffer(ix) += p.cwiseProduct((dy.rowwise() - s));
  });
}

Var gather_cols(Var table, std::vector<Eigen::Index> ids) {
  const Matrix& tv = table.value();
  Matrix out(tv.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) {
    if (ids[j] < 0 || ids[j] >= tv.cols()) {
      throw ShapeError("gather_cols: index " + std::to_string(ids[j]) + " outside " + shape_string(tv.rows(), tv.cols()));
    }
    out.col(static_cast<Eigen::Index>(j)) = tv.col(ids[j]);
  }
  const std::size_t it = table.id;
  return table.tape->record(std::move(out), {it}, [it, ids = std::move(ids)](Tape& tp, std::size_t self) {
    const Matrix& dy = tp.grad_of(self);
    Matrix& dt = tp.grad_buffer(it);
    for (std::size_t j = 0; j < ids.size(); ++j) dt.col(ids[j]) += dy.col(static_cast<Eigen::Index>(j));
  });
}

Var select_cols(Var x, std::vector<Eigen::Index> cols) { return gather_cols(x, std::move(cols)); }

Var pick(Var x, Eigen::Index row, Eigen::Index col) {
  const Matrix& xv = x.value();
  if (row < 0 || row >= xv.rows() || col < 0 || col >= xv.cols()) {
    throw ShapeError("pick: (" + std::to_string(row) + "," + std::to_string(col) + ") outside " +
                     shape_string(xv.rows(), xv.cols()));
  }
  Matrix out(1, 1);
  out(0, 0) = xv(row, col);
  const std::size_t ix = x.id;
  return x.tape->record(std::move(out), {ix}, [ix, row, col](Tape& tp, std::size_t self) {
    tp.grad_buffer(ix)(row, col) += tp.grad_of(self)(0, 0);
  });
}

Var add_to_col(Var x, Eigen::Index col, Var h) {
  check_same_tape(x, h, "add_to_col");
  const Matrix& xv = x.value();
  const Matrix& hv = h.value();
  if (col < 0 || col >= xv.cols()) throw ShapeError("add_to_col: column " + std::to_string(col) + " out of range");
  if (hv.rows() != xv.rows() || hv.cols() != 1) {
    throw ShapeError("add_to_col: offset " + shape_string(hv.rows(), hv.cols()) + " vs column height " +
                     std::to_string(xv.rows()));
  }
  Matrix out = xv;
  out.col(col) += hv.col(0);
  const std::size_t ix = x.id, ih = h.id;
  return x.tape->record(std::move(out), {ix, ih}, [ix, ih, col](Tape& tp, std::size_t self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.needs_grad(Var{&tp, ix})) tp.grad_buffer(ix) += g;
    if (tp.needs_grad(Var{&tp, ih})) tp.grad_buffer(ih).col(0) += g.col(col);
  });
}

Var causal_attention(Var q, Var k, Var v, std::vector<Segment> segments, int n_heads) {
  check_same_tape(q, k, "causal_attention");
  check_same_tape(q, v, "causal_attention");
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  check_same_shape(qv, kv, "causal_attention");
  check_same_shape(qv, vv, "causal_attention");
  if (n_heads < 1 || qv.rows() % n_heads != 0) throw ShapeError("causal_attention: width not divisible by heads");
  const Eigen::Index dh = qv.rows() / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix out = Matrix::Zero(qv.rows(), qv.cols());
  std::vector<Matrix> probs;
  probs.reserve(segments.size() * static_cast<std::size_t>(n_heads));
  for (const Segment& seg : segments) {
    if (seg.start < 0 || seg.length < 1 || seg.start + seg.length > qv.cols()) {
      throw ShapeError("causal_attention: segment outside batch");
    }
    const Eigen::Index len = seg.length;
    for (int h = 0; h < n_heads; ++h) {
      const Eigen::Index r0 = h * dh;
      Matrix s(len, len);
      s.noalias() = kv.block(r0, seg.start, dh, len).transpose() * qv.block(r0, seg.start, dh, len);
      s *= inv_sqrt;
      // Column i holds query i; keys j > i are masked.
      for (Eigen::Index i = 0; i < len; ++i) {
        const double top = s.col(i).head(i + 1).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          s(j, i) = std::exp(s(j, i) - top);
          z += s(j, i);
        }
        for (Eigen::Index j = 0; j <= i; ++j) s(j, i) /= z;
        for (Eigen::Index j = i + 1; j < len; ++j) s(j, i) = 0.0;
      }
      out.block(r0, seg.start, dh, len).noalias() = vv.block(r0, seg.start, dh, len) * s;
      probs.push_back(std::move(s));
    }
  }

  const std::size_t iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(
      std::move(out), {iq, ik, iv},
      [iq, ik, iv, dh, inv_sqrt, n_heads, segments = std::move(segments), probs = std::move(probs)](Tape& tp,
                                                                                                      std::size_t self) {
        const Matrix& dout = tp.grad_of(self);
        const Matrix& qv = tp.value_of(iq);
        const Matrix& kv = tp.value_of(ik);
        const Matrix& vv = tp.value_of(iv);
        const bool gq = tp.needs_grad(Var{&tp, iq});
        const bool gk = tp.needs_grad(Var{&tp, ik});
        const bool gv = tp.needs_grad(Var{&tp, iv});
        std::size_t p_index = 0;
        for (const Segment& seg : segments) {
          const Eigen::Index len = seg.length;
          for (int h = 0; h < n_heads; ++h) {
            const Matrix& p = probs[p_index++];
            const Eigen::Index r0 = h * dh;
            const auto d_o = dout.block(r0, seg.start, dh, len);
            if (gv) tp.grad_buffer(iv).block(r0, seg.start, dh, len).noalias() += d_o * p.transpose();
            if (!gq && !gk) continue;
            Matrix dp(len, len);
            dp.noalias() = vv.block(r0, seg.start, dh, len).transpose() * d_o;
            const Eigen::RowVectorXd inner = p.cwiseProduct(dp).colwise().sum();
            Matrix ds = p.cwiseProduct(dp.rowwise() - inner) * inv_sqrt;
            if (gq) tp.grad_buffer(iq).block(r0, seg.start, dh, len).noalias() += kv.block(r0, seg.start, dh, len) * ds;
            if (gk) {
              tp.grad_buffer(ik).block(r0, seg.start, dh, len).noalias() +=
                  qv.block(r0, seg.start, dh, len) * ds.transpose();
            }
          }
        }
      });
}

Var nll_cols(Var logp, std::vector<Eigen::Index> targets) {
  const Matrix& lp = logp.value();
  if (static_cast<Eigen::Index>(targets.size()) != lp.cols() || targets.empty()) {
    throw ShapeError("nll_cols: " + std::to_string(targets.size()) + " targets for " + shape_string(lp.rows(), lp.cols()));
  }
  double total = 0.0;
  for (std::size_t j = 0; j < targets.size(); ++j) {
    if (targets[j] < 0 || targets[j] >= lp.rows()) throw ShapeError("nll_cols: target out of range");
    total -= lp(targets[j], static_cast<Eigen::Index>(j));
  }
  Matrix out(1, 1);
  const double n = static_cast<double>(targets.size());
  out(0, 0) = total / n;
  const std::size_t il = logp.id;
  return logp.tape->record(std::move(out), {il}, [il, n, targets = std::move(targets)](Tape& tp, std::size_t self) {
    const double g = tp.grad_of(self)(0, 0) / n;
    Matrix& d = tp.grad_buffer(il);
    for (std::size_t j = 0; j < targets.size(); ++j) d(targets[j], static_cast<Eigen::Index>(j)) -= g;
  });
}

}  // namespace ad

double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Matrix& x, double step) {
  Matrix analytic;
  {
    Tape tape;
    Var leaf = tape.leaf(x);
    Var loss = f(tape, leaf);
    if (!std::isfinite(loss.scalar())) throw NumericError("finite_diff_check: non-finite value at x");
    tape.backward(loss);
    analytic = tape.grad(leaf);
  }
  auto eval = [&](const Matrix& at) {
    Tape tape;
    Var leaf = tape.leaf(at);
    const double v = f(tape, leaf).scalar();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: non-finite value under perturbation");
    return v;
  };
  double worst = 0.0;
  Matrix probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = probe(i);
    probe(i) = saved + step;
    const double up = eval(probe);
    probe(i) = saved - step;
    const double down = eval(probe);
    probe(i) = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double err = std::abs(analytic(i) - numeric) / std::max(1.0, std::abs(analytic(i)));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace kele
