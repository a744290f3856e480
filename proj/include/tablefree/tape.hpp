#pragma once

// Reverse-mode differentiation over dense row-major matrices.
//
// Every tensor is stored as a 2-D matrix whose rows flatten the leading axes.
// A [B, T, n] activation is a (B*T) x n matrix; per-head tensors keep heads
// side by side in the columns, so q/k/v for H heads of width h are
// (B*T) x (H*h) with head `g` occupying columns [g*h, (g+1)*h).
//
// A Tape records nodes in execution order. backward() walks them in exact
// reverse order, and gradients of a node accumulate additively across all of
// its consumers.

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tablefree/dense.hpp"
#include "tablefree/error.hpp"

namespace tablefree::kernel {

struct Var {
  std::size_t index = 0;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat& grad_out)>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr); }
  Var parameter(Mat value) { return push(std::move(value), true, nullptr); }

  // Appends an op output. `backward` runs only if some input needs a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (auto v : inputs) needs = needs || nodes_[v.index].requires_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
  }

  const Mat& value(Var v) const { return nodes_[v.index].value; }
  bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }
  bool has_grad(Var v) const { return nodes_[v.index].grad.size() != 0; }

  // Zero-initialized on first access.
  Mat& grad(Var v) {
    auto& node = nodes_[v.index];
    if (node.grad.size() == 0) node.grad = Mat::Zero(node.value.rows(), node.value.cols());
    return node.grad;
  }

  template <typename Expr>
  void accumulate(Var v, const Expr& g) {
    if (!requires_grad(v)) return;
    auto& node = nodes_[v.index];
    if (node.grad.size() == 0) {
      node.grad = g;
    } else {
      node.grad += g;
    }
  }

  // Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
  void backward(Var root) {
    if (value(root).size() != 1) {
      throw Error(Errc::ShapeMismatch, "backward root must be a scalar");
    }
    grad(root).setOnes();
    for (std::size_t i = root.index + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.backward && node.grad.size() != 0) node.backward(*this, node.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Mat value, bool requires_grad, Backward backward) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(backward)});
    return Var{nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
};

// Layout of per-head sequence tensors: rows are batch-major (b * time + t).
struct SequenceShape {
  Index batch = 1;
  Index time = 1;
  Index heads = 1;
};

namespace detail {

inline void require(bool ok, Errc code, const std::string& what) {
  if (!ok) throw Error(code, what);
}

inline std::string dims(Index r, Index c) {
  return "[" + std::to_string(r) + ", " + std::to_string(c) + "]";
}

}  // namespace detail

template <typename Scalar>
Var add(Tape<Scalar>& tape, Var a, Var b) {
  const auto& x = tape.value(a);
  const auto& y = tape.value(b);
  detail::require(x.rows() == y.rows() && x.cols() == y.cols(), Errc::ShapeMismatch,
                  "add " + detail::dims(x.rows(), x.cols()) + " + " +
                      detail::dims(y.rows(), y.cols()));
  Matrix<Scalar> out = x + y;
  return tape.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

// y = x w + bias, x: [N, n], w: [n, m], bias: [1, m].
template <typename Scalar>
Var linear(Tape<Scalar>& tape, Var x, Var w, std::optional<Var> bias = std::nullopt) {
  const auto& xv = tape.value(x);
  const auto& wv = tape.value(w);
  detail::require(xv.cols() == wv.rows(), Errc::ShapeMismatch,
                  "linear " + detail::dims(xv.rows(), xv.cols()) + " x " +
                      detail::dims(wv.rows(), wv.cols()));
  Matrix<Scalar> out(xv.rows(), wv.cols());
  out.noalias() = xv * wv;
  if (bias) {
    const auto& bv = tape.value(*bias);
    detail::require(bv.rows() == 1 && bv.cols() == wv.cols(), Errc::ShapeMismatch,
                    "linear bias " + detail::dims(bv.rows(), bv.cols()));
    out.rowwise() += bv.row(0);
  }
  auto backward = [x, w, bias](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(x)) t.grad(x).noalias() += g * t.value(w).transpose();
    if (t.requires_grad(w)) t.grad(w).noalias() += t.value(x).transpose() * g;
    if (bias && t.requires_grad(*bias)) t.grad(*bias) += g.colwise().sum();
  };
  if (bias) return tape.record(std::move(out), {x, w, *bias}, std::move(backward));
  return tape.record(std::move(out), {x, w}, std::move(backward));
}

template <typename Scalar>
Scalar gelu_value(Scalar x) {
  return x * (Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(std::numbers::sqrt2 / 2))));
}

// d/dx [x Phi(x)] = Phi(x) + x phi(x).
template <typename Scalar>
Scalar gelu_derivative(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(std::numbers::sqrt2 / 2)));
  const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.5 * std::numbers::inv_sqrtpi *
                                                             std::numbers::sqrt2);
  return cdf + x * pdf;
}

// Exact erf-based GELU, elementwise. The derivative is evaluated alongside
// the forward value so erf runs once per element.
template <typename Scalar>
Var gelu(Tape<Scalar>& tape, Var x) {
  const auto& xv = tape.value(x);
  Matrix<Scalar> out(xv.rows(), xv.cols());
  if (!tape.requires_grad(x)) {
    out = xv.unaryExpr([](Scalar v) { return gelu_value(v); });
    return tape.constant(std::move(out));
  }
  Matrix<Scalar> slope(xv.rows(), xv.cols());
  const Scalar pdf_scale = Scalar(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  for (Index i = 0; i < xv.size(); ++i) {
    const Scalar v = xv.data()[i];
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * Scalar(std::numbers::sqrt2 / 2)));
    out.data()[i] = v * cdf;
    slope.data()[i] = cdf + v * std::exp(Scalar(-0.5) * v * v) * pdf_scale;
  }
  return tape.record(std::move(out), {x},
                     [x, slope = std::move(slope)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                       t.accumulate(x, g.cwiseProduct(slope));
                     });
}

// Standardizes each row over its n columns, then applies gain and shift.
template <typename Scalar>
Var layer_norm(Tape<Scalar>& tape, Var x, Var gain, Var shift, Scalar eps) {
  const auto& xv = tape.value(x);
  const Index n = xv.cols();
  detail::require(n >= 1, Errc::ShapeMismatch, "layer_norm over empty rows");
  detail::require(tape.value(gain).cols() == n && tape.value(shift).cols() == n &&
                      tape.value(gain).rows() == 1 && tape.value(shift).rows() == 1,
                  Errc::ShapeMismatch, "layer_norm gain/shift width");
  Matrix<Scalar> normalized(xv.rows(), n);
  Vector<Scalar> rstd(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const Scalar mean = xv.row(r).sum() / Scalar(n);
    const Scalar var = (xv.row(r).array() - mean).square().sum() / Scalar(n);
    rstd[r] = Scalar(1) / std::sqrt(var + eps);
    normalized.row(r) = (xv.row(r).array() - mean) * rstd[r];
  }
  Matrix<Scalar> out = normalized;
  out.array().rowwise() *= tape.value(gain).row(0).array();
  out.rowwise() += tape.value(shift).row(0);
  return tape.record(
      std::move(out), {x, gain, shift},
      [x, gain, shift, normalized = std::move(normalized), rstd = std::move(rstd)](
          Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(gain)) t.grad(gain) += g.cwiseProduct(normalized).colwise().sum();
        if (t.requires_grad(shift)) t.grad(shift) += g.colwise().sum();
        if (!t.requires_grad(x)) return;
        const Index n = g.cols();
        Matrix<Scalar> dnorm = g;
        dnorm.array().rowwise() *= t.value(gain).row(0).array();
        auto& gx = t.grad(x);
        for (Index r = 0; r < g.rows(); ++r) {
          const Scalar mean_d = dnorm.row(r).sum() / Scalar(n);
          const Scalar mean_dx = dnorm.row(r).dot(normalized.row(r)) / Scalar(n);
          gx.row(r).array() +=
              rstd[r] * (dnorm.row(r).array() - mean_d - normalized.row(r).array() * mean_dx);
        }
      });
}

// cos/sin of pos * base^(-2i/h) for pos < time, i < h/2; [time, h/2] each.
template <typename Scalar>
std::pair<Matrix<Scalar>, Matrix<Scalar>> rope_tables(Index time, Index head_dim, double base) {
  const Index half = head_dim / 2;
  Matrix<Scalar> cos_t(time, half), sin_t(time, half);
  for (Index pos = 0; pos < time; ++pos) {
    for (Index i = 0; i < half; ++i) {
      const double angle =
          static_cast<double>(pos) * std::pow(base, -2.0 * static_cast<double>(i) /
                                                        static_cast<double>(head_dim));
      cos_t(pos, i) = static_cast<Scalar>(std::cos(angle));
      sin_t(pos, i) = static_cast<Scalar>(std::sin(angle));
    }
  }
  return {std::move(cos_t), std::move(sin_t)};
}

namespace detail {

// Rotates pairs (2i, 2i+1) of every head by +angle (sign = 1) or -angle.
template <typename Scalar>
void rotate_pairs(const Matrix<Scalar>& in, Matrix<Scalar>& out, const SequenceShape& shape,
                  const Matrix<Scalar>& cos_t, const Matrix<Scalar>& sin_t, Scalar sign) {
  const Index head_dim = in.cols() / shape.heads;
  const Index half = head_dim / 2;
  for (Index r = 0; r < in.rows(); ++r) {
    const Index pos = r % shape.time;
    for (Index h = 0; h < shape.heads; ++h) {
      const Index base_col = h * head_dim;
      for (Index i = 0; i < half; ++i) {
        const Scalar c = cos_t(pos, i);
        const Scalar s = sign * sin_t(pos, i);
        const Scalar x0 = in(r, base_col + 2 * i);
        const Scalar x1 = in(r, base_col + 2 * i + 1);
        out(r, base_col + 2 * i) = x0 * c - x1 * s;
        out(r, base_col + 2 * i + 1) = x0 * s + x1 * c;
      }
    }
  }
}

inline void check_sequence(Index rows, Index cols, const SequenceShape& shape) {
  require(shape.batch > 0 && shape.time > 0 && shape.heads > 0, Errc::ShapeMismatch,
          "sequence shape extents must be positive");
  require(rows == shape.batch * shape.time, Errc::ShapeMismatch,
          "rows " + std::to_string(rows) + " != batch * time");
  require(cols % shape.heads == 0, Errc::ShapeMismatch, "columns not divisible by heads");
}

}  // namespace detail

// Rotary position encoding; position of row r is r mod time.
template <typename Scalar>
Var rope_rotate(Tape<Scalar>& tape, Var x, const SequenceShape& shape, double base = 10000.0) {
  const auto& xv = tape.value(x);
  detail::check_sequence(xv.rows(), xv.cols(), shape);
  const Index head_dim = xv.cols() / shape.heads;
  detail::require(head_dim % 2 == 0, Errc::OddHeadDim,
                  "head dimension " + std::to_string(head_dim) + " is odd");
  auto [cos_t, sin_t] = rope_tables<Scalar>(shape.time, head_dim, base);
  Matrix<Scalar> out(xv.rows(), xv.cols());
  detail::rotate_pairs(xv, out, shape, cos_t, sin_t, Scalar(1));
  return tape.record(std::move(out), {x},
                     [x, shape, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](
                         Tape<Scalar>& t, const Matrix<Scalar>& g) {
                       Matrix<Scalar> back(g.rows(), g.cols());
                       detail::rotate_pairs(g, back, shape, cos_t, sin_t, Scalar(-1));
                       t.accumulate(x, back);
                     });
}

// Row-softmax of (q k^T) / sqrt(h) for one (batch, head), with entries above
// the diagonal forced to exactly zero. Returns [time, time].
template <typename Scalar>
Matrix<Scalar> causal_attention_weights(const Matrix<Scalar>& q, const Matrix<Scalar>& k,
                                        const SequenceShape& shape, Index b, Index head) {
  const Index T = shape.time;
  const Index h = q.cols() / shape.heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(h));
  Matrix<Scalar> p(T, T);
  p.noalias() = q.block(b * T, head * h, T, h) * k.block(b * T, head * h, T, h).transpose();
  for (Index i = 0; i < T; ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Index j = 0; j <= i; ++j) {
      p(i, j) *= scale;
      mx = std::max(mx, p(i, j));
    }
    Scalar sum = 0;
    for (Index j = 0; j <= i; ++j) {
      p(i, j) = std::exp(p(i, j) - mx);
      sum += p(i, j);
    }
    const Scalar inv = Scalar(1) / sum;
    for (Index j = 0; j <= i; ++j) p(i, j) *= inv;
    for (Index j = i + 1; j < T; ++j) p(i, j) = 0;
  }
  return p;
}

// softmax(q k^T / sqrt(h) + causal mask) v, independently per batch and head.
template <typename Scalar>
Var causal_attention(Tape<Scalar>& tape, Var q, Var k, Var v, const SequenceShape& shape) {
  const auto& qv = tape.value(q);
  const auto& kv = tape.value(k);
  const auto& vv = tape.value(v);
  detail::check_sequence(qv.rows(), qv.cols(), shape);
  detail::require(kv.rows() == qv.rows() && kv.cols() == qv.cols() && vv.rows() == qv.rows() &&
                      vv.cols() == qv.cols(),
                  Errc::ShapeMismatch, "q, k, v shapes differ");
  const Index T = shape.time;
  const Index h = qv.cols() / shape.heads;
  std::vector<Matrix<Scalar>> weights;
  weights.reserve(static_cast<std::size_t>(shape.batch * shape.heads));
  Matrix<Scalar> out(qv.rows(), qv.cols());
  for (Index b = 0; b < shape.batch; ++b) {
    for (Index head = 0; head < shape.heads; ++head) {
      weights.push_back(causal_attention_weights(qv, kv, shape, b, head));
      out.block(b * T, head * h, T, h).noalias() =
          weights.back() * vv.block(b * T, head * h, T, h);
    }
  }
  return tape.record(
      std::move(out), {q, k, v},
      [q, k, v, shape, weights = std::move(weights)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        const Index T = shape.time;
        const Index h = g.cols() / shape.heads;
        const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(h));
        const auto& qv = t.value(q);
        const auto& kv = t.value(k);
        const auto& vv = t.value(v);
        const bool need_q = t.requires_grad(q);
        const bool need_k = t.requires_grad(k);
        const bool need_v = t.requires_grad(v);
        Matrix<Scalar> dp(T, T);
        for (Index b = 0; b < shape.batch; ++b) {
          for (Index head = 0; head < shape.heads; ++head) {
            const auto& p = weights[static_cast<std::size_t>(b * shape.heads + head)];
            const auto go = g.block(b * T, head * h, T, h);
            if (need_v) t.grad(v).block(b * T, head * h, T, h).noalias() += p.transpose() * go;
            if (!need_q && !need_k) continue;
            dp.noalias() = go * vv.block(b * T, head * h, T, h).transpose();
            // Softmax backward: ds = p * (dp - rowsum(dp * p)).
            for (Index i = 0; i < T; ++i) {
              Scalar dot = 0;
              for (Index j = 0; j <= i; ++j) dot += dp(i, j) * p(i, j);
              for (Index j = 0; j <= i; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
              for (Index j = i + 1; j < T; ++j) dp(i, j) = 0;
            }
            if (need_q) {
              t.grad(q).block(b * T, head * h, T, h).noalias() +=
                  dp * kv.block(b * T, head * h, T, h);
            }
            if (need_k) {
              t.grad(k).block(b * T, head * h, T, h).noalias() +=
                  dp.transpose() * qv.block(b * T, head * h, T, h);
            }
          }
        }
      });
}

// Mean over rows of -log softmax(logits)[target]; returns a 1x1 node.
template <typename Scalar, typename Target>
Var softmax_cross_entropy(Tape<Scalar>& tape, Var logits, std::span<const Target> targets) {
  const auto& z = tape.value(logits);
  detail::require(static_cast<Index>(targets.size()) == z.rows(), Errc::ShapeMismatch,
                  "targets length " + std::to_string(targets.size()) + " vs rows " +
                      std::to_string(z.rows()));
  const Index classes = z.cols();
  Matrix<Scalar> probs(z.rows(), classes);
  double total = 0.0;
  for (Index r = 0; r < z.rows(); ++r) {
    const auto target = static_cast<Index>(targets[static_cast<std::size_t>(r)]);
    detail::require(target >= 0 && target < classes, Errc::TargetOutOfRange,
                    "target " + std::to_string(target) + " outside [0, " +
                        std::to_string(classes) + ")");
    const Scalar mx = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - mx).exp();
    const Scalar sum = probs.row(r).sum();
    probs.row(r) /= sum;
    total += static_cast<double>(std::log(sum) + mx - z(r, target));
  }
  Matrix<Scalar> out(1, 1);
  out(0, 0) = static_cast<Scalar>(total / static_cast<double>(z.rows()));
  std::vector<Index> ids(targets.begin(), targets.end());
  return tape.record(std::move(out), {logits},
                     [logits, probs = std::move(probs), ids = std::move(ids)](
                         Tape<Scalar>& t, const Matrix<Scalar>& g) {
                       const Scalar s = g(0, 0) / static_cast<Scalar>(probs.rows());
                       auto& gz = t.grad(logits);
                       gz += probs * s;
                       for (Index r = 0; r < probs.rows(); ++r) {
                         gz(r, ids[static_cast<std::size_t>(r)]) -= s;
                       }
                     });
}

// Row gather: out[r] = table[ids[r]]; backward scatters into the table.
template <typename Scalar, typename Id>
Var embedding(Tape<Scalar>& tape, Var table, std::span<const Id> ids) {
  const auto& tv = tape.value(table);
  Matrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const auto id = static_cast<Index>(ids[r]);
    detail::require(id >= 0 && id < tv.rows(), Errc::TokenOutOfRange,
                    "token " + std::to_string(id) + " outside table");
    out.row(static_cast<Index>(r)) = tv.row(id);
  }
  std::vector<Index> rows(ids.begin(), ids.end());
  return tape.record(std::move(out), {table},
                     [table, rows = std::move(rows)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                       auto& gt = t.grad(table);
                       for (std::size_t r = 0; r < rows.size(); ++r) {
                         gt.row(rows[r]) += g.row(static_cast<Index>(r));
                       }
                     });
}

}  // namespace tablefree::kernel
