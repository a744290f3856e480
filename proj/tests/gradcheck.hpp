#pragma once

// Finite-difference checks for tape primitives in double precision.
//
// An op under test maps a list of input matrices to one output node. The
// output is reduced to a scalar by a fixed random weighting, so every output
// entry contributes a distinct coefficient to the gradient.

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "tablefree/random.hpp"
#include "tablefree/tape.hpp"

namespace gradcheck {

using tablefree::Index;
using tablefree::kernel::Tape;
using tablefree::kernel::Var;
using Mat = tablefree::Matrix<double>;
using Op = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

inline Mat random_matrix(tablefree::Rng& rng, Index rows, Index cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

// sum(out .* weights) as a 1x1 node.
inline Var weighted_sum(Tape<double>& tape, Var out, const Mat& weights) {
  Mat value(1, 1);
  value(0, 0) = tape.value(out).cwiseProduct(weights).sum();
  return tape.record(std::move(value), {out}, [out, weights](Tape<double>& t, const Mat& g) {
    t.accumulate(out, weights * g(0, 0));
  });
}

inline double evaluate(const Op& op, const std::vector<Mat>& inputs, const Mat* weights) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.constant(m));
  const Var out = op(tape, vars);
  if (weights == nullptr) return tape.value(out)(0, 0);
  return tape.value(out).cwiseProduct(*weights).sum();
}

struct Result {
  double max_relative_error = 0.0;
  std::vector<double> per_input;
};

// Compares reverse-mode gradients of every input listed in `check` against
// central differences with the given step. A scalar-valued op (1x1 output)
// is differentiated directly; anything else through a random weighting.
inline Result check(const Op& op, std::vector<Mat> inputs, const std::vector<std::size_t>& check,
                    tablefree::Rng& rng, double step = 1e-4) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.parameter(m));
  const Var out = op(tape, vars);
  const bool scalar = tape.value(out).size() == 1;
  Mat weights;
  Var root = out;
  if (!scalar) {
    weights = random_matrix(rng, tape.value(out).rows(), tape.value(out).cols());
    root = weighted_sum(tape, out, weights);
  }
  tape.backward(root);

  Result result;
  for (std::size_t idx : check) {
    const Mat analytic = tape.has_grad(vars[idx])
                             ? tape.grad(vars[idx])
                             : Mat::Zero(inputs[idx].rows(), inputs[idx].cols());
    const Mat numeric = oracle::finite_difference<double>(
        inputs[idx],
        [&](const Mat& x) {
          auto trial = inputs;
          trial[idx] = x;
          return evaluate(op, trial, scalar ? nullptr : &weights);
        },
        step);
    const double err = oracle::relative_error(analytic, numeric);
    result.per_input.push_back(err);
    result.max_relative_error = std::max(result.max_relative_error, err);
  }
  return result;
}

// One randomized trial per primitive. Shapes are drawn small so that the
// finite differences stay cheap.
struct Primitive {
  std::string name;
  std::function<Result(tablefree::Rng&)> trial;
};

inline std::vector<Primitive> primitives() {
  namespace k = tablefree::kernel;
  std::vector<Primitive> out;

  out.push_back({"add", [](tablefree::Rng& rng) {
                   const Index r = 1 + rng.below(4), c = 1 + rng.below(5);
                   return check([](Tape<double>& t, const std::vector<Var>& v) {
                     return k::add(t, v[0], v[1]);
                   },
                                {random_matrix(rng, r, c), random_matrix(rng, r, c)}, {0, 1}, rng);
                 }});

  out.push_back({"linear", [](tablefree::Rng& rng) {
                   const Index n = 1 + rng.below(4), a = 1 + rng.below(5), b = 1 + rng.below(5);
                   return check([](Tape<double>& t, const std::vector<Var>& v) {
                     return k::linear(t, v[0], v[1], v[2]);
                   },
                                {random_matrix(rng, n, a), random_matrix(rng, a, b),
                                 random_matrix(rng, 1, b)},
                                {0, 1, 2}, rng);
                 }});

  out.push_back({"gelu", [](tablefree::Rng& rng) {
                   const Index r = 1 + rng.below(4), c = 1 + rng.below(6);
                   return check([](Tape<double>& t, const std::vector<Var>& v) {
                     return k::gelu(t, v[0]);
                   },
                                {random_matrix(rng, r, c, 2.0)}, {0}, rng);
                 }});

  out.push_back({"layer_norm", [](tablefree::Rng& rng) {
                   const Index r = 1 + rng.below(4), c = 2 + rng.below(6);
                   return check([](Tape<double>& t, const std::vector<Var>& v) {
                     return k::layer_norm(t, v[0], v[1], v[2], 1e-5);
                   },
                                {random_matrix(rng, r, c), random_matrix(rng, 1, c),
                                 random_matrix(rng, 1, c)},
                                {0, 1, 2}, rng);
                 }});

  out.push_back({"rope_rotate", [](tablefree::Rng& rng) {
                   const k::SequenceShape shape{static_cast<Index>(1 + rng.below(2)),
                                                static_cast<Index>(1 + rng.below(5)),
                                                static_cast<Index>(1 + rng.below(3))};
                   const Index h = 2 * (1 + rng.below(3));
                   return check([shape](Tape<double>& t, const std::vector<Var>& v) {
                     return k::rope_rotate(t, v[0], shape, 10000.0);
                   },
                                {random_matrix(rng, shape.batch * shape.time, shape.heads * h)},
                                {0}, rng);
                 }});

  out.push_back({"causal_attention", [](tablefree::Rng& rng) {
                   const k::SequenceShape shape{static_cast<Index>(1 + rng.below(2)),
                                                static_cast<Index>(1 + rng.below(4)),
                                                static_cast<Index>(1 + rng.below(2))};
                   const Index h = 1 + rng.below(4);
                   const Index rows = shape.batch * shape.time, cols = shape.heads * h;
                   return check([shape](Tape<double>& t, const std::vector<Var>& v) {
                     return k::causal_attention(t, v[0], v[1], v[2], shape);
                   },
                                {random_matrix(rng, rows, cols), random_matrix(rng, rows, cols),
                                 random_matrix(rng, rows, cols)},
                                {0, 1, 2}, rng);
                 }});

  out.push_back({"softmax_cross_entropy", [](tablefree::Rng& rng) {
                   const Index r = 1 + rng.below(5), c = 2 + rng.below(6);
                   std::vector<int> targets;
                   for (Index i = 0; i < r; ++i) targets.push_back(static_cast<int>(rng.below(c)));
                   return check([targets](Tape<double>& t, const std::vector<Var>& v) {
                     return k::softmax_cross_entropy<double, int>(t, v[0], targets);
                   },
                                {random_matrix(rng, r, c, 2.0)}, {0}, rng);
                 }});

  out.push_back({"embedding", [](tablefree::Rng& rng) {
                   const Index vocab = 2 + rng.below(5), d = 1 + rng.below(4);
                   std::vector<int> ids;
                   const Index n = 1 + rng.below(6);
                   for (Index i = 0; i < n; ++i) ids.push_back(static_cast<int>(rng.below(vocab)));
                   return check([ids](Tape<double>& t, const std::vector<Var>& v) {
                     return k::embedding<double, int>(t, v[0], ids);
                   },
                                {random_matrix(rng, vocab, d)}, {0}, rng);
                 }});

  return out;
}

}  // namespace gradcheck
