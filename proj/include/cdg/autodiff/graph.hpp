#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cdg/autodiff/ops.hpp"

namespace cdg::ad {

// A differentiable function re-traced on a fresh tape by every forward call.
class Graph {
 public:
  using Body = std::function<std::vector<Var>(Tape&, std::span<const Var>)>;

  Graph(std::string name, std::vector<Shape> input_shapes, Body body);

  // Evaluates the body. Throws ShapeError when an input does not match the
  // declared shape. Identical inputs give bitwise-identical outputs.
  std::vector<Tensor> forward(std::span<const Tensor> inputs);

  // Gradients of <seed, outputs[output]> with respect to every input.
  // Throws StateError before forward and ShapeError for a mismatched seed.
  std::vector<Tensor> backward(const Tensor& seed, std::size_t output = 0);

  const std::string& name() const { return name_; }

 private:
  std::string name_;
  std::vector<Shape> input_shapes_;
  Body body_;
  std::unique_ptr<Tape> tape_;
  std::vector<Var> inputs_;
  std::vector<Var> outputs_;
};

using ScalarFn = std::function<Var(Tape&, Var)>;

// Analytic gradient of a scalar function at x.
Tensor gradient(const ScalarFn& f, const Tensor& x);

// max_i |g_analytic - g_fd| / max(1, |g_fd|) with central differences of
// step eps. Throws NonFiniteError if f is not finite at x or a probe point.
double grad_check(const ScalarFn& f, const Tensor& x, double eps = 1e-5);

}  // namespace cdg::ad
