#include "cdg/autodiff/graph.hpp"

#include <algorithm>
#include <cmath>

#include "cdg/error.hpp"

namespace cdg::ad {

Graph::Graph(std::string name, std::vector<Shape> input_shapes, Body body)
    : name_(std::move(name)), input_shapes_(std::move(input_shapes)), body_(std::move(body)) {}

std::vector<Tensor> Graph::forward(std::span<const Tensor> inputs) {
  if (inputs.size() != input_shapes_.size()) {
    throw ShapeError(name_ + ": expected " + std::to_string(input_shapes_.size()) + " inputs, got " +
                     std::to_string(inputs.size()));
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i].shape() != input_shapes_[i]) {
      throw ShapeError(name_ + ": input " + std::to_string(i) + " has shape " + to_string(inputs[i].shape()) +
                       ", declared " + to_string(input_shapes_[i]));
    }
  }
  tape_ = std::make_unique<Tape>();
  inputs_.clear();
  for (const auto& x : inputs) inputs_.push_back(tape_->leaf(x, true));
  outputs_ = body_(*tape_, inputs_);
  std::vector<Tensor> out;
  out.reserve(outputs_.size());
  for (Var v : outputs_) out.push_back(v.value());
  return out;
}

std::vector<Tensor> Graph::backward(const Tensor& seed, std::size_t output) {
  if (!tape_) throw StateError(name_ + ": backward called before forward");
  if (tape_->backward_done()) throw StateError(name_ + ": backward already run for this forward pass");
  if (output >= outputs_.size()) {
    throw ShapeError(name_ + ": output index " + std::to_string(output) + " out of range");
  }
  tape_->backward(outputs_[output], seed);
  std::vector<Tensor> grads;
  grads.reserve(inputs_.size());
  for (Var v : inputs_) grads.push_back(tape_->grad(v));
  return grads;
}

namespace {

double eval_scalar(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var out = f(tape, tape.leaf(x, false));
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NonFiniteError("grad_check", "grad_check: function is not finite at probe point");
  return v;
}

}  // namespace

Tensor gradient(const ScalarFn& f, const Tensor& x) {
  Tape tape;
  Var in = tape.leaf(x, true);
  Var out = f(tape, in);
  if (!out.value().all_finite()) throw NonFiniteError("gradient", "gradient: function value is not finite");
  tape.backward(out);
  return tape.grad(in);
}

double grad_check(const ScalarFn& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
  const Tensor analytic = gradient(f, x);
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = eval_scalar(f, probe);
    probe[i] = orig - eps;
    const double down = eval_scalar(f, probe);
    probe[i] = orig;
    const double fd = (up - down) / (2.0 * eps);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

}  // namespace cdg::ad
