#include "cdg/runner/adam.hpp"

#include <cmath>

#include "cdg/error.hpp"

namespace cdg::runner {

void Adam::step(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads) {
  if (grads.size() != params.size()) throw ShapeError("adam: gradient count does not match parameter count");
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }
  if (m_.size() != params.size()) throw ShapeError("adam: parameter list changed between steps");
  ++steps_;
  const auto& c = config_;
  const double c1 = 1.0 - std::pow(c.beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(c.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].shape()) {
      throw ShapeError("adam: gradient " + std::to_string(i) + " has shape " + ad::to_string(grads[i].shape()) +
                       ", parameter has " + ad::to_string(params[i].shape()));
    }
    auto p = params[i].data();
    auto g = grads[i].data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      p[j] -= c.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + c.eps);
    }
  }
}

std::vector<ad::Tensor> collect_grads(ad::Tape& tape, const std::vector<ad::Var>& params) {
  std::vector<ad::Tensor> out;
  out.reserve(params.size());
  for (ad::Var v : params) out.push_back(tape.grad(v));
  return out;
}

}  // namespace cdg::runner
