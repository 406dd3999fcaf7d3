#include "cdg/autodiff/tape.hpp"

#include "cdg/error.hpp"

namespace cdg::ad {

const Tensor& Var::value() const {
  if (!tape_) throw StateError("Var::value: unbound variable");
  return tape_->value(id_);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor(), nullptr, requires_grad});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
  if (!requires_grad) backward = nullptr;
  nodes_.push_back(Node{std::move(value), Tensor(), std::move(backward), requires_grad});
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(Var v, const char* op) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw StateError(std::string(op) + ": variable from another tape");
}

bool Tape::requires_grad(Var v) const {
  check_owner(v, "Tape::requires_grad");
  return nodes_[v.id_].requires_grad;
}

void Tape::backward(Var root) {
  check_owner(root, "Tape::backward");
  const Tensor& v = nodes_[root.id_].value;
  if (v.size() != 1) {
    throw ShapeError("Tape::backward: implicit seed needs a single-element output, got " + to_string(v.shape()));
  }
  backward(root, Tensor(v.shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& seed) {
  check_owner(root, "Tape::backward");
  if (backward_done_) throw StateError("Tape::backward: tape already differentiated");
  const Tensor& v = nodes_[root.id_].value;
  if (seed.shape() != v.shape()) {
    throw ShapeError("Tape::backward: seed " + to_string(seed.shape()) + " does not match output " +
                     to_string(v.shape()));
  }
  backward_done_ = true;
  if (!nodes_[root.id_].requires_grad) return;
  accumulate(root.id_, seed);
  for (std::size_t i = root.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, n.grad, n.value);
  }
}

const Tensor& Tape::grad(Var v) {
  check_owner(v, "Tape::grad");
  Node& n = nodes_[v.id_];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

void Tape::accumulate(std::size_t id, const Tensor& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::accumulate(std::size_t id, Tensor&& g) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = std::move(g);
    return;
  }
  auto dst = n.grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace cdg::ad
