#pragma once

#include <cstddef>
#include <deque>
#include <functional>

#include "cdg/autodiff/tensor.hpp"

namespace cdg::ad {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run reverse-mode tape. Nodes are appended in evaluation order, so
// the node order is a topological order and backward is a single reverse sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out, const Tensor& value_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Appends an op result. `backward` is dropped when no input requires grad.
  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  // Seeds d(root)/d(root) with ones; root must hold a single element.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  bool requires_grad(Var v) const;
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulated at v; zeros when nothing flowed into it.
  const Tensor& grad(Var v);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  void accumulate(std::size_t id, const Tensor& g);
  void accumulate(std::size_t id, Tensor&& g);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  void check_owner(Var v, const char* op) const;

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace cdg::ad
