#pragma once

#include <vector>

#include "cdg/autodiff/tape.hpp"

namespace cdg::runner {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam over a fixed list of parameter tensors.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // grads[i] must match params[i] in shape. Moments are sized on the first call.
  void step(std::vector<ad::Tensor>& params, const std::vector<ad::Tensor>& grads);
  long steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<ad::Tensor> m_;
  std::vector<ad::Tensor> v_;
  long steps_ = 0;
};

// Gradients of every var in `params`, zeros where nothing flowed.
std::vector<ad::Tensor> collect_grads(ad::Tape& tape, const std::vector<ad::Var>& params);

}  // namespace cdg::runner
