#pragma once

#include <span>
#include <vector>

#include "advr/tensor.hpp"

namespace advr {

// params[i] <- params[i] - lr * grads[i], elementwise. Throws on lr <= 0 or
// mismatched shapes.
void sgd_step(std::span<Tensor> params, std::span<const Tensor> grads, double lr);

// Adam with bias correction; used for the perturbation generator.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<Tensor> params, std::span<const Tensor> grads);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

}  // namespace advr
