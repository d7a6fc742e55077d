#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "advr/graph.hpp"
#include "advr/tensor.hpp"

namespace advr {

struct GeneratorConfig {
  std::size_t hidden_channels = 8;
  std::size_t kernel = 3;
  double linf_bound = 10.0 / 255.0;
  std::uint64_t seed = 1;
};

// Small conv net mapping one fixed uniform-noise pattern to a perturbation of
// image shape: conv -> relu -> conv -> relu -> conv -> tanh, scaled by
// linf_bound, so every output satisfies |delta_i| <= linf_bound. The last
// layer starts at zero, so an untrained generator emits delta = 0.
class Generator {
 public:
  Generator(Shape image_shape, GeneratorConfig config);

  const Shape& image_shape() const { return image_shape_; }
  const GeneratorConfig& config() const { return config_; }
  const Tensor& noise() const { return noise_; }
  std::span<const Tensor> params() const { return params_; }
  std::span<Tensor> params() { return params_; }

 private:
  Shape image_shape_;
  GeneratorConfig config_;
  Tensor noise_;
  std::vector<Tensor> params_;
};

// Graph wrapper for one generator; call rebind() after updating params.
class GeneratorSession {
 public:
  explicit GeneratorSession(const Generator& generator);
  void rebind();
  const Tensor& perturbation();
  // After perturbation(): parameter gradients of <seed, delta>.
  std::vector<Tensor> param_vjp(const Tensor& seed);

 private:
  const Generator* gen_;
  Graph graph_;
  NodeId noise_{}, out_{};
  std::vector<NodeId> params_;
};

}  // namespace advr
