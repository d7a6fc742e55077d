#include "advr/generator.hpp"

#include <cmath>
#include <random>

#include "advr/errors.hpp"

namespace advr {

Generator::Generator(Shape image_shape, GeneratorConfig config)
    : image_shape_(std::move(image_shape)), config_(config) {
  if (image_shape_.size() != 3 || shape_size(image_shape_) == 0) {
    throw ShapeError("generator: image shape must be [C,H,W], got " + shape_str(image_shape_));
  }
  if (!(config_.linf_bound > 0.0)) throw InvalidArgument("generator: linf_bound must be positive");
  if (config_.kernel % 2 == 0 || config_.hidden_channels == 0) {
    throw InvalidArgument("generator: kernel must be odd and hidden channels positive");
  }
  std::mt19937_64 rng(config_.seed);
  noise_ = Tensor(image_shape_);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (double& v : noise_.data()) v = uniform(rng);

  const std::size_t c = image_shape_[0], h = config_.hidden_channels, k = config_.kernel;
  const auto init = [&](Shape shape, std::size_t fan_in) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
    for (double& v : t.data()) v = dist(rng);
    return t;
  };
  params_.push_back(init({h, c, k, k}, c * k * k));
  params_.push_back(Tensor({h}));
  params_.push_back(init({h, h, k, k}, h * k * k));
  params_.push_back(Tensor({h}));
  params_.push_back(Tensor({c, h, k, k}));
  params_.push_back(Tensor({c}));
}

GeneratorSession::GeneratorSession(const Generator& generator) : gen_(&generator) {
  noise_ = graph_.input("z", generator.image_shape(), false);
  for (std::size_t i = 0; i < generator.params().size(); ++i) {
    params_.push_back(graph_.input("g" + std::to_string(i), generator.params()[i].shape()));
  }
  NodeId h = graph_.relu(graph_.conv2d(noise_, params_[0], params_[1]));
  h = graph_.relu(graph_.conv2d(h, params_[2], params_[3]));
  h = graph_.tanh(graph_.conv2d(h, params_[4], params_[5]));
  out_ = graph_.scale(h, generator.config().linf_bound);
  graph_.bind(noise_, generator.noise());
  rebind();
}

void GeneratorSession::rebind() {
  for (std::size_t i = 0; i < params_.size(); ++i) graph_.bind(params_[i], gen_->params()[i]);
}

const Tensor& GeneratorSession::perturbation() { return graph_.forward(out_); }

std::vector<Tensor> GeneratorSession::param_vjp(const Tensor& seed) {
  graph_.backward(out_, seed);
  std::vector<Tensor> grads;
  for (NodeId p : params_) grads.push_back(graph_.grad(p));
  return grads;
}

}  // namespace advr
