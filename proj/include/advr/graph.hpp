#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "advr/tensor.hpp"

namespace advr {

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  Affine,
  Conv2d,
  Relu,
  Tanh,
  MaxPool2,
  SoftmaxCrossEntropy,
  Add,
  Mul,
  Scale,
  L2Norm,
  Clip,
};

const char* op_name(OpKind kind);

// Output gradient injected into backward(); for a scalar loss the seed is [1].
struct Seed {
  NodeId node;
  Tensor value;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Reverse-mode autodiff tape over a fixed topology.
//
// Nodes are appended in topological order; every builder call checks shapes
// immediately so a malformed network fails at construction, not at run time.
// forward() evaluates every node up to the requested output and caches what
// the backward pass needs; backward() walks the same nodes in reverse exactly
// once. A Graph instance holds mutable caches and must not be shared between
// threads while a forward/backward pair is in flight.
class Graph {
 public:
  // Named placeholder (image, parameter, target). Gradients are only
  // propagated into nodes that transitively depend on a requires_grad input.
  NodeId input(std::string name, Shape shape, bool requires_grad = true);
  NodeId constant(Tensor value);

  // weight [out, in] applied to x flattened to [in]; bias [out].
  NodeId affine(NodeId x, NodeId weight, NodeId bias);
  // x [C,H,W], kernel [O,C,K,K] with odd K, bias [O]; stride 1, zero "same" padding.
  NodeId conv2d(NodeId x, NodeId kernel, NodeId bias);
  NodeId relu(NodeId x);
  NodeId tanh(NodeId x);
  // [C,H,W] -> [C,H/2,W/2]; H and W must be even.
  NodeId max_pool2(NodeId x);
  // -sum_k target_k * log softmax(logits)_k, output shape [1].
  NodeId softmax_cross_entropy(NodeId logits, NodeId target);
  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  // Euclidean norm, output shape [1].
  NodeId l2_norm(NodeId a);
  NodeId clip(NodeId a, double lo, double hi);

  void set_requires_grad(NodeId input, bool requires_grad);

  NodeId find(std::string_view input_name) const;
  const Shape& shape(NodeId node) const;
  OpKind kind(NodeId node) const;
  std::size_t node_count() const { return nodes_.size(); }

  void bind(std::string_view input_name, Tensor value);
  void bind(NodeId input, Tensor value);

  const Tensor& forward(NodeId output);
  const Tensor& forward(NodeId output, const NamedTensors& inputs);
  const Tensor& value(NodeId node) const;

  // Scalar output, seed 1.
  void backward(NodeId output);
  // Vector-Jacobian product with an explicit output seed.
  void backward(NodeId output, const Tensor& seed);
  void backward(std::span<const Seed> seeds);

  const Tensor& grad(NodeId node) const;
  const Tensor& grad(std::string_view input_name) const;

 private:
  struct Node {
    OpKind kind = OpKind::Input;
    std::vector<NodeId> inputs;
    Shape shape;
    std::string name;
    bool requires_grad = false;
    bool bound = false;
    double factor = 1.0;  // Scale
    double lo = 0.0, hi = 0.0;  // Clip
    Tensor value;
    Tensor grad;
    Tensor probs;  // SoftmaxCrossEntropy
    std::vector<std::uint32_t> argmax;  // MaxPool2
  };

  NodeId push(Node node);
  const Node& at(NodeId id, const char* op) const;
  std::string describe(NodeId id) const;
  void evaluate(Node& node);
  void propagate(Node& node);

  std::vector<Node> nodes_;
  // Nodes [0, evaluated_) hold values from the latest forward().
  std::size_t evaluated_ = 0;
  bool has_grads_ = false;
};

}  // namespace advr
