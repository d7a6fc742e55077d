#include "advr/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "advr/errors.hpp"

namespace advr {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Input: return "input";
    case OpKind::Constant: return "constant";
    case OpKind::Affine: return "affine";
    case OpKind::Conv2d: return "conv2d";
    case OpKind::Relu: return "relu";
    case OpKind::Tanh: return "tanh";
    case OpKind::MaxPool2: return "max_pool2";
    case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::L2Norm: return "l2_norm";
    case OpKind::Clip: return "clip";
  }
  return "?";
}

NodeId Graph::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw StateError("graph: too many nodes");
  }
  for (NodeId in : node.inputs) {
    if (nodes_[in.index].requires_grad) node.requires_grad = true;
  }
  nodes_.push_back(std::move(node));
  evaluated_ = 0;
  has_grads_ = false;
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::at(NodeId id, const char* op) const {
  if (id.index >= nodes_.size()) {
    throw ShapeError(std::string(op) + ": unknown node " + std::to_string(id.index));
  }
  return nodes_[id.index];
}

std::string Graph::describe(NodeId id) const {
  const Node& n = nodes_[id.index];
  std::string s = "node " + std::to_string(id.index) + " (" + op_name(n.kind);
  if (!n.name.empty()) s += " '" + n.name + "'";
  return s + " " + shape_str(n.shape) + ")";
}

NodeId Graph::input(std::string name, Shape shape, bool requires_grad) {
  if (name.empty()) throw InvalidArgument("graph input needs a name");
  for (const Node& n : nodes_) {
    if (n.kind == OpKind::Input && n.name == name) {
      throw InvalidArgument("graph input '" + name + "' declared twice");
    }
  }
  Node node;
  node.kind = OpKind::Input;
  node.name = std::move(name);
  node.shape = std::move(shape);
  node.requires_grad = requires_grad;
  return push(std::move(node));
}

NodeId Graph::constant(Tensor value) {
  Node node;
  node.kind = OpKind::Constant;
  node.shape = value.shape();
  node.value = std::move(value);
  node.bound = true;
  return push(std::move(node));
}

NodeId Graph::affine(NodeId x, NodeId weight, NodeId bias) {
  const Shape& xs = at(x, "affine").shape;
  const Shape& ws = at(weight, "affine").shape;
  const Shape& bs = at(bias, "affine").shape;
  if (ws.size() != 2 || ws[1] != shape_size(xs) || bs.size() != 1 || bs[0] != ws[0]) {
    throw ShapeError("affine: input " + describe(x) + ", weight " + describe(weight) + ", bias " +
                     describe(bias) + " are inconsistent");
  }
  Node node;
  node.kind = OpKind::Affine;
  node.inputs = {x, weight, bias};
  node.shape = {ws[0]};
  return push(std::move(node));
}

NodeId Graph::conv2d(NodeId x, NodeId kernel, NodeId bias) {
  const Shape& xs = at(x, "conv2d").shape;
  const Shape& ks = at(kernel, "conv2d").shape;
  const Shape& bs = at(bias, "conv2d").shape;
  if (xs.size() != 3 || ks.size() != 4 || ks[1] != xs[0] || ks[2] != ks[3] || ks[2] % 2 == 0 ||
      bs.size() != 1 || bs[0] != ks[0]) {
    throw ShapeError("conv2d: input " + describe(x) + ", kernel " + describe(kernel) + ", bias " +
                     describe(bias) + " are inconsistent");
  }
  Node node;
  node.kind = OpKind::Conv2d;
  node.inputs = {x, kernel, bias};
  node.shape = {ks[0], xs[1], xs[2]};
  return push(std::move(node));
}

NodeId Graph::relu(NodeId x) {
  Node node;
  node.kind = OpKind::Relu;
  node.shape = at(x, "relu").shape;
  node.inputs = {x};
  return push(std::move(node));
}

NodeId Graph::tanh(NodeId x) {
  Node node;
  node.kind = OpKind::Tanh;
  node.shape = at(x, "tanh").shape;
  node.inputs = {x};
  return push(std::move(node));
}

NodeId Graph::max_pool2(NodeId x) {
  const Shape& xs = at(x, "max_pool2").shape;
  if (xs.size() != 3 || xs[1] % 2 != 0 || xs[2] % 2 != 0 || xs[1] == 0 || xs[2] == 0) {
    throw ShapeError("max_pool2: input " + describe(x) + " must be [C,H,W] with even H, W");
  }
  Node node;
  node.kind = OpKind::MaxPool2;
  node.shape = {xs[0], xs[1] / 2, xs[2] / 2};
  node.inputs = {x};
  return push(std::move(node));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, NodeId target) {
  const Shape& ls = at(logits, "softmax_cross_entropy").shape;
  const Shape& ts = at(target, "softmax_cross_entropy").shape;
  if (ls.size() != 1 || ls != ts || ls[0] == 0) {
    throw ShapeError("softmax_cross_entropy: logits " + describe(logits) + " and target " +
                     describe(target) + " must be equal-length vectors");
  }
  Node node;
  node.kind = OpKind::SoftmaxCrossEntropy;
  node.shape = {1};
  node.inputs = {logits, target};
  return push(std::move(node));
}

NodeId Graph::add(NodeId a, NodeId b) {
  if (at(a, "add").shape != at(b, "add").shape) {
    throw ShapeError("add: " + describe(a) + " vs " + describe(b));
  }
  Node node;
  node.kind = OpKind::Add;
  node.shape = nodes_[a.index].shape;
  node.inputs = {a, b};
  return push(std::move(node));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  if (at(a, "mul").shape != at(b, "mul").shape) {
    throw ShapeError("mul: " + describe(a) + " vs " + describe(b));
  }
  Node node;
  node.kind = OpKind::Mul;
  node.shape = nodes_[a.index].shape;
  node.inputs = {a, b};
  return push(std::move(node));
}

NodeId Graph::scale(NodeId a, double factor) {
  Node node;
  node.kind = OpKind::Scale;
  node.shape = at(a, "scale").shape;
  node.inputs = {a};
  node.factor = factor;
  return push(std::move(node));
}

NodeId Graph::l2_norm(NodeId a) {
  at(a, "l2_norm");
  Node node;
  node.kind = OpKind::L2Norm;
  node.shape = {1};
  node.inputs = {a};
  return push(std::move(node));
}

NodeId Graph::clip(NodeId a, double lo, double hi) {
  if (!(lo <= hi)) throw InvalidArgument("clip: lo must not exceed hi");
  Node node;
  node.kind = OpKind::Clip;
  node.shape = at(a, "clip").shape;
  node.inputs = {a};
  node.lo = lo;
  node.hi = hi;
  return push(std::move(node));
}

void Graph::set_requires_grad(NodeId input, bool requires_grad) {
  Node& target = nodes_.at(input.index);
  if (target.kind != OpKind::Input) {
    throw InvalidArgument("set_requires_grad: " + describe(input) + " is not an input");
  }
  target.requires_grad = requires_grad;
  for (Node& n : nodes_) {
    if (n.kind == OpKind::Input || n.kind == OpKind::Constant) continue;
    n.requires_grad = std::any_of(n.inputs.begin(), n.inputs.end(),
                                  [&](NodeId in) { return nodes_[in.index].requires_grad; });
  }
  has_grads_ = false;
}

NodeId Graph::find(std::string_view input_name) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind == OpKind::Input && nodes_[i].name == input_name) {
      return NodeId{static_cast<std::uint32_t>(i)};
    }
  }
  throw InvalidArgument("graph has no input named '" + std::string(input_name) + "'");
}

const Shape& Graph::shape(NodeId node) const { return at(node, "shape").shape; }

OpKind Graph::kind(NodeId node) const { return at(node, "kind").kind; }

void Graph::bind(std::string_view input_name, Tensor value) { bind(find(input_name), std::move(value)); }

void Graph::bind(NodeId input, Tensor value) {
  Node& n = nodes_.at(input.index);
  if (n.kind != OpKind::Input) throw InvalidArgument("bind: " + describe(input) + " is not an input");
  if (value.shape() != n.shape) {
    throw ShapeError("bind: " + describe(input) + " given tensor of shape " + shape_str(value.shape()));
  }
  if (!value.all_finite()) throw DivergenceError("bind: non-finite value for " + describe(input));
  n.value = std::move(value);
  n.bound = true;
  evaluated_ = 0;
  has_grads_ = false;
}

const Tensor& Graph::forward(NodeId output, const NamedTensors& inputs) {
  for (const auto& [name, t] : inputs) bind(name, t);
  return forward(output);
}

const Tensor& Graph::forward(NodeId output) {
  at(output, "forward");
  for (std::size_t i = 0; i <= output.index; ++i) {
    Node& n = nodes_[i];
    if (n.kind == OpKind::Input || n.kind == OpKind::Constant) {
      if (!n.bound) throw StateError("forward: " + describe(NodeId{std::uint32_t(i)}) + " is unbound");
      continue;
    }
    evaluate(n);
    if (!n.value.all_finite()) {
      throw DivergenceError("forward: non-finite output at " + describe(NodeId{std::uint32_t(i)}));
    }
  }
  evaluated_ = std::max<std::size_t>(evaluated_, output.index + 1);
  has_grads_ = false;
  return nodes_[output.index].value;
}

const Tensor& Graph::value(NodeId node) const {
  if (node.index >= evaluated_ && nodes_.at(node.index).kind != OpKind::Input &&
      nodes_[node.index].kind != OpKind::Constant) {
    throw StateError("value: " + describe(node) + " has not been evaluated");
  }
  return nodes_.at(node.index).value;
}

void Graph::evaluate(Node& n) {
  const auto in = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k].index].value; };
  if (n.value.shape() != n.shape) n.value = Tensor(n.shape);
  double* out = n.value.data().data();

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Constant:
      break;
    case OpKind::Affine: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const Tensor& b = in(2);
      const std::size_t rows = w.shape()[0], cols = w.shape()[1];
      for (std::size_t r = 0; r < rows; ++r) {
        const double* wr = w.data().data() + r * cols;
        double s = b[r];
        for (std::size_t c = 0; c < cols; ++c) s += wr[c] * x[c];
        out[r] = s;
      }
      break;
    }
    case OpKind::Conv2d: {
      const Tensor& x = in(0);
      const Tensor& k = in(1);
      const Tensor& b = in(2);
      const std::size_t oc = k.shape()[0], ic = k.shape()[1], ks = k.shape()[2];
      const std::ptrdiff_t h = std::ptrdiff_t(x.shape()[1]), w = std::ptrdiff_t(x.shape()[2]);
      const std::ptrdiff_t pad = std::ptrdiff_t(ks / 2);
      for (std::size_t o = 0; o < oc; ++o) {
        double* plane = out + o * h * w;
        std::fill(plane, plane + h * w, b[o]);
        for (std::size_t c = 0; c < ic; ++c) {
          const double* src = x.data().data() + c * h * w;
          for (std::ptrdiff_t ky = 0; ky < std::ptrdiff_t(ks); ++ky) {
            const std::ptrdiff_t dy = ky - pad;
            const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(h, h - dy);
            for (std::ptrdiff_t kx = 0; kx < std::ptrdiff_t(ks); ++kx) {
              const std::ptrdiff_t dx = kx - pad;
              const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(w, w - dx);
              const double wt = k[((o * ic + c) * ks + std::size_t(ky)) * ks + std::size_t(kx)];
              for (std::ptrdiff_t y = y0; y < y1; ++y) {
                double* orow = plane + y * w;
                const double* irow = src + (y + dy) * w + dx;
                for (std::ptrdiff_t xx = x0; xx < x1; ++xx) orow[xx] += wt * irow[xx];
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::Relu: {
      const Tensor& x = in(0);
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    }
    case OpKind::Tanh: {
      const Tensor& x = in(0);
      for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
      break;
    }
    case OpKind::MaxPool2: {
      const Tensor& x = in(0);
      const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
      const std::size_t oh = h / 2, ow = w / 2;
      n.argmax.resize(c * oh * ow);
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const std::size_t base = ch * h * w + 2 * y * w + 2 * xx;
            std::size_t best = base;
            for (std::size_t cand : {base + 1, base + w, base + w + 1}) {
              if (x[cand] > x[best]) best = cand;
            }
            const std::size_t o = (ch * oh + y) * ow + xx;
            out[o] = x[best];
            n.argmax[o] = static_cast<std::uint32_t>(best);
          }
        }
      }
      break;
    }
    case OpKind::SoftmaxCrossEntropy: {
      const Tensor& z = in(0);
      const Tensor& p = in(1);
      const double zmax = *std::max_element(z.data().begin(), z.data().end());
      double sum = 0.0;
      n.probs = Tensor(z.shape());
      for (std::size_t i = 0; i < z.size(); ++i) {
        n.probs[i] = std::exp(z[i] - zmax);
        sum += n.probs[i];
      }
      const double log_sum = std::log(sum);
      double loss = 0.0;
      for (std::size_t i = 0; i < z.size(); ++i) {
        n.probs[i] /= sum;
        if (p[i] != 0.0) loss -= p[i] * (z[i] - zmax - log_sum);
      }
      out[0] = loss;
      break;
    }
    case OpKind::Add: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
      break;
    }
    case OpKind::Mul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
      break;
    }
    case OpKind::Scale: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = n.factor * a[i];
      break;
    }
    case OpKind::L2Norm:
      out[0] = advr::l2_norm(in(0).data());
      break;
    case OpKind::Clip: {
      const Tensor& a = in(0);
      for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::clamp(a[i], n.lo, n.hi);
      break;
    }
  }
}

void Graph::backward(NodeId output) { backward(output, Tensor({1}, 1.0)); }

void Graph::backward(NodeId output, const Tensor& seed) {
  Seed s{output, seed};
  backward(std::span<const Seed>(&s, 1));
}

void Graph::backward(std::span<const Seed> seeds) {
  if (evaluated_ == 0) throw StateError("backward called before forward");
  std::size_t top = 0;
  for (const Seed& s : seeds) {
    if (s.node.index >= evaluated_) {
      throw StateError("backward: " + describe(s.node) + " was not evaluated by forward");
    }
    if (s.value.shape() != nodes_[s.node.index].shape) {
      throw ShapeError("backward: seed of shape " + shape_str(s.value.shape()) + " for " +
                       describe(s.node));
    }
    top = std::max<std::size_t>(top, s.node.index + 1);
  }
  for (std::size_t i = 0; i < evaluated_; ++i) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.grad.shape() != n.shape) {
      n.grad = Tensor(n.shape);
    } else {
      n.grad.fill(0.0);
    }
  }
  for (const Seed& s : seeds) {
    Node& n = nodes_[s.node.index];
    if (n.requires_grad) n.grad += s.value;
  }
  for (std::size_t i = top; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.requires_grad && !n.inputs.empty()) propagate(n);
  }
  has_grads_ = true;
}

void Graph::propagate(Node& n) {
  const Tensor& g = n.grad;
  const auto needs = [&](std::size_t k) { return nodes_[n.inputs[k].index].requires_grad; };
  const auto val = [&](std::size_t k) -> const Tensor& { return nodes_[n.inputs[k].index].value; };
  const auto gin = [&](std::size_t k) -> Tensor& { return nodes_[n.inputs[k].index].grad; };

  switch (n.kind) {
    case OpKind::Input:
    case OpKind::Constant:
      break;
    case OpKind::Affine: {
      const Tensor& x = val(0);
      const Tensor& w = val(1);
      const std::size_t rows = w.shape()[0], cols = w.shape()[1];
      if (needs(0)) {
        Tensor& gx = gin(0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          const double* wr = w.data().data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) gx[c] += gr * wr[c];
        }
      }
      if (needs(1)) {
        Tensor& gw = gin(1);
        for (std::size_t r = 0; r < rows; ++r) {
          const double gr = g[r];
          double* gwr = gw.data().data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) gwr[c] += gr * x[c];
        }
      }
      if (needs(2)) gin(2) += g;
      break;
    }
    case OpKind::Conv2d: {
      const Tensor& x = val(0);
      const Tensor& k = val(1);
      const std::size_t oc = k.shape()[0], ic = k.shape()[1], ks = k.shape()[2];
      const std::ptrdiff_t h = std::ptrdiff_t(x.shape()[1]), w = std::ptrdiff_t(x.shape()[2]);
      const std::ptrdiff_t pad = std::ptrdiff_t(ks / 2);
      const bool gx_on = needs(0), gk_on = needs(1);
      for (std::size_t o = 0; o < oc; ++o) {
        const double* gplane = g.data().data() + o * h * w;
        if (needs(2)) {
          double s = 0.0;
          for (std::ptrdiff_t i = 0; i < h * w; ++i) s += gplane[i];
          gin(2)[o] += s;
        }
        if (!gx_on && !gk_on) continue;
        for (std::size_t c = 0; c < ic; ++c) {
          const double* src = x.data().data() + c * h * w;
          double* gsrc = gx_on ? gin(0).data().data() + c * h * w : nullptr;
          for (std::ptrdiff_t ky = 0; ky < std::ptrdiff_t(ks); ++ky) {
            const std::ptrdiff_t dy = ky - pad;
            const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(h, h - dy);
            for (std::ptrdiff_t kx = 0; kx < std::ptrdiff_t(ks); ++kx) {
              const std::ptrdiff_t dx = kx - pad;
              const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(w, w - dx);
              const std::size_t kidx = ((o * ic + c) * ks + std::size_t(ky)) * ks + std::size_t(kx);
              const double wt = k[kidx];
              double acc = 0.0;
              for (std::ptrdiff_t y = y0; y < y1; ++y) {
                const double* grow = gplane + y * w;
                const std::ptrdiff_t off = (y + dy) * w + dx;
                if (gk_on) {
                  const double* irow = src + off;
                  for (std::ptrdiff_t xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
                }
                if (gx_on) {
                  double* girow = gsrc + off;
                  for (std::ptrdiff_t xx = x0; xx < x1; ++xx) girow[xx] += wt * grow[xx];
                }
              }
              if (gk_on) gin(1)[kidx] += acc;
            }
          }
        }
      }
      break;
    }
    case OpKind::Relu: {
      if (!needs(0)) break;
      const Tensor& x = val(0);
      Tensor& gx = gin(0);
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] > 0.0) gx[i] += g[i];
      }
      break;
    }
    case OpKind::Tanh: {
      if (!needs(0)) break;
      Tensor& gx = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double t = n.value[i];
        gx[i] += g[i] * (1.0 - t * t);
      }
      break;
    }
    case OpKind::MaxPool2: {
      if (!needs(0)) break;
      Tensor& gx = gin(0);
      for (std::size_t o = 0; o < g.size(); ++o) gx[n.argmax[o]] += g[o];
      break;
    }
    case OpKind::SoftmaxCrossEntropy: {
      const Tensor& z = val(0);
      const Tensor& p = val(1);
      const double s = g[0];
      if (needs(0)) {
        double mass = 0.0;
        for (double v : p.data()) mass += v;
        Tensor& gz = gin(0);
        for (std::size_t i = 0; i < z.size(); ++i) gz[i] += s * (n.probs[i] * mass - p[i]);
      }
      if (needs(1)) {
        Tensor& gp = gin(1);
        for (std::size_t i = 0; i < z.size(); ++i) gp[i] -= s * std::log(n.probs[i]);
      }
      break;
    }
    case OpKind::Add:
      if (needs(0)) gin(0) += g;
      if (needs(1)) gin(1) += g;
      break;
    case OpKind::Mul: {
      const Tensor& a = val(0);
      const Tensor& b = val(1);
      if (needs(0)) {
        Tensor& ga = gin(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
      }
      if (needs(1)) {
        Tensor& gb = gin(1);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
      }
      break;
    }
    case OpKind::Scale: {
      if (!needs(0)) break;
      Tensor& ga = gin(0);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.factor * g[i];
      break;
    }
    case OpKind::L2Norm: {
      if (!needs(0)) break;
      const double norm = n.value[0];
      if (norm == 0.0) break;
      const Tensor& a = val(0);
      Tensor& ga = gin(0);
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g[0] * a[i] / norm;
      break;
    }
    case OpKind::Clip: {
      if (!needs(0)) break;
      // Pass-through on the closed interval so a perturbation sitting exactly
      // on the box boundary still receives a gradient.
      const Tensor& a = val(0);
      Tensor& ga = gin(0);
      for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] >= n.lo && a[i] <= n.hi) ga[i] += g[i];
      }
      break;
    }
  }
}

const Tensor& Graph::grad(NodeId node) const {
  if (!has_grads_) throw StateError("grad: no backward pass has been run");
  const Node& n = at(node, "grad");
  if (!n.requires_grad) throw StateError("grad: " + describe(node) + " does not require grad");
  return n.grad;
}

const Tensor& Graph::grad(std::string_view input_name) const { return grad(find(input_name)); }

}  // namespace advr
