#include "advr/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "advr/binio.hpp"
#include "advr/errors.hpp"
#include "advr/optim.hpp"

namespace advr {

namespace {

constexpr std::string_view kMagic = "ADVRMODL";
constexpr std::uint32_t kVersion = 1;

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

Tensor one_hot(std::size_t n, ClassId label) {
  Tensor t({n});
  t[label] = 1.0;
  return t;
}

}  // namespace

const char* architecture_name(Architecture arch) {
  switch (arch) {
    case Architecture::Affine: return "affine";
    case Architecture::SmallCnn: return "small_cnn";
  }
  return "?";
}

Classifier Classifier::small_cnn(Shape input_shape, std::size_t class_count, CnnShape shape,
                                 std::uint64_t seed) {
  if (input_shape.size() != 3 || input_shape[1] % 4 != 0 || input_shape[2] % 4 != 0 ||
      shape_size(input_shape) == 0) {
    throw ShapeError("small_cnn: input shape " + shape_str(input_shape) +
                     " must be [C,H,W] with H, W divisible by 4");
  }
  if (class_count < 2) throw InvalidArgument("small_cnn: need at least 2 classes");
  if (shape.kernel % 2 == 0 || shape.conv1_channels == 0 || shape.conv2_channels == 0) {
    throw InvalidArgument("small_cnn: kernel must be odd and channel counts positive");
  }
  Classifier m;
  m.arch_ = Architecture::SmallCnn;
  m.input_shape_ = input_shape;
  m.class_count_ = class_count;
  m.seed_ = seed;
  m.cnn_ = shape;
  std::mt19937_64 rng(seed);
  const std::size_t c = input_shape[0], k = shape.kernel, c1 = shape.conv1_channels,
                    c2 = shape.conv2_channels;
  const std::size_t feat = c2 * (input_shape[1] / 4) * (input_shape[2] / 4);
  m.names_ = {"conv1.kernel", "conv1.bias", "conv2.kernel", "conv2.bias", "head.weight", "head.bias"};
  m.params_.push_back(he_normal({c1, c, k, k}, c * k * k, rng));
  m.params_.push_back(Tensor({c1}));
  m.params_.push_back(he_normal({c2, c1, k, k}, c1 * k * k, rng));
  m.params_.push_back(Tensor({c2}));
  Tensor head = he_normal({class_count, feat}, feat, rng);
  for (double& v : head.data()) v *= std::sqrt(0.5);  // Xavier-like scale for the linear head
  m.params_.push_back(std::move(head));
  m.params_.push_back(Tensor({class_count}));
  return m;
}

Classifier Classifier::affine(Tensor weight, Tensor bias, Shape input_shape) {
  if (weight.shape().size() != 2 || weight.shape()[1] != shape_size(input_shape) ||
      bias.shape() != Shape{weight.shape()[0]} || weight.shape()[0] < 2) {
    throw ShapeError("affine classifier: weight " + shape_str(weight.shape()) + ", bias " +
                     shape_str(bias.shape()) + ", input " + shape_str(input_shape));
  }
  Classifier m;
  m.arch_ = Architecture::Affine;
  m.input_shape_ = std::move(input_shape);
  m.class_count_ = weight.shape()[0];
  m.names_ = {"head.weight", "head.bias"};
  m.params_ = {std::move(weight), std::move(bias)};
  return m;
}

void Classifier::check_params() const {
  if (params_.size() != names_.size()) throw ShapeError("classifier: parameter list corrupted");
  for (const Tensor& p : params_) {
    if (!p.all_finite()) throw DivergenceError("classifier: non-finite parameter");
  }
}

// ---- Session ---------------------------------------------------------------

ClassifierSession::ClassifierSession(const Classifier& model, bool param_grads)
    : model_(&model), param_grads_(param_grads) {
  x_ = graph_.input("x", model.input_shape(), !param_grads);
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    param_nodes_.push_back(graph_.input(model.param_names()[i], model.params()[i].shape(), param_grads));
  }
  NodeId h = x_;
  std::size_t p = 0;
  if (model.architecture() == Architecture::SmallCnn) {
    h = graph_.max_pool2(graph_.relu(graph_.conv2d(h, param_nodes_[0], param_nodes_[1])));
    h = graph_.max_pool2(graph_.relu(graph_.conv2d(h, param_nodes_[2], param_nodes_[3])));
    p = 4;
  }
  logits_ = graph_.affine(h, param_nodes_[p], param_nodes_[p + 1]);
  target_ = graph_.input("target", {model.class_count()}, false);
  loss_ = graph_.softmax_cross_entropy(logits_, target_);
  rebind();
}

void ClassifierSession::rebind() {
  for (std::size_t i = 0; i < param_nodes_.size(); ++i) graph_.bind(param_nodes_[i], model_->params()[i]);
}

void ClassifierSession::check_image(const Tensor& image) const {
  if (image.shape() != model_->input_shape()) {
    throw ShapeError("classifier expects input " + shape_str(model_->input_shape()) + ", got " +
                     shape_str(image.shape()));
  }
}

void ClassifierSession::set_target(ClassId label) {
  if (label >= model_->class_count()) {
    throw InvalidArgument("label " + std::to_string(label) + " >= class count " +
                          std::to_string(model_->class_count()));
  }
  graph_.bind(target_, one_hot(model_->class_count(), label));
}

const Tensor& ClassifierSession::logits(const Tensor& image) {
  check_image(image);
  graph_.bind(x_, image);
  return graph_.forward(logits_);
}

Prediction ClassifierSession::predict(const Tensor& image) {
  Prediction p;
  p.logits = logits(image);
  p.probabilities = softmax(p.logits.data());
  p.label = argmax(p.logits.data());
  return p;
}

double ClassifierSession::loss(const Tensor& image, ClassId label) {
  check_image(image);
  graph_.bind(x_, image);
  set_target(label);
  return graph_.forward(loss_)[0];
}

Tensor ClassifierSession::input_gradient(const Tensor& image, ClassId label) {
  if (param_grads_) throw StateError("input_gradient needs a session without param grads");
  loss(image, label);
  graph_.backward(loss_);
  return graph_.grad(x_);
}

Tensor ClassifierSession::logits_vjp(const Tensor& seed) {
  if (param_grads_) throw StateError("logits_vjp needs a session without param grads");
  graph_.backward(logits_, seed);
  return graph_.grad(x_);
}

double ClassifierSession::accumulate_param_grads(const Tensor& image, ClassId label,
                                                 std::span<Tensor> accum) {
  if (!param_grads_) throw StateError("session was created without param grads");
  const double l = loss(image, label);
  graph_.backward(loss_);
  for (std::size_t i = 0; i < param_nodes_.size(); ++i) accum[i] += graph_.grad(param_nodes_[i]);
  return l;
}

// ---- Free functions ----------------------------------------------------------

Tensor softmax(std::span<const double> logits) {
  Tensor out({logits.size()});
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) s += out[i] = std::exp(logits[i] - m);
  for (double& v : out.data()) v /= s;
  return out;
}

ClassId argmax(std::span<const double> values) {
  return static_cast<ClassId>(std::max_element(values.begin(), values.end()) - values.begin());
}

Prediction predict(const Classifier& model, const Image& image) {
  ClassifierSession s(model);
  return s.predict(image.tensor());
}

Tensor input_gradient(const Classifier& model, const Image& image, ClassId label) {
  ClassifierSession s(model);
  return s.input_gradient(image.tensor(), label);
}

TrainMetrics fit(Classifier& model, const Dataset& train, const TrainConfig& config, const Dataset* test) {
  if (config.epochs < 1) throw InvalidArgument("training needs at least one epoch");
  if (config.batch_size < 1) throw InvalidArgument("batch size must be positive");
  if (!(config.lr > 0.0)) throw InvalidArgument("learning rate must be positive");
  if (train.image_shape() != model.input_shape()) {
    throw ShapeError("dataset images " + shape_str(train.image_shape()) + " vs model input " +
                     shape_str(model.input_shape()));
  }
  if (train.class_count() > model.class_count()) {
    throw ShapeError("dataset has " + std::to_string(train.class_count()) + " classes, model has " +
                     std::to_string(model.class_count()));
  }

  TrainMetrics metrics;
  ClassifierSession session(model, true);
  ClassifierSession eval(model, false);
  const auto mean_loss = [&] {
    double s = 0.0;
    for (const auto& ex : train.examples()) s += eval.loss(ex.image.tensor(), ex.label);
    return s / double(train.size());
  };
  metrics.initial_loss = mean_loss();

  std::vector<Tensor> grads;
  for (const Tensor& p : model.params()) grads.emplace_back(p.shape());
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(config.seed);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    try {
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        for (Tensor& g : grads) g.fill(0.0);
        for (std::size_t i = start; i < end; ++i) {
          const auto& ex = train[order[i]];
          epoch_loss += session.accumulate_param_grads(ex.image.tensor(), ex.label, grads);
        }
        const double inv = 1.0 / double(end - start);
        for (Tensor& g : grads) {
          for (double& v : g.data()) v *= inv;
        }
        sgd_step(model.params(), grads, config.lr);
        session.rebind();
      }
    } catch (const DivergenceError& e) {
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch + 1) + ": " + e.what());
    }
    epoch_loss /= double(train.size());
    if (!std::isfinite(epoch_loss)) {
      throw DivergenceError("training diverged in epoch " + std::to_string(epoch + 1) +
                            ": loss is not finite");
    }
    metrics.epoch_loss.push_back(epoch_loss);
  }
  model.check_params();

  eval.rebind();
  const auto acc = [&](const Dataset& d) {
    std::size_t hits = 0;
    for (const auto& ex : d.examples()) hits += eval.predict(ex.image.tensor()).label == ex.label;
    return double(hits) / double(d.size());
  };
  metrics.train_accuracy = acc(train);
  if (test) metrics.test_accuracy = acc(*test);
  return metrics;
}

TrainedClassifier train_classifier(const Dataset& train, const TrainConfig& config, const CnnShape& shape,
                                   const Dataset* test) {
  if (config.epochs < 1) throw InvalidArgument("training needs at least one epoch");
  Classifier model = Classifier::small_cnn(train.image_shape(), train.class_count(), shape, config.seed);
  TrainMetrics metrics = fit(model, train, config, test);
  return {std::move(model), std::move(metrics)};
}

Classifier extend_classes(const Classifier& model, std::size_t extra, const Dataset& reference,
                          std::uint64_t seed) {
  if (extra < 1) throw InvalidArgument("extend_classes: extra must be >= 1");
  if (reference.image_shape() != model.input_shape()) {
    throw ShapeError("extend_classes: reference images " + shape_str(reference.image_shape()) +
                     " vs model input " + shape_str(model.input_shape()));
  }
  const std::size_t old_k = model.class_count(), new_k = old_k + extra;
  const std::size_t wi = model.params_.size() - 2, bi = wi + 1;
  const Tensor& w_old = model.params_[wi];
  const Tensor& b_old = model.params_[bi];
  const std::size_t feat = w_old.shape()[1];

  double w_scale = 0.0;
  for (double v : w_old.data()) w_scale += v * v;
  w_scale = 0.1 * std::sqrt(w_scale / double(w_old.size()));

  Tensor w_new({new_k, feat});
  Tensor b_new({new_k});
  std::copy(w_old.data().begin(), w_old.data().end(), w_new.data().begin());
  std::copy(b_old.data().begin(), b_old.data().end(), b_new.data().begin());
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, w_scale);
  for (std::size_t i = old_k * feat; i < new_k * feat; ++i) w_new[i] = noise(rng);

  // Head-less graph producing the features feeding the affine head.
  std::vector<double> slack(extra, std::numeric_limits<double>::infinity());
  Graph g;
  NodeId x = g.input("x", model.input_shape(), false);
  NodeId h = x;
  if (model.architecture() == Architecture::SmallCnn) {
    std::vector<NodeId> p;
    for (std::size_t i = 0; i < 4; ++i) p.push_back(g.constant(model.params_[i]));
    h = g.max_pool2(g.relu(g.conv2d(h, p[0], p[1])));
    h = g.max_pool2(g.relu(g.conv2d(h, p[2], p[3])));
  }
  for (const auto& ex : reference.examples()) {
    g.bind(x, ex.image.tensor());
    const Tensor& f = g.forward(h);
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < old_k; ++r) {
      double s = b_old[r];
      for (std::size_t c = 0; c < feat; ++c) s += w_old[r * feat + c] * f[c];
      top = std::max(top, s);
    }
    for (std::size_t e = 0; e < extra; ++e) {
      double s = 0.0;
      for (std::size_t c = 0; c < feat; ++c) s += w_new[(old_k + e) * feat + c] * f[c];
      slack[e] = std::min(slack[e], top - s);
    }
  }
  for (std::size_t e = 0; e < extra; ++e) b_new[old_k + e] = slack[e] - 1.0;

  Classifier out = model;
  out.class_count_ = new_k;
  out.params_[wi] = std::move(w_new);
  out.params_[bi] = std::move(b_new);

  ClassifierSession check(out);
  ClassifierSession before(model);
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const Tensor& img = reference[i].image.tensor();
    if (check.predict(img).label != before.predict(img).label) {
      throw StateError("extend_classes: prediction changed on reference example " + std::to_string(i));
    }
  }
  return out;
}

// ---- Checkpoints --------------------------------------------------------------

void save_classifier(const std::filesystem::path& path, const Classifier& model) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  binio::Writer w(out);
  w.magic(kMagic);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(model.architecture()));
  w.u32(static_cast<std::uint32_t>(model.input_shape().size()));
  for (std::size_t d : model.input_shape()) w.u64(d);
  w.u64(model.class_count());
  w.u64(model.seed());
  w.u64(model.cnn_shape().conv1_channels);
  w.u64(model.cnn_shape().conv2_channels);
  w.u64(model.cnn_shape().kernel);
  w.u32(static_cast<std::uint32_t>(model.params().size()));
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    w.str(model.param_names()[i]);
    w.tensor(model.params()[i]);
  }
}

Classifier load_classifier(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  binio::Reader r(in, path.string());
  r.expect_magic(kMagic);
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw DataError(path.string() + ": model checkpoint version " + std::to_string(version) +
                    " is not supported");
  }
  const auto arch = static_cast<Architecture>(r.u32());
  if (arch != Architecture::Affine && arch != Architecture::SmallCnn) {
    throw DataError(path.string() + ": unknown architecture id");
  }
  Shape input(r.u32());
  if (input.size() != 3) throw DataError(path.string() + ": input shape must have rank 3");
  for (auto& d : input) d = r.u64();
  const std::uint64_t classes = r.u64();
  const std::uint64_t seed = r.u64();
  CnnShape cnn;
  cnn.conv1_channels = r.u64();
  cnn.conv2_channels = r.u64();
  cnn.kernel = r.u64();
  const std::uint32_t count = r.u32();
  if (count > 64) throw DataError(path.string() + ": implausible parameter count");
  std::vector<std::string> names;
  std::vector<Tensor> params;
  for (std::uint32_t i = 0; i < count; ++i) {
    names.push_back(r.str());
    params.push_back(r.tensor());
  }
  r.expect_end();

  // Rebuild a reference model of the declared architecture and check shapes.
  Classifier ref;
  if (arch == Architecture::SmallCnn) {
    ref = Classifier::small_cnn(input, classes, cnn, seed);
  } else {
    if (params.size() != 2) throw ShapeError(path.string() + ": affine checkpoint needs 2 tensors");
    ref = Classifier::affine(params[0], params[1], input);
  }
  if (ref.params_.size() != params.size()) {
    throw ShapeError(path.string() + ": parameter count does not match architecture");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].shape() != ref.params_[i].shape() || names[i] != ref.names_[i]) {
      throw ShapeError(path.string() + ": parameter '" + names[i] + "' has shape " +
                       shape_str(params[i].shape()) + ", architecture expects " +
                       shape_str(ref.params_[i].shape()));
    }
  }
  ref.params_ = std::move(params);
  ref.seed_ = seed;
  ref.check_params();
  return ref;
}

}  // namespace advr
