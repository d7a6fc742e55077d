#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "advr/dataset.hpp"
#include "advr/graph.hpp"
#include "advr/tensor.hpp"

namespace advr {

enum class Architecture : std::uint32_t {
  // logits = W * flatten(x) + b
  Affine = 1,
  // conv -> relu -> pool -> conv -> relu -> pool -> affine
  SmallCnn = 2,
};

const char* architecture_name(Architecture arch);

struct CnnShape {
  std::size_t conv1_channels = 8;
  std::size_t conv2_channels = 16;
  std::size_t kernel = 3;

  friend bool operator==(const CnnShape&, const CnnShape&) = default;
};

struct TrainConfig {
  double lr = 0.05;
  std::size_t epochs = 15;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
};

struct TrainMetrics {
  double initial_loss = 0.0;
  std::vector<double> epoch_loss;  // mean training loss seen during each epoch
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
};

struct Prediction {
  ClassId label = 0;
  Tensor logits;
  Tensor probabilities;
};

// Differentiable image classifier: architecture, input shape and parameters.
// Parameters are plain tensors; evaluation happens through a
// ClassifierSession so several threads can evaluate one model concurrently.
class Classifier {
 public:
  static Classifier small_cnn(Shape input_shape, std::size_t class_count, CnnShape shape,
                              std::uint64_t seed);
  // weight [classes, prod(input_shape)], bias [classes].
  static Classifier affine(Tensor weight, Tensor bias, Shape input_shape);

  Architecture architecture() const { return arch_; }
  const Shape& input_shape() const { return input_shape_; }
  std::size_t class_count() const { return class_count_; }
  std::uint64_t seed() const { return seed_; }
  const CnnShape& cnn_shape() const { return cnn_; }

  std::span<const Tensor> params() const { return params_; }
  std::span<Tensor> params() { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }

  // Throws ShapeError / DivergenceError on malformed or non-finite params.
  void check_params() const;

  friend bool operator==(const Classifier&, const Classifier&) = default;

 private:
  friend class ClassifierSession;
  friend Classifier load_classifier(const std::filesystem::path& path);
  friend Classifier extend_classes(const Classifier&, std::size_t, const Dataset&, std::uint64_t);

  Classifier() = default;

  Architecture arch_ = Architecture::SmallCnn;
  Shape input_shape_;
  std::size_t class_count_ = 0;
  std::uint64_t seed_ = 0;
  CnnShape cnn_;
  std::vector<std::string> names_;
  std::vector<Tensor> params_;
};

// One evaluation context (graph + caches) over a classifier. Not thread-safe;
// create one per thread. Call rebind() after mutating the classifier params.
class ClassifierSession {
 public:
  explicit ClassifierSession(const Classifier& model, bool param_grads = false);

  void rebind();

  const Tensor& logits(const Tensor& image);
  Prediction predict(const Tensor& image);
  // Cross-entropy of softmax(logits) against the one-hot label.
  double loss(const Tensor& image, ClassId label);
  // Gradient of the cross-entropy loss with respect to the image.
  Tensor input_gradient(const Tensor& image, ClassId label);
  // After logits(image): gradient of <seed, logits> with respect to the image.
  Tensor logits_vjp(const Tensor& seed);
  // Loss at (image,label); adds dLoss/dparam into `accum` (one per param).
  double accumulate_param_grads(const Tensor& image, ClassId label, std::span<Tensor> accum);

  const Classifier& model() const { return *model_; }

 private:
  void check_image(const Tensor& image) const;
  void set_target(ClassId label);

  const Classifier* model_;
  Graph graph_;
  NodeId x_{}, target_{}, logits_{}, loss_{};
  std::vector<NodeId> param_nodes_;
  bool param_grads_;
};

Prediction predict(const Classifier& model, const Image& image);
Tensor input_gradient(const Classifier& model, const Image& image, ClassId label);

// Softmax with the max-shift; argmax ties resolve to the lowest index.
Tensor softmax(std::span<const double> logits);
ClassId argmax(std::span<const double> values);

// Continues training `model` in place with minibatch SGD on the cross-entropy
// loss. Deterministic for a fixed config.seed. Throws DivergenceError naming
// the epoch if the loss becomes non-finite.
TrainMetrics fit(Classifier& model, const Dataset& train, const TrainConfig& config,
                 const Dataset* test = nullptr);

struct TrainedClassifier {
  Classifier model;
  TrainMetrics metrics;
};

TrainedClassifier train_classifier(const Dataset& train, const TrainConfig& config,
                                   const CnnShape& shape = {}, const Dataset* test = nullptr);

// Adds `extra` output classes. Existing rows are copied; new rows start from
// seeded small noise with a bias low enough that no new logit reaches the
// top-scoring old logit on any image of `reference`, so argmax predictions on
// that set are unchanged.
Classifier extend_classes(const Classifier& model, std::size_t extra, const Dataset& reference,
                          std::uint64_t seed);

// "ADVRMODL" checkpoint: header + packed 64-bit params; bit-exact round-trip.
void save_classifier(const std::filesystem::path& path, const Classifier& model);
Classifier load_classifier(const std::filesystem::path& path);

}  // namespace advr
