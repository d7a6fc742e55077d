#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advr/attacks.hpp"
#include "advr/classifier.hpp"
#include "advr/dataset.hpp"
#include "advr/defense.hpp"
#include "advr/metrics.hpp"

namespace advr {

struct SyntheticSpec {
  std::size_t classes = 10;
  Shape shape{1, 16, 16};
  SynthTexture texture;
};

struct DataConfig {
  // Exactly one of the two is set.
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::filesystem::path> cifar10;
  std::size_t train_per_class = 100;
  std::size_t validation_per_class = 20;
  std::size_t test_per_class = 30;
};

struct ModelConfig {
  CnnShape shape;
  TrainConfig train{0.05, 25, 16, 1};
};

struct LabelerConfig {
  std::optional<std::size_t> dim;  // default: about 10% of the input size
  std::size_t k = 1;
  bool fooling_class = false;      // extend the classifier by one class
};

struct RetrainConfig {
  // Sweep points as fractions of the adversarial pool; `counts` overrides.
  std::vector<double> fractions{1.0, 0.5, 0.25, 0.2};
  std::vector<std::size_t> counts;
  LabelSource label_source = LabelSource::Attacker;
  TrainConfig train{0.05, 15, 16, 1};
  bool from_scratch = false;
  // Cap on training images attacked for the pool (per class); all if unset.
  std::optional<std::size_t> pool_per_class;
  // Cap on test images attacked for held-out metrics (per class).
  std::optional<std::size_t> eval_per_class;
};

struct RunConfig {
  std::string experiment_id = "experiment";
  DataConfig data;
  ModelConfig model;
  AttackSpec attack;
  LabelerConfig labeler;
  RetrainConfig retrain;
  Seeds seeds;
};

// Throws ConfigError naming the offending key. Unknown keys are rejected.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
// Full echo; parse_config(config_to_json(c)) reproduces c.
nlohmann::json config_to_json(const RunConfig& config);

}  // namespace advr
