#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "advr/config.hpp"
#include "advr/labeler.hpp"

namespace advr {

// Output directory: checkpoints/, adversarial/, reports/ and a MANIFEST with
// one "path<TAB>stage<TAB>sha256" line per artifact. A failed stage adds a
// "!failed<TAB>stage<TAB>message" line; earlier artifacts stay in place.
class Workspace {
 public:
  explicit Workspace(std::filesystem::path root);

  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path checkpoint(const std::string& name) const;
  std::filesystem::path adversarial(const std::string& name) const;
  std::filesystem::path report(const std::string& name) const;

  // Hashes the file and upserts its manifest line.
  void record(const std::filesystem::path& artifact, const std::string& stage);
  void record_failure(const std::string& stage, const std::string& message);

 private:
  void write_manifest() const;

  std::filesystem::path root_;
  std::vector<std::array<std::string, 3>> entries_;
};

std::string sha256_file(const std::filesystem::path& path);

struct Splits {
  Dataset train;
  Dataset validation;
  Dataset test;
};

// Train / validation / test per the dataset config. Synthetic data is a pure
// function of (config, seeds.data); CIFAR-10 takes train and validation from
// the data_batch files and test from test_batch.
Splits load_splits(const RunConfig& config);

struct TrainStage {
  Classifier model;
  TrainMetrics metrics;
  Ratio test_accuracy;
};

struct AttackStage {
  AdversarialSet pool;  // from training images; the retraining pool
  AdversarialSet held_out;  // from test images; never retrained on
  std::optional<UniversalPerturbation> perturbation;
  Ratio fooling_before;  // on held_out
};

struct LabelStage {
  Labeler labeler;
  std::vector<KnnResult> results;  // one per labeled adversarial
  Ratio label_accuracy;
  std::size_t fooling_routed = 0;
};

// Every stage takes an optional workspace; with one, artifacts and stage
// reports are written and recorded in the MANIFEST.
TrainStage run_train(const RunConfig& config, const Splits& splits, Workspace* ws = nullptr);
AttackStage run_attack(const RunConfig& config, const Classifier& model, const Splits& splits,
                       Workspace* ws = nullptr);
LabelStage run_label(const RunConfig& config, const Splits& splits, const AdversarialSet& set,
                     Workspace* ws = nullptr);
std::vector<ExperimentReport> run_retrain(const RunConfig& config, const Classifier& baseline,
                                          const Splits& splits, const AttackStage& attack,
                                          const std::optional<LabelStage>& labels, Workspace* ws = nullptr);

struct PipelineResult {
  TrainStage train;
  AttackStage attack;
  LabelStage label;
  std::vector<ExperimentReport> reports;
};

// train -> attack -> label -> retrain sweep with re-attack. With a workspace,
// a failing stage is recorded in the MANIFEST before the error propagates.
PipelineResult run_pipeline(const RunConfig& config, Workspace* ws = nullptr);

// Sweep points resolved against the pool size, in config order.
std::vector<std::size_t> sweep_counts(const RetrainConfig& retrain, std::size_t pool_size);

// Process exit code for an exception: 2 config, 3 model/shape, 4 data,
// 5 divergence, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace advr
