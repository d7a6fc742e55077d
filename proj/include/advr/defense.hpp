#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "advr/adversarial.hpp"
#include "advr/attacks.hpp"
#include "advr/classifier.hpp"
#include "advr/dataset.hpp"
#include "advr/ratio.hpp"

namespace advr {

enum class LabelSource { Attacker, Labeler };

const char* label_source_name(LabelSource source);
// Throws ConfigError for anything but "attacker" or "labeler".
LabelSource parse_label_source(const std::string& name);

// One pool of adversarials plus the label each one is trained with. For
// Attacker the labels are the true labels; for Labeler they come from the
// true-label generator and may include the fooling class id.
struct AdversarialPool {
  AdversarialSet set;
  LabelSource source = LabelSource::Attacker;
  std::vector<ClassId> labels;
};

AdversarialPool attacker_labeled(AdversarialSet set);
AdversarialPool labeler_labeled(AdversarialSet set, std::vector<ClassId> labels);

struct RetrainPlan {
  Dataset base;
  std::vector<AdversarialPool> pools;
  std::size_t adversarial_count = 0;
  // When set, the retrain set gains one class (id = base class count) and the
  // classifier must be extended before retraining.
  bool fooling_class_enabled = false;
  TrainConfig training;
};

std::size_t available_adversarials(const RetrainPlan& plan);

// Base examples plus a seeded subsample of adversarial_count pool records,
// shuffled by seed. Subsamples for one seed are nested: a smaller count takes
// a prefix of the same permutation. Throws InvalidArgument when the count
// exceeds what the pools hold, and when a label is out of range.
Dataset build_retrain_set(const RetrainPlan& plan, std::uint64_t seed);

struct RetrainResult {
  Classifier model;
  TrainMetrics metrics;
};

// Continues training a copy of `model` on `retrain_set` (or trains a fresh
// network of the same architecture with from_scratch). Throws
// InvalidArgument if a label is >= model.class_count().
RetrainResult retrain(const Classifier& model, const Dataset& retrain_set, const TrainConfig& config,
                      bool from_scratch = false, const Dataset* test = nullptr);

struct ReattackResult {
  Ratio fooling;
  AdversarialSet adversarials;
};

// Fresh adversarials against `model` over `data`. White-box attacks always
// recompute gradients. For gap, `fixed` replays the previously trained
// perturbation (the black-box protocol); without it a new generator is
// trained against `model` on `data`.
ReattackResult reattack(const Classifier& model, const Dataset& data, const AttackSpec& spec,
                        const std::optional<UniversalPerturbation>& fixed = std::nullopt);

}  // namespace advr
