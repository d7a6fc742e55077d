#include "advr/defense.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "advr/errors.hpp"
#include "advr/metrics.hpp"

namespace advr {

const char* label_source_name(LabelSource source) {
  return source == LabelSource::Attacker ? "attacker" : "labeler";
}

LabelSource parse_label_source(const std::string& name) {
  if (name == "attacker") return LabelSource::Attacker;
  if (name == "labeler") return LabelSource::Labeler;
  throw ConfigError("unknown label source '" + name + "' (expected attacker or labeler)");
}

AdversarialPool attacker_labeled(AdversarialSet set) {
  AdversarialPool pool{std::move(set), LabelSource::Attacker, {}};
  for (const auto& ex : pool.set) pool.labels.push_back(ex.true_label);
  return pool;
}

AdversarialPool labeler_labeled(AdversarialSet set, std::vector<ClassId> labels) {
  if (labels.size() != set.size()) throw InvalidArgument("labeler_labeled: one label per adversarial");
  return AdversarialPool{std::move(set), LabelSource::Labeler, std::move(labels)};
}

std::size_t available_adversarials(const RetrainPlan& plan) {
  std::size_t n = 0;
  for (const auto& p : plan.pools) n += p.set.size();
  return n;
}

Dataset build_retrain_set(const RetrainPlan& plan, std::uint64_t seed) {
  const std::size_t available = available_adversarials(plan);
  if (plan.adversarial_count > available) {
    throw InvalidArgument("build_retrain_set: requested " + std::to_string(plan.adversarial_count) +
                          " adversarials, only " + std::to_string(available) + " available");
  }
  const std::size_t classes = plan.base.class_count() + (plan.fooling_class_enabled ? 1 : 0);

  std::vector<std::pair<std::size_t, std::size_t>> refs;  // (pool, index)
  for (std::size_t p = 0; p < plan.pools.size(); ++p) {
    const auto& pool = plan.pools[p];
    if (pool.labels.size() != pool.set.size()) throw InvalidArgument("build_retrain_set: pool label count");
    for (std::size_t i = 0; i < pool.set.size(); ++i) refs.emplace_back(p, i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(refs.begin(), refs.end(), rng);
  refs.resize(plan.adversarial_count);

  std::vector<LabeledExample> examples = plan.base.examples();
  for (auto [p, i] : refs) {
    const ClassId label = plan.pools[p].labels[i];
    if (label >= classes) {
      throw InvalidArgument("build_retrain_set: label " + std::to_string(label) + " needs " +
                            std::to_string(label + 1) + " classes (fooling class " +
                            (plan.fooling_class_enabled ? "enabled" : "disabled") + ")");
    }
    examples.push_back({plan.pools[p].set[i].adversarial, label});
  }
  auto names = plan.base.class_names();
  if (plan.fooling_class_enabled && !names.empty()) names.push_back("fooling");
  Dataset out(std::move(examples), classes, Split::Train, std::move(names));
  return shuffled(out, seed ^ 0x9e3779b97f4a7c15ULL);
}

RetrainResult retrain(const Classifier& model, const Dataset& retrain_set, const TrainConfig& config,
                      bool from_scratch, const Dataset* test) {
  if (retrain_set.class_count() > model.class_count()) {
    throw InvalidArgument("retrain: retrain set has " + std::to_string(retrain_set.class_count()) +
                          " classes, classifier " + std::to_string(model.class_count()) +
                          " (extend the classifier first)");
  }
  if (model.input_shape() != retrain_set.image_shape()) {
    throw ShapeError("retrain: image shape " + shape_str(retrain_set.image_shape()) + " vs classifier " +
                     shape_str(model.input_shape()));
  }
  Classifier next = model;
  if (from_scratch) {
    if (model.architecture() != Architecture::SmallCnn) {
      throw InvalidArgument("retrain: from-scratch retraining needs the convolutional architecture");
    }
    next = Classifier::small_cnn(model.input_shape(), model.class_count(), model.cnn_shape(), config.seed);
  }
  TrainMetrics metrics = fit(next, retrain_set, config, test);
  return {std::move(next), std::move(metrics)};
}

ReattackResult reattack(const Classifier& model, const Dataset& data, const AttackSpec& spec,
                        const std::optional<UniversalPerturbation>& fixed) {
  ReattackResult out;
  if (spec.kind == AttackKind::Gap) {
    if (fixed) {
      out.adversarials = universal_dataset(model, *fixed, data);
    } else {
      Generator generator(model.input_shape(), spec.generator);
      const auto delta = train_universal(model, generator, data, spec.universal);
      out.adversarials = universal_dataset(model, delta, data);
    }
  } else {
    out.adversarials = attack_dataset(model, data, spec);
  }
  out.fooling = fooling_ratio(model, out.adversarials);
  return out;
}

}  // namespace advr
