#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "advr/adversarial.hpp"
#include "advr/classifier.hpp"
#include "advr/dataset.hpp"
#include "advr/generator.hpp"

namespace advr {

// ---- FGSM ----------------------------------------------------------------

// x + epsilon * sign(grad), not clipped. sign(0) = 0.
Tensor fgsm_step(const Tensor& x, const Tensor& grad, double epsilon);

// clip(x + epsilon * sign(grad_x J(theta, x, y)), 0, 1). Requires epsilon > 0.
AdversarialExample fgsm(const Classifier& model, const LabeledExample& example, double epsilon);

// ---- DeepFool ---------------------------------------------------------------

struct DeepFoolConfig {
  std::size_t max_iters = 50;
  double overshoot = 0.02;
};

// Multi-class DeepFool (L2). Each iteration linearizes every logit difference
// around the current point and steps onto the closest linearized boundary;
// the accumulated step is scaled by (1 + overshoot). An input that is already
// misclassified comes back unchanged with zero iterations. Throws
// DivergenceError ("degenerate linearization") when no logit difference has a
// non-zero gradient.
AdversarialExample deepfool(const Classifier& model, const LabeledExample& example,
                            const DeepFoolConfig& config = {});

// ---- Carlini-Wagner L2 ----------------------------------------------------------

struct CwConfig {
  std::size_t steps = 200;
  double initial_c = 1e-2;
  std::size_t binary_search_rounds = 5;
  double confidence = 0.0;
  double lr = 1e-2;
  // Stop a round once the objective stalls (checked every steps/10 steps).
  bool abort_early = true;
};

// Targeted C&W L2 with the tanh change of variables x' = (tanh(w) + 1) / 2,
// minimizing |x' - x|^2 + c * max(max_{k != t} Z_k - Z_t, -confidence) by
// gradient descent on w, with a binary search on c across rounds. Returns the
// smallest-L2 iterate classified as the target, or the last iterate (success
// reflects its prediction) when none was found.
AdversarialExample cw_l2(const Classifier& model, const LabeledExample& example, ClassId target,
                         const CwConfig& config = {});

// Class with the lowest logit on the clean image (lowest index on ties).
ClassId least_likely_class(const Classifier& model, const Image& image);

// ---- Universal perturbations (generator) ------------------------------------------

class UniversalPerturbation {
 public:
  // Throws InvalidArgument if |delta|_inf exceeds linf_bound.
  UniversalPerturbation(Tensor delta, double linf_bound);

  const Tensor& delta() const { return delta_; }
  double linf_bound() const { return linf_bound_; }

  friend bool operator==(const UniversalPerturbation&, const UniversalPerturbation&) = default;

 private:
  Tensor delta_;
  double linf_bound_;
};

struct UniversalConfig {
  std::size_t epochs = 10;
  double lr = 0.002;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
};

// Trains `generator` in place so that its single output pattern, added to any
// image, maximizes the cross-entropy of the classifier's clean prediction
// (non-targeted). Returns the final pattern.
UniversalPerturbation train_universal(const Classifier& model, Generator& generator, const Dataset& data,
                                      const UniversalConfig& config);

// clip(x + delta, 0, 1).
Image apply_universal(const UniversalPerturbation& perturbation, const Image& image);

void save_perturbation(const std::filesystem::path& path, const UniversalPerturbation& p);
UniversalPerturbation load_perturbation(const std::filesystem::path& path);

// ---- Batch generation ------------------------------------------------------------

enum class AttackKind { Fgsm, DeepFool, Cw, Gap };

const char* attack_name(AttackKind kind);
// Throws ConfigError for anything but fgsm, deepfool, cw, gap.
AttackKind parse_attack(const std::string& name);

struct AttackSpec {
  AttackKind kind = AttackKind::Fgsm;
  double epsilon = 0.07;
  DeepFoolConfig deepfool;
  CwConfig cw;
  GeneratorConfig generator;
  UniversalConfig universal;
};

// Runs a per-image attack (fgsm, deepfool, cw with least-likely target) over
// every example, parallel across examples.
AdversarialSet attack_dataset(const Classifier& model, const Dataset& data, const AttackSpec& spec);

// Applies a fixed universal perturbation to every example.
AdversarialSet universal_dataset(const Classifier& model, const UniversalPerturbation& perturbation,
                                 const Dataset& data);

}  // namespace advr
