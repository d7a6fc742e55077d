#include "advr/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "advr/binio.hpp"
#include "advr/errors.hpp"
#include "advr/optim.hpp"
#include "advr/parallel.hpp"

namespace advr {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

Tensor basis(std::size_t n, std::size_t k) {
  Tensor t({n});
  t[k] = 1.0;
  return t;
}

}  // namespace

// ---- FGSM ----------------------------------------------------------------------

Tensor fgsm_step(const Tensor& x, const Tensor& grad, double epsilon) {
  if (x.shape() != grad.shape()) throw ShapeError("fgsm_step: gradient shape differs from image");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += epsilon * sign(grad[i]);
  return out;
}

AdversarialExample fgsm(const Classifier& model, const LabeledExample& example, double epsilon) {
  if (!(epsilon > 0.0)) throw InvalidArgument("fgsm: epsilon must be positive");
  ClassifierSession s(model);
  const Tensor& x = example.image.tensor();
  const ClassId clean = s.predict(x).label;
  const Tensor g = s.input_gradient(x, example.label);
  Image adv = Image::clamped(fgsm_step(x, g, epsilon));
  const ClassId pred = s.predict(adv.tensor()).label;
  return make_adversarial(example.image, std::move(adv), example.label, clean, pred, "fgsm", 1);
}

// ---- DeepFool ---------------------------------------------------------------------

AdversarialExample deepfool(const Classifier& model, const LabeledExample& example,
                            const DeepFoolConfig& config) {
  if (config.max_iters < 1) throw InvalidArgument("deepfool: max_iters must be >= 1");
  if (!(config.overshoot >= 0.0)) throw InvalidArgument("deepfool: overshoot must be >= 0");
  ClassifierSession s(model);
  const Tensor& x0 = example.image.tensor();
  const std::size_t k_count = model.class_count();
  const ClassId clean = s.predict(x0).label;
  if (clean != example.label) {
    return make_adversarial(example.image, example.image, example.label, clean, clean, "deepfool", 0);
  }

  Tensor r_total(x0.shape());
  Tensor x = x0;
  ClassId pred = clean;
  std::uint32_t iters = 0;
  std::vector<Tensor> grads(k_count);
  while (pred == clean && iters < config.max_iters) {
    ++iters;
    const Tensor z = s.logits(x);
    for (std::size_t k = 0; k < k_count; ++k) grads[k] = s.logits_vjp(basis(k_count, k));

    double best = std::numeric_limits<double>::infinity();
    std::size_t best_k = k_count;
    double best_f = 0.0, best_norm2 = 0.0;
    for (std::size_t k = 0; k < k_count; ++k) {
      if (k == clean) continue;
      const Tensor w = grads[k] - grads[clean];
      const double norm = l2_norm(w.data());
      if (norm == 0.0) continue;
      const double f = z[k] - z[clean];
      const double dist = std::abs(f) / norm;
      if (dist < best) {
        best = dist;
        best_k = k;
        best_f = f;
        best_norm2 = norm * norm;
      }
    }
    if (best_k == k_count) throw DivergenceError("deepfool: degenerate linearization");
    const Tensor w = grads[best_k] - grads[clean];
    r_total += (std::abs(best_f) / best_norm2) * w;
    x = clip(x0 + (1.0 + config.overshoot) * r_total, 0.0, 1.0);
    pred = s.predict(x).label;
  }
  return make_adversarial(example.image, Image(std::move(x)), example.label, clean, pred, "deepfool",
                          iters);
}

// ---- Carlini-Wagner L2 ---------------------------------------------------------------

ClassId least_likely_class(const Classifier& model, const Image& image) {
  const Tensor z = predict(model, image).logits;
  return static_cast<ClassId>(std::min_element(z.data().begin(), z.data().end()) - z.data().begin());
}

AdversarialExample cw_l2(const Classifier& model, const LabeledExample& example, ClassId target,
                         const CwConfig& config) {
  if (target == example.label) throw InvalidArgument("cw_l2: target equals the true label");
  if (target >= model.class_count()) throw InvalidArgument("cw_l2: target out of range");
  if (config.steps < 1) throw InvalidArgument("cw_l2: steps must be >= 1");
  if (config.binary_search_rounds < 1) throw InvalidArgument("cw_l2: need at least one round");
  if (!(config.initial_c > 0.0) || !(config.lr > 0.0)) {
    throw InvalidArgument("cw_l2: initial_c and lr must be positive");
  }
  ClassifierSession s(model);
  const Tensor& x = example.image.tensor();
  const std::size_t n = x.size(), k_count = model.class_count();
  const ClassId clean = s.predict(x).label;

  // tanh-space start; the shrink keeps atanh finite at pixels 0 and 1.
  Tensor w0(x.shape());
  for (std::size_t i = 0; i < n; ++i) w0[i] = std::atanh((2.0 * x[i] - 1.0) * (1.0 - 1e-6));

  double lower = 0.0, upper = 1e10, c = config.initial_c;
  double best_l2sq = std::numeric_limits<double>::infinity();
  std::optional<Tensor> best;
  Tensor last;
  std::uint32_t total_steps = 0;
  const std::size_t check_every = std::max<std::size_t>(1, config.steps / 10);

  for (std::size_t round = 0; round < config.binary_search_rounds; ++round) {
    Tensor w = w0;
    Tensor xp(x.shape());
    bool round_success = false;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t step = 0; step < config.steps; ++step) {
      ++total_steps;
      for (std::size_t i = 0; i < n; ++i) xp[i] = 0.5 * (std::tanh(w[i]) + 1.0);
      const Tensor& z = s.logits(xp);
      std::size_t other = k_count;
      for (std::size_t k = 0; k < k_count; ++k) {
        if (k != target && (other == k_count || z[k] > z[other])) other = k;
      }
      const double gap = z[other] - z[target];
      const double hinge = std::max(gap, -config.confidence);
      double l2sq = 0.0;
      for (std::size_t i = 0; i < n; ++i) l2sq += (xp[i] - x[i]) * (xp[i] - x[i]);
      const double objective = l2sq + c * hinge;
      if (!std::isfinite(objective)) {
        throw DivergenceError("cw_l2: non-finite objective at round " + std::to_string(round + 1) +
                              ", step " + std::to_string(step + 1));
      }
      if (argmax(z.data()) == target && gap <= -config.confidence) {
        round_success = true;
        if (l2sq < best_l2sq) {
          best_l2sq = l2sq;
          best = xp;
        }
      }
      if (config.abort_early && step % check_every == 0) {
        if (objective > prev * 0.9999) break;
        prev = objective;
      }

      // d objective / d x'
      Tensor dxp(x.shape());
      if (gap > -config.confidence) {
        Tensor seed({k_count});
        seed[other] = c;
        seed[target] = -c;
        dxp = s.logits_vjp(seed);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const double t = std::tanh(w[i]);
        dxp[i] += 2.0 * (xp[i] - x[i]);
        w[i] -= config.lr * dxp[i] * 0.5 * (1.0 - t * t);
      }
    }
    for (std::size_t i = 0; i < n; ++i) xp[i] = 0.5 * (std::tanh(w[i]) + 1.0);
    last = xp;

    if (round_success) {
      upper = std::min(upper, c);
      c = (lower + upper) / 2.0;
    } else {
      lower = std::max(lower, c);
      c = upper < 1e9 ? (lower + upper) / 2.0 : c * 10.0;
    }
  }

  Image adv = Image::clamped(best ? *best : last);
  const ClassId pred = s.predict(adv.tensor()).label;
  return make_adversarial(example.image, std::move(adv), example.label, clean, pred, "cw", total_steps);
}

// ---- Universal perturbations ---------------------------------------------------------

UniversalPerturbation::UniversalPerturbation(Tensor delta, double linf_bound)
    : delta_(std::move(delta)), linf_bound_(linf_bound) {
  if (!(linf_bound_ > 0.0)) throw InvalidArgument("universal perturbation bound must be positive");
  if (!delta_.all_finite() || linf_norm(delta_.data()) > linf_bound_) {
    throw InvalidArgument("universal perturbation exceeds its L-infinity bound");
  }
}

UniversalPerturbation train_universal(const Classifier& model, Generator& generator, const Dataset& data,
                                      const UniversalConfig& config) {
  if (config.epochs < 1) throw InvalidArgument("train_universal: epochs must be >= 1");
  if (config.batch_size < 1) throw InvalidArgument("train_universal: batch size must be >= 1");
  if (generator.image_shape() != model.input_shape() || data.image_shape() != model.input_shape()) {
    throw ShapeError("train_universal: generator, data and classifier shapes disagree");
  }
  ClassifierSession cls(model);
  GeneratorSession gen(generator);
  Adam opt(config.lr);

  std::vector<ClassId> clean(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) clean[i] = cls.predict(data[i].image.tensor()).label;

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(config.seed);
  const Shape& shape = model.input_shape();

  try {
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        const Tensor delta = gen.perturbation();
        Tensor seed(shape);
        for (std::size_t b = start; b < end; ++b) {
          const Tensor& x = data[order[b]].image.tensor();
          Tensor xa = x + delta;
          const Tensor xc = clip(xa, 0.0, 1.0);
          const Tensor g = cls.input_gradient(xc, clean[order[b]]);
          // Loss is the negated cross-entropy; clip passes gradient inside [0,1].
          for (std::size_t i = 0; i < seed.size(); ++i) {
            if (xa[i] >= 0.0 && xa[i] <= 1.0) seed[i] -= g[i];
          }
        }
        for (double& v : seed.data()) v /= double(end - start);
        const std::vector<Tensor> grads = gen.param_vjp(seed);
        opt.step(generator.params(), grads);
        gen.rebind();
      }
    }
  } catch (const DivergenceError& e) {
    throw DivergenceError(std::string("train_universal diverged: ") + e.what());
  }
  Tensor delta = gen.perturbation();
  // tanh saturation can round |delta| up by an ulp past the bound.
  const double bound = generator.config().linf_bound;
  for (double& v : delta.data()) v = std::clamp(v, -bound, bound);
  return UniversalPerturbation(std::move(delta), bound);
}

Image apply_universal(const UniversalPerturbation& perturbation, const Image& image) {
  if (perturbation.delta().shape() != image.shape()) {
    throw ShapeError("apply_universal: perturbation " + shape_str(perturbation.delta().shape()) +
                     " vs image " + shape_str(image.shape()));
  }
  return Image::clamped(image.tensor() + perturbation.delta());
}

namespace {
constexpr std::string_view kPerturbationMagic = "ADVRUPRT";
constexpr std::uint32_t kPerturbationVersion = 1;
}  // namespace

void save_perturbation(const std::filesystem::path& path, const UniversalPerturbation& p) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  binio::Writer w(out);
  w.magic(kPerturbationMagic);
  w.u32(kPerturbationVersion);
  w.f64(p.linf_bound());
  w.tensor(p.delta());
}

UniversalPerturbation load_perturbation(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  binio::Reader r(in, path.string());
  r.expect_magic(kPerturbationMagic);
  if (r.u32() != kPerturbationVersion) throw DataError(path.string() + ": unsupported version");
  const double bound = r.f64();
  Tensor delta = r.tensor();
  r.expect_end();
  return UniversalPerturbation(std::move(delta), bound);
}

// ---- Batch generation --------------------------------------------------------------------

const char* attack_name(AttackKind kind) {
  switch (kind) {
    case AttackKind::Fgsm: return "fgsm";
    case AttackKind::DeepFool: return "deepfool";
    case AttackKind::Cw: return "cw";
    case AttackKind::Gap: return "gap";
  }
  return "?";
}

AttackKind parse_attack(const std::string& name) {
  if (name == "fgsm") return AttackKind::Fgsm;
  if (name == "deepfool") return AttackKind::DeepFool;
  if (name == "cw") return AttackKind::Cw;
  if (name == "gap") return AttackKind::Gap;
  throw ConfigError("unknown attack '" + name + "' (expected fgsm, deepfool, cw or gap)");
}

AdversarialSet attack_dataset(const Classifier& model, const Dataset& data, const AttackSpec& spec) {
  if (spec.kind == AttackKind::Gap) {
    throw InvalidArgument("attack_dataset: gap needs a trained perturbation, use universal_dataset");
  }
  AdversarialSet out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const LabeledExample& ex = data[i];
    switch (spec.kind) {
      case AttackKind::Fgsm:
        out[i] = fgsm(model, ex, spec.epsilon);
        break;
      case AttackKind::DeepFool:
        out[i] = deepfool(model, ex, spec.deepfool);
        break;
      case AttackKind::Cw: {
        ClassId target = least_likely_class(model, ex.image);
        if (target == ex.label) {
          // Only possible when the model ranks the true class last; fall back
          // to the next-lowest logit.
          const Tensor z = predict(model, ex.image).logits;
          double lo = std::numeric_limits<double>::infinity();
          for (std::size_t k = 0; k < z.size(); ++k) {
            if (k != ex.label && z[k] < lo) {
              lo = z[k];
              target = k;
            }
          }
        }
        out[i] = cw_l2(model, ex, target, spec.cw);
        break;
      }
      case AttackKind::Gap:
        break;
    }
  });
  return out;
}

AdversarialSet universal_dataset(const Classifier& model, const UniversalPerturbation& perturbation,
                                 const Dataset& data) {
  AdversarialSet out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    ClassifierSession s(model);
    const LabeledExample& ex = data[i];
    const ClassId clean = s.predict(ex.image.tensor()).label;
    Image adv = apply_universal(perturbation, ex.image);
    const ClassId pred = s.predict(adv.tensor()).label;
    out[i] = make_adversarial(ex.image, std::move(adv), ex.label, clean, pred, "gap", 0);
  });
  return out;
}

}  // namespace advr
