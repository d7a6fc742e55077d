#include <doctest.h>

#include <random>

#include "advr/attacks.hpp"
#include "advr/errors.hpp"
#include "advr/metrics.hpp"
#include "support.hpp"

using namespace advr;
using advr::testing::random_tensor;
using advr::testing::TempDir;

namespace {

// Two classes: logit 0 is constant zero, logit 1 is w.x + b.
Classifier binary_affine(const Tensor& w, double b, Shape shape) {
  const std::size_t d = w.size();
  Tensor weight({2, d});
  for (std::size_t i = 0; i < d; ++i) weight[d + i] = w[i];
  return Classifier::affine(weight, Tensor::vector({0.0, b}), shape);
}

struct Desk {
  Dataset train;
  Dataset test;
  Classifier model;
};

const Desk& desk() {
  static const Desk d = [] {
    const Dataset all = synth_dataset(4, 4, 70, {1, 16, 16});
    auto [train, test] = split_per_class(all, 50, Split::Train, Split::Test);
    Classifier m = train_classifier(train, TrainConfig{0.05, 15, 16, 4}).model;
    return Desk{std::move(train), std::move(test), std::move(m)};
  }();
  return d;
}

std::vector<LabeledExample> correctly_classified(const Desk& d, std::size_t n) {
  std::vector<LabeledExample> out;
  for (const auto& ex : d.test.examples()) {
    if (out.size() == n) break;
    if (predict(d.model, ex.image).label == ex.label) out.push_back(ex);
  }
  return out;
}

}  // namespace

TEST_SUITE("attacks") {
  TEST_CASE("fgsm_step arithmetic and sign symmetry") {
    const Tensor x = Tensor::vector({0.5, 0.2, 0.7});
    const Tensor g = Tensor::vector({0.3, -2.0, 0.0});
    const Tensor a = fgsm_step(x, g, 0.07);
    CHECK(a[0] == doctest::Approx(0.57).epsilon(1e-15));
    CHECK(a[1] == doctest::Approx(0.13).epsilon(1e-15));
    CHECK(a[2] == 0.7);

    std::mt19937_64 rng(2);
    for (int s = 0; s < 10; ++s) {
      const Tensor xs = random_tensor(rng, {8}, 0, 1);
      const Tensor gs = random_tensor(rng, {8});
      const Tensor up = fgsm_step(xs, gs, 0.05) - xs;
      const Tensor down = fgsm_step(xs, -1.0 * gs, 0.05) - xs;
      // Exact up to the rounding of (x + e) - x.
      for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(up[i] + down[i]) <= 1e-15);
    }
  }

  TEST_CASE("fgsm on an affine model matches the closed form") {
    std::mt19937_64 rng(21);
    const Shape shape{1, 3, 3};
    const Tensor w = random_tensor(rng, {3, 9});
    const Tensor b = random_tensor(rng, {3});
    const Classifier m = Classifier::affine(w, b, shape);
    for (int s = 0; s < 20; ++s) {
      const Tensor x = random_tensor(rng, shape, 0, 1);
      const ClassId y = s % 3;
      Tensor z = b;
      for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 9; ++c) z[r] += w[r * 9 + c] * x[c];
      }
      Tensor p = softmax(z.data());
      p[y] -= 1.0;
      Tensor expected(shape);
      for (std::size_t c = 0; c < 9; ++c) {
        double g = 0;
        for (std::size_t r = 0; r < 3; ++r) g += p[r] * w[r * 9 + c];
        expected[c] = std::clamp(x[c] + 0.07 * double((g > 0) - (g < 0)), 0.0, 1.0);
      }
      const AdversarialExample adv = fgsm(m, {Image(x), y}, 0.07);
      for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(adv.adversarial.tensor()[i] - expected[i]) <= 1e-12);
    }
  }

  TEST_CASE("fgsm edge cases") {
    const Desk& d = desk();
    const AdversarialExample tiny = fgsm(d.model, d.test[0], 1e-12);
    CHECK(tiny.linf_distance <= 1e-12 + 1e-15);
    CHECK_THROWS_AS(fgsm(d.model, d.test[0], 0.0), InvalidArgument);

    // Away from the box, every pixel moves by exactly epsilon.
    const Classifier m = binary_affine(Tensor::vector({1, -2, 3, -4}), 0.1, {1, 2, 2});
    const AdversarialExample a = fgsm(m, {Image(1, 2, 2, {0.5, 0.5, 0.5, 0.5}), 1}, 0.07);
    CHECK(a.linf_distance == doctest::Approx(0.07).epsilon(1e-12));
  }

  TEST_CASE("deepfool hyperplane example") {
    // f(x) = 3 x0 + 4 x1 - 2.8 at x = (0.5, 0.5): f = 0.7, distance 0.7 / 5.
    const Classifier m = binary_affine(Tensor::vector({3, 4}), -2.8, {1, 1, 2});
    const AdversarialExample a = deepfool(m, {Image(1, 1, 2, {0.5, 0.5}), 1}, {50, 0.02});
    CHECK(a.iterations == 1);
    CHECK(a.success);
    CHECK(a.l2_distance == doctest::Approx(0.14 * 1.02).epsilon(1e-12));
    const Tensor r = a.adversarial.tensor() - a.original.tensor();
    CHECK(r[0] / a.l2_distance == doctest::Approx(-0.6).epsilon(1e-12));
    CHECK(r[1] / a.l2_distance == doctest::Approx(-0.8).epsilon(1e-12));
  }

  TEST_CASE("deepfool edge cases") {
    const Classifier m = binary_affine(Tensor::vector({3, 4}), -2.8, {1, 1, 2});
    const AdversarialExample same = deepfool(m, {Image(1, 1, 2, {0.5, 0.5}), 0});
    CHECK(same.iterations == 0);
    CHECK(same.l2_distance == 0.0);
    CHECK(same.adversarial == same.original);

    const Classifier flat = Classifier::affine(Tensor({3, 2}), Tensor::vector({1, 0, 0}), {1, 1, 2});
    try {
      deepfool(flat, {Image(1, 1, 2, {0.5, 0.5}), 0});
      FAIL("expected divergence");
    } catch (const DivergenceError& e) {
      CHECK(std::string(e.what()).find("degenerate linearization") != std::string::npos);
    }
    CHECK_THROWS_AS(deepfool(m, {Image(1, 1, 2, {0.5, 0.5}), 1}, {0, 0.02}), InvalidArgument);
  }

  TEST_CASE("cw on a binary affine model approaches the margin") {
    std::mt19937_64 rng(31);
    std::normal_distribution<double> n01;
    for (int s = 0; s < 10; ++s) {
      Tensor w({9});
      for (double& v : w.data()) v = n01(rng);
      const Tensor x = random_tensor(rng, {1, 3, 3}, 0.35, 0.65);
      const double margin = 0.1;
      const double b = -dot(w, x.reshaped({9})) + margin * l2_norm(w.data());
      const Classifier m = binary_affine(w, b, {1, 3, 3});
      const AdversarialExample a = cw_l2(m, {Image(x), 1}, 0);
      CHECK(a.success);
      CHECK(a.l2_distance <= 1.1 * margin);
      CHECK(a.l2_distance >= margin * (1 - 1e-6));
    }
  }

  TEST_CASE("cw failure path and preconditions") {
    const Classifier m = binary_affine(Tensor::vector({1, 1}), 0.9, {1, 1, 2});
    CwConfig weak;
    weak.steps = 1;
    weak.binary_search_rounds = 1;
    weak.initial_c = 1e-6;
    const AdversarialExample a = cw_l2(m, {Image(1, 1, 2, {0.5, 0.5}), 1}, 0, weak);
    CHECK_FALSE(a.success);
    CHECK(a.adv_prediction == 1);
    CHECK_THROWS_AS(cw_l2(m, {Image(1, 1, 2, {0.5, 0.5}), 1}, 1), InvalidArgument);
    weak.steps = 0;
    CHECK_THROWS_AS(cw_l2(m, {Image(1, 1, 2, {0.5, 0.5}), 1}, 0, weak), InvalidArgument);
  }

  TEST_CASE("desk classifier: deepfool and cw succeed with small perturbations") {
    const Desk& d = desk();
    const auto batch = correctly_classified(d, 24);
    REQUIRE(batch.size() == 24);
    std::size_t df_ok = 0, cw_ok = 0, fg_ok = 0, halfway_back = 0;
    double df_l2 = 0, fg_l2 = 0, cw_l2_sum = 0, fg_l2_matched = 0;
    for (const auto& ex : batch) {
      const AdversarialExample df = deepfool(d.model, ex);
      const AdversarialExample fg = fgsm(d.model, ex, 0.07);
      const AdversarialExample cw = cw_l2(d.model, ex, least_likely_class(d.model, ex.image));
      for (const auto* a : {&df, &fg, &cw}) {
        for (double p : a->adversarial.pixels()) REQUIRE((p >= 0.0 && p <= 1.0));
      }
      df_ok += df.success;
      fg_ok += fg.success;
      cw_ok += cw.success;
      df_l2 += df.l2_distance;
      fg_l2 += fg.l2_distance;
      if (cw.success) {
        cw_l2_sum += cw.l2_distance;
        Tensor mid = 0.5 * (cw.adversarial.tensor() + cw.original.tensor());
        halfway_back += predict(d.model, Image(mid)).label == ex.label;
      }
      if (fg.success) fg_l2_matched += fg.l2_distance;
    }
    CHECK(double(df_ok) / 24 >= 0.95);
    CHECK(double(cw_ok) / 24 >= 0.95);
    CHECK(df_l2 / 24 < fg_l2 / 24);
    CHECK(double(halfway_back) >= 0.9 * double(cw_ok));
    if (fg_ok > 0) CHECK(cw_l2_sum / double(cw_ok) < fg_l2_matched / double(fg_ok));
  }

  TEST_CASE("universal perturbation") {
    const Desk& d = desk();
    const double bound = 10.0 / 255.0;
    CHECK_THROWS_AS(UniversalPerturbation(Tensor({1, 16, 16}, 0.5), bound), InvalidArgument);

    // A zero perturbation fools exactly the misclassified images.
    const UniversalPerturbation zero(Tensor({1, 16, 16}), bound);
    const AdversarialSet z = universal_dataset(d.model, zero, d.test);
    CHECK(fooling_ratio(d.model, z).hits + accuracy(d.model, d.test).hits == d.test.size());
    CHECK(apply_universal(zero, d.test[0].image) == d.test[0].image);

    Generator gen({1, 16, 16}, GeneratorConfig{8, 3, bound, 1});
    UniversalConfig cfg{2, 0.01, 32, 1};
    const UniversalPerturbation p = train_universal(d.model, gen, d.train, cfg);
    CHECK(linf_norm(p.delta().data()) <= bound);
    CHECK(linf_norm(p.delta().data()) > 0.0);
    for (const auto& ex : d.test.examples()) {
      const Image out = apply_universal(p, ex.image);
      const Tensor expected = clip(ex.image.tensor() + p.delta(), 0.0, 1.0);
      REQUIRE(out.tensor() == expected);
      REQUIRE(linf_norm((out.tensor() - ex.image.tensor()).data()) <= linf_norm(p.delta().data()) + 1e-15);
    }

    Tensor spike({1, 16, 16});
    spike[0] = 0.04;
    Tensor img({1, 16, 16}, 0.5);
    img[0] = 0.99;
    CHECK(apply_universal(UniversalPerturbation(spike, 0.04), Image(img)).tensor()[0] == 1.0);
    CHECK_THROWS_AS(apply_universal(p, Image(Tensor({1, 8, 8}))), ShapeError);

    cfg.epochs = 0;
    CHECK_THROWS_AS(train_universal(d.model, gen, d.train, cfg), InvalidArgument);

    TempDir dir("uprt");
    save_perturbation(dir / "p.advrupt", p);
    CHECK(load_perturbation(dir / "p.advrupt") == p);
  }

  TEST_CASE("attack names") {
    CHECK(parse_attack("deepfool") == AttackKind::DeepFool);
    CHECK(std::string(attack_name(AttackKind::Cw)) == "cw");
    CHECK_THROWS_AS(parse_attack("pgd"), ConfigError);
  }

  TEST_CASE("attack_dataset is deterministic") {
    const Desk& d = desk();
    const auto [few, rest] = split_per_class(d.test, 2, Split::Test, Split::Test);
    AttackSpec spec;
    spec.kind = AttackKind::DeepFool;
    const AdversarialSet a = attack_dataset(d.model, few, spec);
    CHECK(a.size() == few.size());
    CHECK(a == attack_dataset(d.model, few, spec));
    spec.kind = AttackKind::Gap;
    CHECK_THROWS_AS(attack_dataset(d.model, few, spec), InvalidArgument);
  }
}
