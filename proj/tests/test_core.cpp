#include <doctest.h>

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "advr/binio.hpp"
#include "advr/errors.hpp"
#include "advr/graph.hpp"
#include "advr/optim.hpp"
#include "advr/tensor.hpp"
#include "support.hpp"

using namespace advr;
using advr::testing::numeric_gradient;
using advr::testing::random_tensor;
using advr::testing::relative_error;

namespace {

constexpr int kSeeds = 20;
constexpr double kTol = 1e-4;

// Builds a graph whose output depends on the named inputs, then checks the
// vector-Jacobian product against central differences of <seed, output>.
struct OpCase {
  std::vector<std::pair<std::string, Tensor>> inputs;
  std::function<NodeId(Graph&, const std::vector<NodeId>&)> build;
};

void check_vjp(const OpCase& c, std::mt19937_64& rng) {
  Graph g;
  std::vector<NodeId> ids;
  for (const auto& [name, t] : c.inputs) ids.push_back(g.input(name, t.shape()));
  const NodeId out = c.build(g, ids);
  for (const auto& [name, t] : c.inputs) g.bind(name, t);
  g.forward(out);
  const Tensor seed = random_tensor(rng, g.shape(out));
  g.backward(out, seed);

  for (std::size_t k = 0; k < c.inputs.size(); ++k) {
    const Tensor analytic = g.grad(ids[k]);
    auto f = [&](const Tensor& x) {
      Graph h;
      std::vector<NodeId> hid;
      for (const auto& [name, t] : c.inputs) hid.push_back(h.input(name, t.shape()));
      const NodeId o = c.build(h, hid);
      for (std::size_t j = 0; j < c.inputs.size(); ++j) h.bind(hid[j], j == k ? x : c.inputs[j].second);
      return dot(h.forward(o), seed);
    };
    const Tensor numeric = numeric_gradient(f, c.inputs[k].second);
    INFO("input " << c.inputs[k].first);
    CHECK(relative_error(analytic, numeric) < kTol);
  }
}

// Values at least `gap` away from every kink in `kinks`.
Tensor away_from(std::mt19937_64& rng, Shape shape, std::vector<double> kinks, double gap = 1e-2) {
  Tensor t = random_tensor(rng, std::move(shape));
  for (double& v : t.data()) {
    for (double k : kinks) {
      if (std::abs(v - k) < gap) v = k + (v < k ? -gap : gap) * 2.0;
    }
  }
  return t;
}

}  // namespace

TEST_SUITE("core") {
  TEST_CASE("forward examples") {
    Graph id;
    const NodeId x = id.input("x", {3});
    CHECK(id.forward(x, {{"x", Tensor::vector({1, 2, 3})}}) == Tensor::vector({1, 2, 3}));

    // relu(W2 relu(W1 x + b1) + b2) evaluated by hand at x = [1, 0].
    Graph g;
    const NodeId in = g.input("x", {2});
    const NodeId w1 = g.constant(Tensor({2, 2}, {1, -2, -1, 3}));
    const NodeId b1 = g.constant(Tensor::vector({0.5, 0.25}));
    const NodeId w2 = g.constant(Tensor({1, 2}, {2, -1}));
    const NodeId b2 = g.constant(Tensor::vector({-0.5}));
    const NodeId out = g.relu(g.affine(g.relu(g.affine(in, w1, b1)), w2, b2));
    // layer 1: [1.5, -0.75] -> relu [1.5, 0]; layer 2: 3 - 0.5 = 2.5
    CHECK(g.forward(out, {{"x", Tensor::vector({1, 0})}})[0] == doctest::Approx(2.5).epsilon(1e-15));

    Graph ce;
    const NodeId z = ce.input("z", {2});
    const NodeId t = ce.input("t", {2}, false);
    const NodeId loss = ce.softmax_cross_entropy(z, t);
    const double v = ce.forward(loss, {{"z", Tensor::vector({0, 0})}, {"t", Tensor::vector({1, 0})}})[0];
    CHECK(v == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }

  TEST_CASE("backward examples") {
    Graph g;
    const NodeId x = g.input("x", {1});
    const NodeId sq = g.mul(x, x);
    g.forward(sq, {{"x", Tensor::vector({3})}});
    g.backward(sq);
    CHECK(g.grad(x)[0] == 6.0);

    Graph c;
    const NodeId in = c.input("x", {2});
    const NodeId k = c.constant(Tensor::vector({4, 5}));
    (void)in;
    c.bind("x", Tensor::vector({1, 2}));
    c.forward(k);
    c.backward(k, Tensor::vector({1, 1}));
    CHECK(c.grad(in) == Tensor({2}));
  }

  TEST_CASE("backward before forward fails") {
    Graph g;
    const NodeId x = g.input("x", {2});
    const NodeId y = g.scale(x, 2.0);
    CHECK_THROWS_AS(g.backward(y, Tensor({2})), StateError);
  }

  TEST_CASE("shape errors surface at build time and name the node") {
    Graph g;
    const NodeId x = g.input("x", {3});
    const NodeId w = g.input("w", {2, 4});
    const NodeId b = g.input("b", {2});
    CHECK_THROWS_AS(g.affine(x, w, b), ShapeError);
    try {
      g.affine(x, w, b);
    } catch (const ShapeError& e) {
      CHECK(std::string(e.what()).find("'x'") != std::string::npos);
    }
    const NodeId img = g.input("img", {1, 3, 3});
    CHECK_THROWS_AS(g.max_pool2(img), ShapeError);
    CHECK_THROWS_AS(g.add(x, b), ShapeError);
    CHECK_THROWS_AS(g.bind("x", Tensor({4})), ShapeError);
  }

  TEST_CASE("gradient check: every op on 20 seeds") {
    for (int s = 0; s < kSeeds; ++s) {
      std::mt19937_64 rng(1000 + s);
      CAPTURE(s);
      SUBCASE("affine") {
        check_vjp({{{"x", random_tensor(rng, {2, 3})}, {"w", random_tensor(rng, {4, 6})}, {"b", random_tensor(rng, {4})}},
                   [](Graph& g, const auto& v) { return g.affine(v[0], v[1], v[2]); }},
                  rng);
      }
      SUBCASE("conv2d") {
        check_vjp({{{"x", random_tensor(rng, {2, 5, 4})},
                    {"k", random_tensor(rng, {3, 2, 3, 3})},
                    {"b", random_tensor(rng, {3})}},
                   [](Graph& g, const auto& v) { return g.conv2d(v[0], v[1], v[2]); }},
                  rng);
      }
      SUBCASE("relu") {
        check_vjp({{{"x", away_from(rng, {7}, {0.0})}}, [](Graph& g, const auto& v) { return g.relu(v[0]); }}, rng);
      }
      SUBCASE("tanh") {
        check_vjp({{{"x", random_tensor(rng, {6}, -2, 2)}}, [](Graph& g, const auto& v) { return g.tanh(v[0]); }},
                  rng);
      }
      SUBCASE("max_pool2") {
        // Distinct values so the argmax is stable under the difference step.
        Tensor x({2, 4, 4});
        std::vector<double> vals(x.size());
        for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = 0.05 * double(i);
        std::shuffle(vals.begin(), vals.end(), rng);
        for (std::size_t i = 0; i < vals.size(); ++i) x[i] = vals[i];
        check_vjp({{{"x", x}}, [](Graph& g, const auto& v) { return g.max_pool2(v[0]); }}, rng);
      }
      SUBCASE("softmax_cross_entropy") {
        Tensor t = random_tensor(rng, {5}, 0, 1);
        double sum = 0;
        for (double v : t.data()) sum += v;
        for (double& v : t.data()) v /= sum;
        check_vjp({{{"z", random_tensor(rng, {5}, -3, 3)}, {"t", t}},
                   [](Graph& g, const auto& v) { return g.softmax_cross_entropy(v[0], v[1]); }},
                  rng);
      }
      SUBCASE("add") {
        check_vjp({{{"a", random_tensor(rng, {3, 2})}, {"b", random_tensor(rng, {3, 2})}},
                   [](Graph& g, const auto& v) { return g.add(v[0], v[1]); }},
                  rng);
      }
      SUBCASE("mul") {
        check_vjp({{{"a", random_tensor(rng, {5})}, {"b", random_tensor(rng, {5})}},
                   [](Graph& g, const auto& v) { return g.mul(v[0], v[1]); }},
                  rng);
      }
      SUBCASE("scale") {
        check_vjp({{{"a", random_tensor(rng, {4})}}, [](Graph& g, const auto& v) { return g.scale(v[0], -1.7); }},
                  rng);
      }
      SUBCASE("l2_norm") {
        check_vjp({{{"a", random_tensor(rng, {6})}}, [](Graph& g, const auto& v) { return g.l2_norm(v[0]); }}, rng);
      }
      SUBCASE("clip") {
        check_vjp({{{"a", away_from(rng, {8}, {-0.4, 0.3})}},
                   [](Graph& g, const auto& v) { return g.clip(v[0], -0.4, 0.3); }},
                  rng);
      }
      SUBCASE("composite with shared inputs") {
        check_vjp({{{"x", random_tensor(rng, {1, 4, 4})},
                    {"k", random_tensor(rng, {2, 1, 3, 3})},
                    {"b", random_tensor(rng, {2})}},
                   [](Graph& g, const auto& v) {
                     const NodeId c = g.tanh(g.conv2d(v[0], v[1], v[2]));
                     return g.add(g.mul(c, c), g.scale(c, 0.5));
                   }},
                  rng);
      }
    }
  }

  TEST_CASE("linearity: backward of a sum equals the sum of backwards") {
    std::mt19937_64 rng(7);
    Graph g;
    const NodeId x = g.input("x", {4});
    const NodeId w = g.constant(random_tensor(rng, {3, 4}));
    const NodeId b = g.constant(random_tensor(rng, {3}));
    const NodeId f1 = g.l2_norm(g.tanh(g.affine(x, w, b)));
    const NodeId f2 = g.l2_norm(g.mul(x, x));
    const NodeId sum = g.add(f1, f2);
    g.bind("x", random_tensor(rng, {4}));
    g.forward(sum);
    g.backward(sum);
    const Tensor whole = g.grad(x);
    g.backward(f1);
    Tensor parts = g.grad(x);
    g.backward(f2);
    parts += g.grad(x);
    CHECK(relative_error(whole, parts) < 1e-14);
  }

  TEST_CASE("determinism: identical inputs give bit-identical results") {
    auto run = [] {
      std::mt19937_64 rng(42);
      Graph g;
      const NodeId x = g.input("x", {1, 6, 6});
      const NodeId k = g.input("k", {2, 1, 3, 3});
      const NodeId b = g.input("b", {2});
      const NodeId out = g.l2_norm(g.max_pool2(g.relu(g.conv2d(x, k, b))));
      g.bind("x", random_tensor(rng, {1, 6, 6}));
      g.bind("k", random_tensor(rng, {2, 1, 3, 3}));
      g.bind("b", random_tensor(rng, {2}));
      g.forward(out);
      g.backward(out);
      return std::make_pair(g.value(out), g.grad(k));
    };
    CHECK(run() == run());
  }

  TEST_CASE("sgd_step") {
    std::vector<Tensor> p{Tensor::vector({1})};
    std::vector<Tensor> g{Tensor::vector({2})};
    sgd_step(p, g, 0.5);
    CHECK(p[0] == Tensor::vector({0}));

    std::vector<Tensor> q{Tensor::vector({1, 1})};
    std::vector<Tensor> h{Tensor::vector({1, -1})};
    sgd_step(q, h, 0.1);
    CHECK(q[0][0] == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(q[0][1] == doctest::Approx(1.1).epsilon(1e-15));

    CHECK_THROWS_AS(sgd_step(q, h, 0.0), InvalidArgument);
    CHECK_THROWS_AS(sgd_step(q, h, -1.0), InvalidArgument);
    std::vector<Tensor> wrong{Tensor::vector({1, 2, 3})};
    CHECK_THROWS_AS(sgd_step(q, wrong, 0.1), ShapeError);
  }

  TEST_CASE("adam moves against the gradient") {
    std::vector<Tensor> p{Tensor::vector({1, -1})};
    Adam opt(0.1);
    for (int i = 0; i < 3; ++i) opt.step(p, std::vector<Tensor>{Tensor::vector({1, -1})});
    CHECK(p[0][0] < 1.0);
    CHECK(p[0][1] > -1.0);
    CHECK_THROWS_AS(Adam(0.0), InvalidArgument);
  }

  TEST_CASE("tensor invariants") {
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    Tensor t({2}, {1, std::nan("")});
    CHECK_FALSE(t.all_finite());
    CHECK(clip(Tensor::vector({-1, 0.5, 2}), 0, 1) == Tensor::vector({0, 0.5, 1}));
    CHECK(linf_norm(Tensor::vector({0.5, -2}).data()) == 2.0);
    CHECK(l2_norm(Tensor::vector({3, 4}).data()) == 5.0);
  }

  TEST_CASE("binio round-trip and truncation") {
    std::stringstream ss;
    binio::Writer w(ss);
    w.magic("TESTTEST");
    w.u32(7);
    w.f64(-0.1);
    w.str("hello");
    w.tensor(Tensor({2, 1}, {1.5, std::nextafter(1.0, 2.0)}));
    const std::string bytes = ss.str();

    std::stringstream in(bytes);
    binio::Reader r(in, "mem");
    r.expect_magic("TESTTEST");
    CHECK(r.u32() == 7);
    CHECK(r.f64() == -0.1);
    CHECK(r.str() == "hello");
    CHECK(r.tensor() == Tensor({2, 1}, {1.5, std::nextafter(1.0, 2.0)}));
    r.expect_end();

    std::stringstream cut(bytes.substr(0, bytes.size() - 3));
    binio::Reader rc(cut, "mem");
    rc.expect_magic("TESTTEST");
    rc.u32();
    rc.f64();
    rc.str();
    CHECK_THROWS_AS(rc.tensor(), DataError);

    std::stringstream bad("NOTMAGIC");
    binio::Reader rb(bad, "mem");
    CHECK_THROWS_AS(rb.expect_magic("TESTTEST"), DataError);
  }
}
