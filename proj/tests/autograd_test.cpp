#include <algorithm>
#include <cmath>
#include <functional>

#include "clinfuse/gradcheck.hpp"
#include "clinfuse/ops.hpp"
#include "helpers.hpp"

using namespace clinfuse;
using testing::random_tensor;

namespace {

using LossFn = std::function<Tensor(const Tensor&)>;

}  // namespace

TEST_SUITE("autograd") {

TEST_CASE("sum gives a ones gradient") {
  Tensor x = Tensor::from({2, 3}, {1, -2, 3, 4, 5, -6}, true);
  backward(sum(x));
  CHECK(x.grad().isOnes(0.0));
}

TEST_CASE("x times GAP(x) on a single element differentiates to 2a") {
  for (const double a : {-1.5, 0.25, 3.0}) {
    Tensor x = Tensor::from({1, 1, 1, 1}, {a}, true);
    const Tensor loss = sum(channel_scale(x, global_avg_pool(x)));
    CHECK(loss.item() == doctest::Approx(a * a));
    backward(loss);
    CHECK(x.grad()(0) == doctest::Approx(2.0 * a).epsilon(1e-14));
    const auto res = finite_difference_check<double>(
        [&](const Tensor&) { return sum(channel_scale(x, global_avg_pool(x))); }, x);
    CHECK(res.max_relative_error < 1e-8);
  }
}

TEST_CASE("fan-out accumulates") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(add(x, x)));
  CHECK(x.grad().isConstant(2.0, 0.0));
  // Repeated backward accumulates into leaves.
  backward(sum(x));
  CHECK(x.grad().isConstant(3.0, 0.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward needs recorded provenance and a scalar") {
  Tensor leaf = Tensor::from({1}, {2.0}, true);
  CHECK_THROWS_AS(backward(leaf), std::logic_error);
  const Tensor constant = Tensor::from({1}, {2.0});
  CHECK_THROWS_AS(backward(relu(constant)), std::logic_error);
  Tensor v = Tensor::from({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(relu(v)), ShapeError);
  CHECK_THROWS_AS(backward(Tensor{}), ShapeError);
}

TEST_CASE("no-grad guard stops recording") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    NoGradGuard guard;
    const Tensor y = sum(x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.is_leaf());
  }
  CHECK(sum(x).requires_grad());
}

TEST_CASE("computation record is topologically ordered") {
  Rng rng(1);
  Tensor x = random_tensor(rng, {2, 3}, true);
  Tensor w = random_tensor(rng, {4, 3}, true);
  const Tensor h = relu(fully_connected(x, w, Tensor::zeros({4})));
  const Tensor loss = sum(add(h, h));
  const auto record = ComputationRecord<double>::trace(loss);
  REQUIRE_FALSE(record.empty());
  CHECK(record.nodes().back() == loss.node_ptr().get());
  std::vector<const TensorNode<double>*> seen;
  for (const auto* n : record.nodes()) {
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad) CHECK(std::find(seen.begin(), seen.end(), in.get()) != seen.end());
    }
    seen.push_back(n);
  }
  CHECK(seen.size() == 6);  // x, w, fc, relu, add, sum
}

TEST_CASE("backward is deterministic") {
  Rng rng(2);
  Tensor x = random_tensor(rng, {2, 3, 5, 5}, true);
  Tensor w = random_tensor(rng, {4, 3, 3, 3}, true);
  auto run = [&] {
    x.zero_grad();
    w.zero_grad();
    backward(sum(relu(conv2d(x, w, Tensor{}, 1, 1))));
    return std::pair{x.grad(), w.grad()};
  };
  const auto a = run(), b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("per-op gradients match finite differences") {
  Rng rng(3);
  auto check = [](const char* name, Tensor x, const LossFn& f, double tol = 1e-7) {
    const auto res = finite_difference_check<double>(f, x);
    INFO(name << " worst index " << res.worst_index << " analytic " << res.analytic << " numeric " << res.numeric);
    CHECK(res.max_relative_error < tol);
  };

  SUBCASE("conv2d input, weight and bias") {
    Tensor x = random_tensor(rng, {2, 2, 5, 5}, true);
    Tensor w = random_tensor(rng, {3, 2, 3, 3}, true);
    Tensor b = random_tensor(rng, {3}, true);
    Tensor mix = random_tensor(rng, {2, 3});
    for (const auto& [stride, pad] : std::initializer_list<std::pair<int, int>>{{1, 1}, {2, 1}, {1, 0}}) {
      auto f = [&, stride, pad](const Tensor&) {
        return sum(global_avg_pool(channel_scale(conv2d(x, w, b, stride, pad), mix)));
      };
      check("conv x", x, f);
      check("conv w", w, f);
      check("conv b", b, f);
    }
  }
  SUBCASE("fully connected") {
    Tensor x = random_tensor(rng, {3, 4}, true);
    Tensor w = random_tensor(rng, {5, 4}, true);
    Tensor b = random_tensor(rng, {5}, true);
    Tensor r = random_tensor(rng, {5, 1});
    auto f = [&](const Tensor&) {
      return sum(fully_connected(fully_connected(x, w, b), Tensor({1, 5}, r.value()), Tensor::zeros({1})));
    };
    check("fc x", x, f);
    check("fc w", w, f);
    check("fc b", b, f);
  }
  SUBCASE("relu and sigmoid") {
    Tensor x = random_tensor(rng, {2, 6}, true);
    Tensor r = random_tensor(rng, {1, 6});
    auto f = [&](const Tensor&) {
      return sum(fully_connected(add(relu(x), sigmoid(x)), Tensor({1, 6}, r.value()), Tensor::zeros({1})));
    };
    check("relu+sigmoid", x, f);
  }
  SUBCASE("batch norm in both modes") {
    Tensor x = random_tensor(rng, {3, 2, 3, 3}, true);
    Tensor g = random_tensor(rng, {2}, true);
    Tensor be = random_tensor(rng, {2}, true);
    Tensor mix = random_tensor(rng, {3, 2});
    RunningStats<double> stats = RunningStats<double>::init(2);
    for (const NormMode mode : {NormMode::Train, NormMode::Eval}) {
      auto f = [&, mode](const Tensor&) {
        RunningStats<double> scratch = stats;
        // Quadratic in y: a linear readout of normalized values has near-zero gradient in x.
        const Tensor y = batch_norm(x, g, be, scratch, mode);
        return sum(global_avg_pool(channel_scale(channel_scale(y, mix), global_avg_pool(y))));
      };
      check("bn x", x, f, 1e-6);
      check("bn gamma", g, f, 1e-6);
      check("bn beta", be, f, 1e-6);
    }
  }
  SUBCASE("pool, channel scale, concat, slice") {
    Tensor a = random_tensor(rng, {2, 2, 3, 3}, true);
    Tensor b = random_tensor(rng, {2, 3, 3, 3}, true);
    Tensor s = random_tensor(rng, {2, 5}, true);
    Tensor mix = random_tensor(rng, {2, 2});
    auto f = [&](const Tensor&) {
      const Tensor ab = channel_scale(concat_channels(a, b), s);
      const Tensor piece = slice_channels(ab, 1, 2);
      return sum(global_avg_pool(channel_scale(piece, mix)));
    };
    check("concat a", a, f);
    check("concat b", b, f);
    check("scale", s, f);
  }
  SUBCASE("softmax then cross entropy") {
    for (int trial = 0; trial < 10; ++trial) {
      Tensor logits = random_tensor(rng, {4, 3}, true, 2.0);
      const std::vector<int> labels{0, 2, 1, 2};
      auto f = [&](const Tensor&) { return cross_entropy_loss(softmax(logits), labels); };
      check("softmax-ce", logits, f, 1e-6);
    }
  }
}

}  // TEST_SUITE
