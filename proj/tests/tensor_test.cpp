#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <tuple>

#include "clinfuse/error.hpp"
#include "clinfuse/mmt_io.hpp"
#include "clinfuse/ops.hpp"
#include "helpers.hpp"

using namespace clinfuse;
using testing::random_tensor;

TEST_SUITE("tensor") {

TEST_CASE("tensor construction checks its invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, Eigen::VectorXd::Zero(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}, Eigen::VectorXd::Zero(0)), ShapeError);
  Eigen::VectorXd bad(2);
  bad << 1.0, std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Tensor({2}, bad), NumericError);
  const Tensor t = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(t.at({1, 0}) == 3.0);
  CHECK(t.numel() == 4);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("1x1 identity convolution returns its input") {
  Rng rng(1);
  const Tensor x = random_tensor(rng, {2, 3, 4, 5});
  Eigen::VectorXd w = Eigen::VectorXd::Zero(9);
  for (int c = 0; c < 3; ++c) w(c * 3 + c) = 1.0;
  const Tensor y = conv2d(x, Tensor({3, 3, 1, 1}, w), Tensor::zeros({3}));
  CHECK(y.shape() == x.shape());
  CHECK((y.value() - x.value()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("3x3 all-ones kernel over ones counts the window") {
  const Tensor x = Tensor::constant({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, Tensor::constant({1, 1, 3, 3}, 1.0), Tensor::zeros({1}), 1, 1);
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.at({0, 0, 1, 1}) == 9.0);
  for (const auto& [r, c] : std::initializer_list<std::pair<Index, Index>>{{0, 1}, {1, 0}, {1, 2}, {2, 1}}) CHECK(y.at({0, 0, r, c}) == 6.0);
  for (const auto& [r, c] : std::initializer_list<std::pair<Index, Index>>{{0, 0}, {0, 2}, {2, 0}, {2, 2}}) CHECK(y.at({0, 0, r, c}) == 4.0);
}

TEST_CASE("zero kernel yields the bias per channel") {
  Rng rng(2);
  const Tensor x = random_tensor(rng, {2, 2, 5, 5});
  const Tensor y = conv2d(x, Tensor::zeros({3, 2, 3, 3}), Tensor::from({3}, {0.5, -1.0, 2.0}), 2, 1);
  REQUIRE(y.shape() == Shape{2, 3, 3, 3});
  for (Index b = 0; b < 2; ++b) {
    for (Index c = 0; c < 3; ++c) CHECK(y.at({b, c, 1, 2}) == doctest::Approx(std::array{0.5, -1.0, 2.0}[c]));
  }
}

TEST_CASE("conv2d matches a direct sliding-window loop") {
  Rng rng(3);
  for (const auto& [stride, pad, k] : std::initializer_list<std::tuple<Index, Index, Index>>{{1, 1, 3}, {2, 1, 3}, {2, 0, 1}, {1, 0, 3}}) {
    const Tensor x = random_tensor(rng, {2, 3, 6, 7});
    const Tensor w = random_tensor(rng, {4, 3, k, k});
    const Tensor b = random_tensor(rng, {4});
    const Tensor y = conv2d(x, w, b, stride, pad);
    const Index oh = (6 + 2 * pad - k) / stride + 1, ow = (7 + 2 * pad - k) / stride + 1;
    REQUIRE(y.shape() == Shape{2, 4, oh, ow});
    double worst = 0.0;
    for (Index n = 0; n < 2; ++n) {
      for (Index o = 0; o < 4; ++o) {
        for (Index i = 0; i < oh; ++i) {
          for (Index j = 0; j < ow; ++j) {
            double acc = b.value()(o);
            for (Index c = 0; c < 3; ++c) {
              for (Index u = 0; u < k; ++u) {
                for (Index v = 0; v < k; ++v) {
                  const Index r = i * stride - pad + u, s = j * stride - pad + v;
                  if (r >= 0 && r < 6 && s >= 0 && s < 7) acc += x.at({n, c, r, s}) * w.at({o, c, u, v});
                }
              }
            }
            worst = std::max(worst, std::abs(acc - y.at({n, o, i, j})));
          }
        }
      }
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad shapes and non-finite input") {
  const Tensor x = Tensor::zeros({1, 2, 4, 4});
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 3, 3, 3}), Tensor{}), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 5, 5}), Tensor{}), ShapeError);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 2, 3, 3}), Tensor{}), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 1, 1}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("fully connected layer") {
  const Tensor x = Tensor::from({1, 2}, {1, 2});
  const Tensor y = fully_connected(x, Tensor::from({2, 2}, {1, 1, 1, -1}), Tensor::from({2}, {0, 1}));
  CHECK(y.value()(0) == 3.0);
  CHECK(y.value()(1) == 0.0);

  Rng rng(4);
  const Tensor r = random_tensor(rng, {3, 4});
  const Eigen::VectorXd eye = Eigen::MatrixXd::Identity(4, 4).reshaped();
  const Tensor id = fully_connected(r, Tensor({4, 4}, eye), Tensor::zeros({4}));
  CHECK(id.value() == r.value());

  const Tensor b = Tensor::from({3}, {1, -2, 3});
  const Tensor z = fully_connected(Tensor::zeros({2, 4}), random_tensor(rng, {3, 4}), b);
  for (Index i = 0; i < 2; ++i) {
    for (Index j = 0; j < 3; ++j) CHECK(z.at({i, j}) == b.value()(j));
  }
  CHECK_THROWS_AS(fully_connected(r, Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
}

TEST_CASE("relu") {
  const Tensor y = relu(Tensor::from({3}, {-1, 0, 2}));
  CHECK(y.value() == Tensor::from({3}, {0, 0, 2}).value());
  CHECK(relu(Tensor::constant({2, 2}, -3.0)).value().isZero(0.0));
}

TEST_CASE("batch norm examples") {
  RunningStats<double> stats = RunningStats<double>::init(1);
  NormOptions tiny_eps{0.1, 1e-300};
  const Tensor y = batch_norm_train(Tensor::from({2, 1, 1, 1}, {2, 4}), Tensor::constant({1}, 1.0),
                                    Tensor::zeros({1}), stats, tiny_eps);
  CHECK(y.value()(0) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(y.value()(1) == doctest::Approx(1.0).epsilon(1e-12));
  // running stats: mean 0.9*0 + 0.1*3, unbiased variance 2
  CHECK(stats.mean(0) == doctest::Approx(0.3));
  CHECK(stats.var(0) == doctest::Approx(0.9 + 0.1 * 2.0));

  RunningStats<double> s2 = RunningStats<double>::init(2);
  Rng rng(5);
  const Tensor x = random_tensor(rng, {3, 2, 4, 4});
  const Tensor beta = Tensor::from({2}, {0.25, -0.75});
  const Tensor g0 = batch_norm_train(x, Tensor::zeros({2}), beta, s2);
  for (Index i = 0; i < g0.numel(); ++i) CHECK(g0.value()(i) == beta.value()((i / 16) % 2));

  // Already standardized input passes through up to the epsilon effect.
  Tensor std_in = Tensor::from({4, 1, 1, 1}, {-1, 1, -1, 1});
  RunningStats<double> s3 = RunningStats<double>::init(1);
  const Tensor same = batch_norm_train(std_in, Tensor::constant({1}, 1.0), Tensor::zeros({1}), s3);
  CHECK((same.value() - std_in.value()).cwiseAbs().maxCoeff() < 1e-5);

  // Constant channel: variance 0 is absorbed by epsilon.
  RunningStats<double> s4 = RunningStats<double>::init(1);
  const Tensor flat = batch_norm_train(Tensor::constant({2, 1, 2, 2}, 3.0), Tensor::constant({1}, 1.0),
                                       Tensor::zeros({1}), s4);
  CHECK(flat.value().isZero(0.0));

  RunningStats<double> s5 = RunningStats<double>::init(1);
  CHECK_THROWS_AS(batch_norm_train(Tensor::zeros({1, 1, 1, 1}), Tensor::constant({1}, 1.0), Tensor::zeros({1}), s5),
                  ShapeError);
}

TEST_CASE("batch norm eval uses running statistics and leaves them untouched") {
  RunningStats<double> stats{Eigen::VectorXd::Constant(1, 2.0), Eigen::VectorXd::Constant(1, 4.0)};
  const Tensor y = batch_norm(Tensor::from({1, 1, 1, 2}, {2, 6}), Tensor::constant({1}, 1.0), Tensor::zeros({1}),
                              stats, NormMode::Eval, {0.1, 0.0});
  CHECK(y.value()(0) == 0.0);
  CHECK(y.value()(1) == 2.0);
  CHECK(stats.mean(0) == 2.0);
  CHECK(stats.var(0) == 4.0);
}

TEST_CASE("global average pool") {
  CHECK(global_avg_pool(Tensor::from({1, 1, 2, 2}, {1, 3, 5, 7})).item() == 4.0);
  CHECK(global_avg_pool(Tensor::constant({2, 3, 4, 5}, 2.5)).value().isConstant(2.5, 0.0));
  CHECK(global_avg_pool(Tensor::zeros({2, 3, 4, 5})).value().isZero(0.0));
}

TEST_CASE("global average pool equals direct summation on random shapes") {
  Rng rng(6);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Index b = 1 + static_cast<Index>(rng.index(4)), c = 1 + static_cast<Index>(rng.index(8));
    const Index h = 1 + static_cast<Index>(rng.index(16)), w = 1 + static_cast<Index>(rng.index(16));
    const Tensor x = random_tensor(rng, {b, c, h, w});
    const Tensor y = global_avg_pool(x);
    for (Index i = 0; i < b; ++i) {
      for (Index j = 0; j < c; ++j) {
        double s = 0.0;
        for (Index r = 0; r < h; ++r) {
          for (Index q = 0; q < w; ++q) s += x.at({i, j, r, q});
        }
        worst = std::max(worst, std::abs(s / static_cast<double>(h * w) - y.at({i, j})));
      }
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("channel scale") {
  Rng rng(7);
  const Tensor x = random_tensor(rng, {2, 3, 4, 4});
  CHECK(channel_scale(x, Tensor::constant({2, 3}, 1.0)).value() == x.value());
  CHECK(channel_scale(x, Tensor::zeros({2, 3})).value().isZero(0.0));
  Eigen::VectorXd v(8);
  v << 3, 3, 3, 3, 5, 5, 5, 5;
  const Tensor y = channel_scale(Tensor({1, 2, 2, 2}, v), Tensor::from({1, 2}, {2, -1}));
  for (Index i = 0; i < 4; ++i) {
    CHECK(y.value()(i) == 6.0);
    CHECK(y.value()(4 + i) == -5.0);
  }
  CHECK_THROWS_AS(channel_scale(x, Tensor::zeros({2, 2})), ShapeError);
}

TEST_CASE("concat and slice channels") {
  const Tensor a = Tensor::constant({2, 1, 3, 3}, 1.0);
  const Tensor b = Tensor::constant({2, 1, 3, 3}, 2.0);
  const Tensor ab = concat_channels(a, b);
  REQUIRE(ab.shape() == Shape{2, 2, 3, 3});
  CHECK(slice_channels(ab, 0, 1).value().isConstant(1.0, 0.0));
  CHECK(slice_channels(ab, 1, 1).value().isConstant(2.0, 0.0));
  CHECK(concat_channels(a, Tensor{}).value() == a.value());

  Rng rng(8);
  const Tensor p = random_tensor(rng, {3, 2, 4, 5}), q = random_tensor(rng, {3, 5, 4, 5});
  const Tensor pq = concat_channels(p, q);
  CHECK(slice_channels(pq, 0, 2).value() == p.value());
  CHECK(slice_channels(pq, 2, 5).value() == q.value());
  const Tensor v1 = random_tensor(rng, {2, 3}), v2 = random_tensor(rng, {2, 4});
  const Tensor v12 = concat_channels(v1, v2);
  CHECK(v12.shape() == Shape{2, 7});
  CHECK(v12.at({1, 3}) == v2.at({1, 0}));
  CHECK_THROWS_AS(concat_channels(p, random_tensor(rng, {3, 2, 4, 4})), ShapeError);
}

TEST_CASE("softmax examples and properties") {
  const Tensor u = softmax(Tensor::from({1, 2}, {0, 0}));
  CHECK(u.value()(0) == 0.5);
  CHECK(u.value()(1) == 0.5);
  const Tensor t = softmax(Tensor::from({1, 2}, {std::numbers::ln2, 0}));
  CHECK(t.value()(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  CHECK(t.value()(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  const Tensor big = softmax(Tensor::from({1, 2}, {1000, 0}));
  CHECK(big.value().allFinite());
  CHECK(big.value()(0) == doctest::Approx(1.0));

  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor(rng, {4, 5}, false, 5.0);
    const Tensor p = softmax(x);
    const Tensor shifted = softmax(Tensor(x.shape(), (x.value().array() + 17.25).matrix()));
    for (Index b = 0; b < 4; ++b) {
      double s = 0.0;
      Index am_x = 0, am_p = 0;
      for (Index j = 0; j < 5; ++j) {
        s += p.at({b, j});
        CHECK(p.at({b, j}) > 0.0);
        CHECK(p.at({b, j}) < 1.0);
        if (x.at({b, j}) > x.at({b, am_x})) am_x = j;
        if (p.at({b, j}) > p.at({b, am_p})) am_p = j;
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
      CHECK(am_x == am_p);
    }
    CHECK((shifted.value() - p.value()).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("cross entropy") {
  const std::vector<int> zero{0};
  CHECK(cross_entropy_loss(Tensor::from({1, 2}, {1, 0}), zero).item() == doctest::Approx(0.0));
  const std::vector<int> one{1};
  CHECK(cross_entropy_loss(Tensor::from({1, 2}, {0.5, 0.5}), one).item() ==
        doctest::Approx(0.693147).epsilon(1e-6));
  // Saturated probability is clamped, not -log(0).
  CHECK(cross_entropy_loss(Tensor::from({1, 2}, {1, 0}), one).item() == doctest::Approx(-std::log(1e-12)));
  const std::vector<int> bad{2};
  CHECK_THROWS_AS(cross_entropy_loss(Tensor::from({1, 2}, {0.5, 0.5}), bad), std::out_of_range);
  CHECK_THROWS_AS(cross_entropy_loss(Tensor::from({1, 2}, {0.5, 0.6}), zero), ShapeError);
}

TEST_CASE("MMT1 round trip and byte layout") {
  Rng rng(10);
  const Tensor t = random_tensor(rng, {2, 3, 1});
  std::stringstream buf;
  write_mmt(buf, t);
  const std::string bytes = buf.str();
  REQUIRE(bytes.size() == mmt_encoded_size(t.shape()));
  CHECK(bytes.substr(0, 4) == "MMT1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 3);
  CHECK(static_cast<unsigned char>(bytes[5]) == 2);  // little-endian u32 dim 2
  CHECK(bytes[6] == 0);
  const MmtBlob back = read_mmt(buf);
  CHECK(back.shape == t.shape());
  CHECK(back.values == t.value());

  std::stringstream trunc(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_AS(read_mmt(trunc), FormatError);
  std::stringstream magic("MMT2" + bytes.substr(4));
  CHECK_THROWS_AS(read_mmt(magic), FormatError);
}

}  // TEST_SUITE
