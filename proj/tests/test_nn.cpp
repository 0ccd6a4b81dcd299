#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "evasion/dataset.hpp"
#include "evasion/model_io.hpp"
#include "evasion/nn.hpp"
#include "evasion/preprocess.hpp"
#include "evasion/train.hpp"

namespace fs = std::filesystem;
using namespace evasion;

namespace {

Network identity_net(std::size_t n) {
  DenseLayer layer;
  layer.inputs = n;
  layer.outputs = n;
  layer.weights.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) layer.weights[i * n + i] = 1.0;
  layer.bias.assign(n, 0.0);
  return Network(Shape{1, 1, n}, {layer});
}

Tensor random_image(Shape s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t(s);
  for (double& v : t.values()) v = u(rng);
  return t;
}

double cross_entropy(const Network& net, const Tensor& x, std::size_t y) {
  return -std::log(forward(net, x)[y]);
}

Network trained_blob_mlp() {
  BlobSpec spec;
  spec.seed = 11;
  const LabeledDataset data = make_blobs(spec);
  Network net = make_mlp(data.input_shape, {32, 32}, 3, Activation::relu, 5);
  return train_sgd(std::move(net), data, TrainConfig{0.1, 60, 16, 3});
}

}  // namespace

TEST(Forward, ZeroLogitsGiveUniformPair) {
  const Network net = identity_net(2);
  const auto p = forward(net, Tensor(Shape{1, 1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Forward, ProbabilitiesSumToOne) {
  std::mt19937_64 rng(1);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Network net = make_mlp(Shape{1, 4, 4}, {8, 6}, 5, seed % 2 ? Activation::tanh : Activation::relu, seed);
    const auto p = forward(net, random_image(net.input_shape(), rng));
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-6);
  }
}

TEST(Forward, ExtremeLogitsStayFinite) {
  Network net = identity_net(3);
  const auto p = forward(net, Tensor(Shape{1, 1, 3}, {1.0, 0.0, 0.0}));
  for (double v : p) EXPECT_TRUE(std::isfinite(v));
  auto& layer = net.mutable_layers()[0];
  for (double& w : layer.weights) w *= 1e4;
  const auto q = forward(net, Tensor(Shape{1, 1, 3}, {1.0, 0.0, 0.0}));
  EXPECT_NEAR(q[0], 1.0, 1e-12);
  for (double v : q) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, TrainedBlobMlpRecognisesCentroid) {
  const Network net = trained_blob_mlp();
  // Class-0 centroid: angle 0 on the circle, mapped like the generator does.
  BlobSpec spec;
  spec.seed = 11;
  const LabeledDataset data = make_blobs(spec);
  double cx = 0.0, cy = 0.0;
  std::size_t n = 0;
  for (const auto& it : data.items) {
    if (it.label != 0) continue;
    cx += it.image[0];
    cy += it.image[1];
    ++n;
  }
  const Tensor centroid(Shape{1, 1, 2}, {cx / n, cy / n});
  EXPECT_EQ(argmax(forward(net, centroid)), 0u);
  const auto z = logits(net, centroid);
  EXPECT_GT(z[0], z[1]);
  EXPECT_GT(z[0], z[2]);
}

TEST(Forward, ShapeMismatchThrows) {
  const Network net = identity_net(3);
  EXPECT_THROW(forward(net, Tensor(Shape{1, 1, 4})), DimensionError);
  EXPECT_THROW(input_gradient(net, Tensor(Shape{1, 1, 3}), 3), DomainError);
}

TEST(Logits, IdentityNetAtZero) {
  const auto z = logits(identity_net(4), Tensor(Shape{1, 1, 4}));
  for (double v : z) EXPECT_EQ(v, 0.0);
}

TEST(Logits, SoftmaxOfLogitsIsForward) {
  std::mt19937_64 rng(3);
  const Network net = make_mlp(Shape{1, 3, 3}, {7}, 4, Activation::tanh, 9);
  const Tensor x = random_image(net.input_shape(), rng);
  const auto a = softmax(logits(net, x));
  const auto b = forward(net, x);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);
}

TEST(InputGradient, ZeroWeightsGiveZeroGradient) {
  Network net = make_mlp(Shape{1, 2, 3}, {4}, 3, Activation::relu, 1);
  for (auto& layer : net.mutable_layers()) std::fill(layer.weights.begin(), layer.weights.end(), 0.0);
  const Tensor g = input_gradient(net, Tensor(Shape{1, 2, 3}, 0.3), 1);
  for (double v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(InputGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(7);
  const double h = 1e-4;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    const Activation act = trial % 2 ? Activation::tanh : Activation::relu;
    const Network net = make_mlp(Shape{1, 8, 8}, {16, 12}, 5, act, 100 + trial);
    const Tensor x = random_image(net.input_shape(), rng);
    const std::size_t y = trial % 5;
    const Tensor g = input_gradient(net, x, y);
    std::uniform_int_distribution<std::size_t> coord(0, x.size() - 1);
    for (int k = 0; k < 64; ++k) {
      const std::size_t i = coord(rng);
      Tensor plus = x, minus = x;
      plus[i] += h;
      minus[i] -= h;
      const double fd = (cross_entropy(net, plus, y) - cross_entropy(net, minus, y)) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-6});
      EXPECT_LT(std::abs(fd - g[i]) / denom, 1e-3) << "trial " << trial << " coord " << i;
    }
  }
}

TEST(InputGradient, LinearTwoClassSignPattern) {
  // Scores (w.x, 0): dCE/dx for class 0 is -(1 - p0) w, for class 1 it is p0 w.
  DenseLayer layer;
  layer.inputs = 4;
  layer.outputs = 2;
  layer.weights = {0.5, -1.0, 2.0, -0.25, 0.0, 0.0, 0.0, 0.0};
  layer.bias = {0.0, 0.0};
  const Network net(Shape{1, 1, 4}, {layer});
  const Tensor x(Shape{1, 1, 4}, {0.2, 0.4, 0.6, 0.8});
  const Tensor g0 = input_gradient(net, x, 0);
  const Tensor g1 = input_gradient(net, x, 1);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(sign(g0[i]), -sign(layer.weights[i]));
    EXPECT_EQ(sign(g1[i]), sign(layer.weights[i]));
  }
}

TEST(TrainSgd, BlobsReachHighAccuracy) {
  BlobSpec spec;
  spec.seed = 11;
  const LabeledDataset data = make_blobs(spec);
  ASSERT_EQ(data.size(), 300u);
  EXPECT_GE(accuracy(trained_blob_mlp(), data), 0.95);
}

TEST(TrainSgd, RejectsBadConfig) {
  BlobSpec spec;
  const LabeledDataset data = make_blobs(spec);
  const Network net = make_mlp(data.input_shape, {8}, 3, Activation::relu, 1);
  EXPECT_THROW(train_sgd(net, data, TrainConfig{0.1, 0, 16, 1}), ArgumentError);
  EXPECT_THROW(train_sgd(net, data, TrainConfig{0.0, 5, 16, 1}), ArgumentError);
  EXPECT_THROW(train_sgd(net, data, TrainConfig{0.1, 5, 0, 1}), ArgumentError);
  EXPECT_THROW(train_sgd(net, data, TrainConfig{0.1, 5, 16, 1, 1.0}), ArgumentError);
  EXPECT_THROW(train_sgd(net, LabeledDataset{}, TrainConfig{}), ArgumentError);
}

TEST(TrainSgd, SameSeedIsBitwiseIdentical) {
  BlobSpec spec;
  const LabeledDataset data = make_blobs(spec);
  const Network net = make_mlp(data.input_shape, {16}, 3, Activation::tanh, 4);
  const TrainConfig cfg{0.1, 5, 8, 21, 0.5};
  EXPECT_TRUE(train_sgd(net, data, cfg) == train_sgd(net, data, cfg));
}

TEST(ModelIo, RoundTripPreservesLogits) {
  const Network net = trained_blob_mlp();
  const fs::path path = fs::temp_directory_path() / "evasion_test_model.json";
  save_model(net, path);
  const Network back = load_model(path);
  EXPECT_TRUE(back == net);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10; ++i) {
    const Tensor x = random_image(net.input_shape(), rng);
    EXPECT_EQ(logits(net, x), logits(back, x));
  }
  fs::remove(path);
}

TEST(ModelIo, TruncatedDocumentIsParseError) {
  const std::string text = model_to_json(trained_blob_mlp()).dump();
  EXPECT_THROW(parse_model(text.substr(0, text.size() / 2)), ParseError);
}

TEST(ModelIo, WrongVersionIsRejected) {
  auto j = model_to_json(identity_net(2));
  j["version"] = 2;
  try {
    model_from_json(j);
    FAIL() << "expected UnsupportedVersionError";
  } catch (const UnsupportedVersionError& e) {
    EXPECT_EQ(e.version(), 2);
  }
}

TEST(ModelIo, InconsistentLayersAreParseErrors) {
  auto j = model_to_json(make_mlp(Shape{1, 1, 3}, {4}, 2, Activation::relu, 1));
  j["layers"][1]["b"] = {0.0, 0.0, 0.0};
  EXPECT_THROW(model_from_json(j), ParseError);
  auto k = model_to_json(identity_net(2));
  k["layers"][0]["act"] = "sigmoid";
  EXPECT_THROW(model_from_json(k), ParseError);
  EXPECT_THROW(load_model("/nonexistent/model.json"), IoError);
}

TEST(Resize, SameSizeIsBitIdentical) {
  std::mt19937_64 rng(2);
  const Tensor x = random_image(Shape{2, 5, 7}, rng);
  EXPECT_TRUE(resize_bilinear(x, 5, 7) == x);
}

TEST(Resize, ConstantStaysConstant) {
  const Tensor out = resize_bilinear(Tensor(Shape{1, 16, 16}, 0.37), 20, 11);
  EXPECT_EQ(out.shape(), (Shape{1, 20, 11}));
  for (double v : out.values()) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(Resize, CheckerboardCentre) {
  const Tensor board(Shape{1, 2, 2}, {0.0, 1.0, 1.0, 0.0});
  const Tensor out = resize_bilinear(board, 3, 3);
  EXPECT_DOUBLE_EQ(out.at(0, 1, 1), 0.5);
}

TEST(Resize, AdjointSatisfiesDotProductIdentity) {
  std::mt19937_64 rng(4);
  const Shape src{1, 16, 16};
  const Tensor x = random_image(src, rng);
  const Tensor y = random_image(Shape{1, 20, 20}, rng);
  const double lhs = dot(resize_bilinear(x, 20, 20).values(), y.values());
  const double rhs = dot(x.values(), resize_bilinear_adjoint(y, src).values());
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST(Preprocess, PullbackMatchesFiniteDifferenceThroughResize) {
  std::mt19937_64 rng(8);
  const Network net = make_mlp(Shape{1, 20, 20}, {12}, 4, Activation::tanh, 6);
  const Preprocessor pre = Preprocessor::to_native(Shape{1, 16, 16}, net.input_shape());
  const Tensor x = random_image(Shape{1, 16, 16}, rng);
  const Tensor g = pre.pullback(input_gradient(net, pre.apply(x), 2), x.shape());
  const double h = 1e-5;
  for (std::size_t i : {0u, 17u, 100u, 255u}) {
    Tensor a = x, b = x;
    a[i] += h;
    b[i] -= h;
    const double fd = (cross_entropy(net, pre.apply(a), 2) - cross_entropy(net, pre.apply(b), 2)) / (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-6 + 1e-4 * std::abs(fd));
  }
}

TEST(Preprocess, RejectsBadTargets) {
  EXPECT_THROW(Preprocessor({ResizeOp{0, 4}}), ArgumentError);
  EXPECT_THROW(Preprocessor::to_native(Shape{1, 4, 4}, Shape{3, 4, 4}), DimensionError);
  EXPECT_THROW(resize_bilinear(Tensor(Shape{1, 2, 2}), 0, 3), DimensionError);
}
