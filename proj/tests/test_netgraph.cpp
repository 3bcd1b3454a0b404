#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "learngene/netgraph.hpp"
#include "learngene/ops.hpp"
#include "learngene/rng.hpp"
#include "support/gradcheck.hpp"

using namespace lg;

namespace {

Tensor random_batch(Shape shape, std::uint64_t seed) {
  SeededRng rng(seed);
  std::vector<float> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

void zero(Tensor& t) {
  for (auto& v : t.mutable_data()) v = 0.0f;
}

}  // namespace

TEST(ForwardLayer, TransformerBlockWithZeroedOutputProjectionsIsIdentity) {
  LayerSpec spec{LayerKind::TransformerBlock, 8, 8, Activation::Relu};
  spec.heads = 2;
  spec.hidden = 16;
  Layer layer = make_layer(spec, 3);
  zero(layer.param("proj.weight"));
  zero(layer.param("proj.bias"));
  zero(layer.param("fc2.weight"));
  zero(layer.param("fc2.bias"));
  Tensor x = random_batch({2, 5, 8}, 1);
  Tensor y = forward_layer(layer, x, false);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
}

TEST(ForwardLayer, ResidualConvWithZeroedBranchIsIdentity) {
  Layer layer = make_layer({LayerKind::ResidualConv, 3, 3, Activation::Relu}, 4);
  zero(layer.param("weight"));
  Tensor x = random_batch({2, 3, 4, 4}, 2);
  for (bool training : {true, false}) {
    Tensor y = forward_layer(layer, x, training);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y.at(i), x.at(i));
  }
}

TEST(ForwardLayer, ConvBnMatchesSlidingWindowReference) {
  Layer layer = make_layer({LayerKind::ConvBN, 1, 1, Activation::None}, 5);
  const std::vector<float> kernel{0.1f, -0.2f, 0.3f, 0.4f, 0.5f, -0.6f, 0.7f, 0.8f, -0.9f};
  std::copy(kernel.begin(), kernel.end(), layer.param("weight").mutable_data().begin());
  Tensor x = random_batch({1, 1, 4, 4}, 6);
  Tensor y = forward_layer(layer, x, false);  // running mean 0, var 1
  auto in = x.data();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          int r = i + di, c = j + dj;
          if (r < 0 || r >= 4 || c < 0 || c >= 4) continue;
          acc += kernel[(di + 1) * 3 + (dj + 1)] * in[r * 4 + c];
        }
      EXPECT_NEAR(y.at(i * 4 + j), acc / std::sqrt(1.0 + 1e-5), 1e-5);
    }
}

TEST(ForwardLayer, ShapeMismatchRejected) {
  Layer layer = make_layer({LayerKind::ConvBN, 3, 4, Activation::Relu}, 1);
  EXPECT_THROW(forward_layer(layer, random_batch({2, 2, 4, 4}, 1), false), InvalidArgument);
  Layer dense = make_layer({LayerKind::Dense, 5, 4, Activation::Relu}, 1);
  EXPECT_THROW(forward_layer(dense, random_batch({2, 6}, 1), false), InvalidArgument);
  EXPECT_THROW(make_layer({LayerKind::ResidualConv, 3, 4, Activation::Relu}, 1), InvalidArgument);
}

TEST(BuildModel, CnnChannelSequence) {
  ModelConfig cfg;
  cfg.family = Family::TinyCnn;
  cfg.depth = 3;
  cfg.widths = {8, 16, 32};
  Model m = build_model(cfg, 1);
  ASSERT_EQ(m.layers.size(), 4u);
  EXPECT_EQ(m.layers[0].spec.out_dim, 8u);
  EXPECT_EQ(m.layers[1].spec.out_dim, 16u);
  EXPECT_EQ(m.layers[2].spec.out_dim, 32u);
  EXPECT_EQ(m.layers[3].spec.kind, LayerKind::ClassifierHead);
  EXPECT_EQ(m.depth(), 3u);
}

TEST(BuildModel, SameSeedBitIdenticalParameters) {
  ModelConfig cfg;
  cfg.family = Family::TinyTransformer;
  cfg.depth = 2;
  cfg.widths = {8};
  Model a = build_model(cfg, 17), b = build_model(cfg, 17), c = build_model(cfg, 18);
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_NE(a.checksum(), c.checksum());
  auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    EXPECT_TRUE(std::equal(pa[i].data().begin(), pa[i].data().end(), pb[i].data().begin()));
}

TEST(BuildModel, DenseParameterCountByEnumeration) {
  ModelConfig cfg;
  cfg.family = Family::TinyMlp;
  cfg.depth = 1;
  cfg.widths = {8};
  cfg.num_classes = 3;
  cfg.input = {4, 1, 1};
  Model m = build_model(cfg, 1);
  std::size_t enumerated = 0;
  for (const auto& layer : m.layers)
    for (const auto& p : layer.params) enumerated += p.value.numel();
  EXPECT_EQ(enumerated, 4u * 8 + 8 + 8 * 3 + 3);
  EXPECT_EQ(m.parameter_count(), 67u);
}

TEST(BuildModel, RejectsBadArguments) {
  EXPECT_THROW(parse_family("tiny-rnn"), InvalidArgument);
  ModelConfig cfg;
  cfg.depth = 0;
  EXPECT_THROW(build_model(cfg, 1), InvalidArgument);
  cfg.depth = 2;
  cfg.widths = {1};
  EXPECT_THROW(build_model(cfg, 1), InvalidArgument);
  cfg.widths = {4, 4, 4};
  EXPECT_THROW(build_model(cfg, 1), InvalidArgument);
}

TEST(BuildModel, ParameterCountIsDeterministicFunctionOfArchitecture) {
  for (auto family : {Family::TinyMlp, Family::TinyCnn, Family::TinyResnet, Family::TinyTransformer}) {
    ModelConfig cfg;
    cfg.family = family;
    cfg.depth = 3;
    cfg.widths = {8};
    EXPECT_EQ(build_model(cfg, 1).parameter_count(), build_model(cfg, 99).parameter_count());
  }
}

TEST(ForwardCollect, TraceHasOneEntryPerLayerWithDeclaredShapes) {
  for (auto family : {Family::TinyMlp, Family::TinyCnn, Family::TinyResnet, Family::TinyTransformer}) {
    ModelConfig cfg;
    cfg.family = family;
    cfg.depth = 5;
    cfg.widths = family == Family::TinyResnet ? std::vector<std::size_t>{4, 4, 8, 8, 8} : std::vector<std::size_t>{8};
    cfg.input = {1, 8, 8};
    Model m = build_model(cfg, 2);
    Tensor batch = random_batch({4, 1, 8, 8}, 3);
    auto result = forward_collect(m, batch, true);
    ASSERT_EQ(result.trace.size(), 5u) << to_string(family);
    Shape shape = batch.shape();
    std::size_t t = 0;
    for (const auto& layer : m.layers) {
      shape = layer_output_shape(layer.spec, shape);
      if (is_counted(layer.spec.kind)) EXPECT_EQ(result.trace[t++].shape(), shape);
    }
    EXPECT_EQ(result.logits.shape(), (Shape{4, 10}));
  }
}

TEST(ForwardCollect, EvalModeIsDeterministic) {
  ModelConfig cfg;
  cfg.depth = 3;
  cfg.input = {1, 8, 8};
  Model m = build_model(cfg, 5);
  Tensor batch = random_batch({3, 1, 8, 8}, 4);
  auto a = forward_collect(m, batch, false);
  auto b = forward_collect(m, batch, false);
  EXPECT_TRUE(std::equal(a.logits.data().begin(), a.logits.data().end(), b.logits.data().begin()));
}

TEST(ForwardCollect, TraceEqualsSequentialLayerApplication) {
  ModelConfig cfg;
  cfg.family = Family::TinyTransformer;
  cfg.depth = 3;
  cfg.widths = {8};
  cfg.input = {1, 8, 8};
  Model m = build_model(cfg, 6);
  Tensor batch = random_batch({2, 1, 8, 8}, 7);
  auto result = forward_collect(m, batch, false);
  Tensor h = batch;
  std::size_t t = 0;
  for (auto& layer : m.layers) {
    h = forward_layer(layer, h, false);
    if (!is_counted(layer.spec.kind)) continue;
    auto expected = result.trace[t++].data();
    EXPECT_TRUE(std::equal(expected.begin(), expected.end(), h.data().begin()));
  }
}

TEST(ForwardCollect, RejectsEmptyOrMismatchedBatch) {
  ModelConfig cfg;
  cfg.depth = 2;
  cfg.input = {1, 8, 8};
  Model m = build_model(cfg, 1);
  EXPECT_THROW(forward_collect(m, Tensor(), false), InvalidArgument);
  EXPECT_THROW(forward_collect(m, random_batch({2, 3, 8, 8}, 1), false), InvalidArgument);
}

TEST(Gradients, WholeBlocksMatchFiniteDifferences) {
  SeededRng rng(12);
  LayerSpec spec{LayerKind::TransformerBlock, 4, 4, Activation::Relu};
  spec.heads = 2;
  spec.hidden = 6;
  Layer block = make_layer(spec, 8);
  auto fn = [&block](const std::vector<Tensor>& in) { return forward_layer(block, in[0], true); };
  std::vector<Tensor> inputs{oracle::random_tensor({2, 3, 4}, rng)};
  EXPECT_LT(oracle::gradcheck(fn, inputs, 3).worst_relative_error, 1e-3);

  Layer res = make_layer({LayerKind::ResidualConv, 2, 2, Activation::None}, 9);
  auto fn2 = [&res](const std::vector<Tensor>& in) { return forward_layer(res, in[0], true); };
  std::vector<Tensor> inputs2{oracle::random_tensor({3, 2, 3, 3}, rng)};
  EXPECT_LT(oracle::gradcheck(fn2, inputs2, 4).worst_relative_error, 1e-3);
}
