#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "bisenet/analysis.hpp"
#include "bisenet/blocks.hpp"
#include "bisenet/grad_check.hpp"
#include "bisenet/runtime.hpp"
#include "oracles.hpp"

using namespace bisenet;
namespace bl = bisenet::blocks;

namespace {

using BuildFn = std::function<NodeId(GraphBuilder&, NodeId)>;

Graph single_input_graph(int channels, const BuildFn& f) {
  GraphBuilder b;
  const NodeId in = b.input(channels);
  b.set_main_output(f(b, in));
  return std::move(b).build();
}

NodeId find(const Graph& g, const std::string& name) {
  for (const auto& n : g.nodes())
    if (n.name == name) return n.id;
  throw std::runtime_error("no node " + name);
}

Shape out_shape(const Graph& g, const Shape& in) {
  return g.infer_shapes(in)[*g.main_output()];
}

std::vector<ParamTensor<double>*> all_params(Weights<double>& w) {
  std::vector<ParamTensor<double>*> out;
  for (auto& [k, p] : w.params) out.push_back(&p);
  return out;
}

// Gradient check of a whole single-input graph in train-mode BN, over the
// input and every parameter.
double graph_grad_error(const Graph& g, const Shape& in, std::uint64_t seed) {
  Weights<double> w;
  w.init(g, seed);
  const NodeId out = *g.main_output();
  return grad_check_detailed(
             [&](const std::vector<ag::Var<double>>& xs) {
               return run_graph(g, w, xs[0], ops::BnMode::Train, {out})[out];
             },
             {oracle::random_tensor(in, seed + 1)}, all_params(w))
      .max_rel_error;
}

}  // namespace

TEST(Stem, PaperShape) {
  const Graph g = single_input_graph(3, [](GraphBuilder& b, NodeId x) {
    return bl::stem_block(b, x, 16, "stem");
  });
  EXPECT_EQ(out_shape(g, {1, 3, 512, 1024}), (Shape{1, 16, 128, 256}));
}

TEST(Stem, ZeroInputFiniteInEval) {
  const Graph g = single_input_graph(3, [](GraphBuilder& b, NodeId x) {
    return bl::stem_block(b, x, 16, "stem");
  });
  Weights<double> w;
  w.init(g, 3);
  const NodeId out = *g.main_output();
  ag::NoGradGuard guard;
  const auto y = run_graph(g, w, ag::Var<double>(Tensor<double>({1, 3, 32, 64})),
                           ops::BnMode::Eval, {out})[out];
  EXPECT_EQ(y.shape(), (Shape{1, 16, 8, 16}));
  EXPECT_TRUE(y.value().all_finite());
}

TEST(Stem, ParameterCountByHand) {
  const Graph g = single_input_graph(3, [](GraphBuilder& b, NodeId x) {
    return bl::stem_block(b, x, 16, "stem");
  });
  const std::uint64_t kernels = 3 * 16 * 9 + 16 * 8 + 8 * 16 * 9 + 32 * 16 * 9;
  const std::uint64_t bn = 2 * (16 + 8 + 16 + 16);
  EXPECT_EQ(analysis::count_params(g), kernels + bn);
}

TEST(Stem, OddChannelsRejected) {
  EXPECT_THROW(single_input_graph(3, [](GraphBuilder& b, NodeId x) {
                 return bl::stem_block(b, x, 15, "stem");
               }),
               ConfigError);
}

TEST(ContextEmbedding, ShapePreserved) {
  const Graph g = single_input_graph(128, [](GraphBuilder& b, NodeId x) {
    return bl::context_embedding(b, x, "ce");
  });
  EXPECT_EQ(out_shape(g, {1, 128, 16, 32}), (Shape{1, 128, 16, 32}));
}

TEST(ContextEmbedding, ConstantPerChannelSurvivesResidualAdd) {
  const Graph g = single_input_graph(4, [](GraphBuilder& b, NodeId x) {
    return bl::context_embedding(b, x, "ce");
  });
  Weights<double> w;
  w.init(g, 4);
  Tensor<double> x({1, 4, 5, 6});
  for (int c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < x.shape().plane(); ++i) x.plane(0, c)[i] = 0.3 * c - 0.4;
  const NodeId add = find(g, "ce.add");
  ag::NoGradGuard guard;
  const auto v = run_graph(g, w, ag::Var<double>(x), ops::BnMode::Eval, {add})[add].value();
  for (int c = 0; c < 4; ++c)
    for (std::size_t i = 1; i < v.shape().plane(); ++i)
      EXPECT_EQ(v.plane(0, c)[i], v.plane(0, c)[0]);
}

TEST(ContextEmbedding, GradientCheck) {
  const Graph g = single_input_graph(4, [](GraphBuilder& b, NodeId x) {
    return bl::context_embedding(b, x, "ce");
  });
  EXPECT_LE(graph_grad_error(g, {2, 4, 4, 4}, 5), 1e-4);
}

TEST(GeLayer, StrideOneShapes) {
  for (int e : {6, 1}) {
    const Graph g = single_input_graph(32, [e](GraphBuilder& b, NodeId x) {
      return bl::ge_layer_s1(b, x, e, "ge");
    });
    EXPECT_EQ(out_shape(g, {1, 32, 64, 128}), (Shape{1, 32, 64, 128}));
  }
}

TEST(GeLayer, StrideTwoShapes) {
  const Graph a = single_input_graph(16, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s2(b, x, 32, 6, "ge");
  });
  EXPECT_EQ(out_shape(a, {1, 16, 128, 256}), (Shape{1, 32, 64, 128}));
  const Graph c = single_input_graph(64, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s2(b, x, 128, 6, "ge");
  });
  EXPECT_EQ(out_shape(c, {1, 64, 32, 64}), (Shape{1, 128, 16, 32}));
}

TEST(GeLayer, MacsMatchClosedForm) {
  const Graph g = single_input_graph(32, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s1(b, x, 6, "ge");
  });
  const std::uint64_t hw = 64 * 128;
  const std::uint64_t want = 9ull * 32 * 192 * hw + 9ull * 1 * 192 * hw + 1ull * 192 * 32 * hw;
  analysis::CostOptions opt;
  opt.convention = analysis::Convention::MACs;
  EXPECT_EQ(analysis::count_costs(g, 64, 128, opt).totals.macs, want);
}

TEST(GeLayer, DepthwisePairHasFiveByFiveSupport) {
  const Graph g = single_input_graph(2, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s2(b, x, 2, 1, "ge");
  });
  const auto& dw1 = g.node(find(g, "ge.dw1.conv"));
  const auto& dw2 = g.node(find(g, "ge.dw2.conv"));
  ASSERT_EQ(dw1.groups, dw1.channels);
  ASSERT_EQ(dw2.groups, dw2.channels);
  // Impulse through both depthwise kernels at unit stride.
  Tensor<double> x({1, 1, 11, 11});
  x.at(0, 0, 5, 5) = 1;
  const Tensor<double> k1({1, 1, dw1.kernel, dw1.kernel}, 1.0);
  const Tensor<double> k2({1, 1, dw2.kernel, dw2.kernel}, 1.0);
  const auto y = ops::conv2d(ops::conv2d(x, k1, nullptr, {1, dw1.pad, 1}), k2, nullptr,
                             {1, dw2.pad, 1});
  int lo_h = 99, hi_h = -1, lo_w = 99, hi_w = -1;
  for (int h = 0; h < 11; ++h)
    for (int w = 0; w < 11; ++w)
      if (y.at(0, 0, h, w) != 0) {
        lo_h = std::min(lo_h, h);
        hi_h = std::max(hi_h, h);
        lo_w = std::min(lo_w, w);
        hi_w = std::max(hi_w, w);
      }
  EXPECT_EQ(hi_h - lo_h + 1, 5);
  EXPECT_EQ(hi_w - lo_w + 1, 5);
}

TEST(GeLayer, ZeroProjectionScaleReducesToRelu) {
  const Graph g = single_input_graph(4, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s1(b, x, 2, "ge");
  });
  Weights<double> w;
  w.init(g, 8);
  w.param("ge.project.bn.gamma").value.fill(0);
  const auto x = oracle::random_tensor({2, 4, 6, 6}, 9);
  const NodeId out = *g.main_output();
  ag::NoGradGuard guard;
  const auto y = run_graph(g, w, ag::Var<double>(x), ops::BnMode::Eval, {out})[out].value();
  EXPECT_EQ(y, ops::relu(x));
}

TEST(GeLayer, GradientChecks) {
  const Graph s1 = single_input_graph(4, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s1(b, x, 2, "ge");
  });
  EXPECT_LE(graph_grad_error(s1, {2, 4, 6, 6}, 10), 1e-4);
  const Graph s2 = single_input_graph(4, [](GraphBuilder& b, NodeId x) {
    return bl::ge_layer_s2(b, x, 8, 2, "ge");
  });
  EXPECT_LE(graph_grad_error(s2, {2, 4, 8, 8}, 11), 1e-4);
}

TEST(GeLayer, ResidualNeedsEqualWidths) {
  bl::BlockSpec spec{bl::BlockKind::GE1, 16, 32, 6};
  EXPECT_THROW(bl::validate(spec), ConfigError);
  spec.kind = bl::BlockKind::GE2;
  EXPECT_NO_THROW(bl::validate(spec));
  spec.expansion = 0;
  EXPECT_THROW(bl::validate(spec), ConfigError);
}

namespace {

Graph bga_graph(int c) {
  GraphBuilder b;
  const NodeId in = b.input(c);
  const NodeId sem = b.avgpool(in, 4, 4, 0, "to_semantic");
  b.set_main_output(bl::bga_layer(b, in, sem, "bga"));
  return std::move(b).build();
}

}  // namespace

TEST(Bga, PaperShape) {
  EXPECT_EQ(out_shape(bga_graph(128), {1, 128, 64, 128}), (Shape{1, 128, 64, 128}));
}

TEST(Bga, SpatialRatioMustBeFour) {
  GraphBuilder b;
  const NodeId in = b.input(8);
  const NodeId sem = b.avgpool(in, 2, 2, 0, "half");
  b.set_main_output(bl::bga_layer(b, in, sem, "bga"));
  const Graph g = std::move(b).build();
  EXPECT_THROW(g.infer_shapes({1, 8, 16, 16}), ConfigError);
}

TEST(Bga, ZeroSemanticGivesHalfGates) {
  // Separate detail and semantic inputs: semantic = 0 * detail-shaped input.
  GraphBuilder b;
  const NodeId in = b.input(4);
  const NodeId zero_scale = b.global_avgpool(in, "gap");  // multiplied by zero below
  const NodeId sem_src = b.avgpool(in, 4, 4, 0, "pool");
  const NodeId z = b.mul(sem_src, b.mul(zero_scale, zero_scale, "sq"), "sem");
  const NodeId out = bl::bga_layer(b, in, z, "bga");
  b.set_main_output(out);
  const Graph g = std::move(b).build();
  Weights<double> w;
  w.init(g, 12);
  auto x = oracle::random_tensor({1, 4, 8, 16}, 13);
  // Zero-mean channels make the global average zero, so the semantic input is 0.
  for (int c = 0; c < 4; ++c) {
    double m = 0;
    for (std::size_t i = 0; i < 128; ++i) m += x.plane(0, c)[i] / 128;
    for (std::size_t i = 0; i < 128; ++i) x.plane(0, c)[i] -= m;
  }
  const NodeId s1 = find(g, "bga.semantic_up.sigmoid");
  const NodeId s2 = find(g, "bga.semantic_keep.sigmoid");
  const NodeId d1 = find(g, "bga.detail_keep.pw");
  const NodeId d2 = find(g, "bga.detail_down.pool");
  ag::NoGradGuard guard;
  auto v = run_graph(g, w, ag::Var<double>(x), ops::BnMode::Eval, {out, s1, s2, d1, d2});
  for (double gval : v[s1].value().storage()) EXPECT_NEAR(gval, 0.5, 1e-12);
  for (double gval : v[s2].value().storage()) EXPECT_NEAR(gval, 0.5, 1e-12);

  Tensor<double> half_d1 = v[d1].value(), half_d2 = v[d2].value();
  for (auto& e : half_d1.storage()) e *= 0.5;
  for (auto& e : half_d2.storage()) e *= 0.5;
  const auto sum = ops::add(half_d1, ops::upsample_bilinear(half_d2, 4));
  const auto conv = ops::conv2d(sum, w.param("bga.out.conv.weight").value, nullptr, {1, 1, 1});
  const auto want = ops::batchnorm2d(conv, w.param("bga.out.bn.gamma").value,
                                     w.param("bga.out.bn.beta").value,
                                     w.buffers.at("bga.out.bn.running"), ops::BnMode::Eval);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(v[out].value()[i], want[i], 1e-5);
}

TEST(Bga, GradientCheck) {
  GraphBuilder b;
  const NodeId in = b.input(4);
  b.set_main_output(bl::bga_layer(b, in, b.avgpool(in, 4, 4, 0, "down"), "bga"));
  const Graph g = std::move(b).build();
  EXPECT_LE(graph_grad_error(g, {2, 4, 8, 16}, 14), 1e-4);
}

TEST(SegHead, Shapes) {
  const Graph g = single_input_graph(128, [](GraphBuilder& b, NodeId x) {
    return bl::seg_head(b, x, 1024, 19, 8, "head");
  });
  EXPECT_EQ(out_shape(g, {1, 128, 64, 128}), (Shape{1, 19, 512, 1024}));
  const Graph one = single_input_graph(8, [](GraphBuilder& b, NodeId x) {
    return bl::seg_head(b, x, 16, 1, 4, "head");
  });
  EXPECT_EQ(out_shape(one, {2, 8, 4, 4}), (Shape{2, 1, 16, 16}));
}

TEST(SegHead, ParameterCountByHand) {
  const Graph g = single_input_graph(128, [](GraphBuilder& b, NodeId x) {
    return bl::seg_head(b, x, 64, 3, 8, "head");
  });
  EXPECT_EQ(analysis::count_params(g), 3u * 3 * 128 * 64 + 2 * 64 + 64 * 3 + 3);
}

TEST(SegHead, ScaleMustBePowerOfTwo) {
  for (int s : {3, 2, 128}) {
    EXPECT_THROW(single_input_graph(8, [s](GraphBuilder& b, NodeId x) {
                   return bl::seg_head(b, x, 8, 2, s, "head");
                 }),
                 ConfigError);
  }
}

TEST(Blocks, RandomizedShapeContracts) {
  std::mt19937 rng(21);
  for (int trial = 0; trial < 40; ++trial) {
    const int h = 32 * (1 + static_cast<int>(rng() % 3));
    const int w = 32 * (1 + static_cast<int>(rng() % 3));
    const int c = 2 * (1 + static_cast<int>(rng() % 4));
    const int e = 1 + static_cast<int>(rng() % 6);
    const Graph stem = single_input_graph(3, [c](GraphBuilder& b, NodeId x) {
      return bl::stem_block(b, x, c, "s");
    });
    EXPECT_EQ(out_shape(stem, {1, 3, h, w}), (Shape{1, c, h / 4, w / 4}));
    const Graph ge1 = single_input_graph(c, [e](GraphBuilder& b, NodeId x) {
      return bl::ge_layer_s1(b, x, e, "g");
    });
    EXPECT_EQ(out_shape(ge1, {2, c, h, w}), (Shape{2, c, h, w}));
    const Graph ge2 = single_input_graph(c, [c, e](GraphBuilder& b, NodeId x) {
      return bl::ge_layer_s2(b, x, 2 * c, e, "g");
    });
    EXPECT_EQ(out_shape(ge2, {1, c, h, w}), (Shape{1, 2 * c, h / 2, w / 2}));
    const Graph ce = single_input_graph(c, [](GraphBuilder& b, NodeId x) {
      return bl::context_embedding(b, x, "ce");
    });
    EXPECT_EQ(out_shape(ce, {1, c, h, w}), (Shape{1, c, h, w}));
    EXPECT_EQ(out_shape(bga_graph(c), {1, c, h, w}), (Shape{1, c, h, w}));
  }
}
