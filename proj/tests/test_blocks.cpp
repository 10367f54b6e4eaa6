#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "ann/blocks.hpp"
#include "oracles.hpp"

using namespace ann;

namespace {

Tensor random(Dims dims, std::uint64_t seed) { return seeded_fill(std::move(dims), seed, Distribution::uniform_pm1); }

BlockConfig config(std::size_t c, std::size_t e, Normalization n = Normalization::softmax,
                   Combine combine = Combine::concat, bool shared = false, bool bias = true) {
  BlockConfig cfg;
  cfg.in_channels = c;
  cfg.embed_channels = e;
  cfg.normalization = n;
  cfg.combine = combine;
  cfg.share_key_value = shared;
  cfg.bias = bias;
  return cfg;
}

// Larger weights than the default init so attention rows are far from uniform.
BlockWeights strong_weights(const BlockConfig& cfg, std::uint64_t seed) {
  BlockWeights w = init_weights(cfg, seed);
  auto boost = [](Projection& p) {
    p.weight = scale(p.weight, 40.0);
    if (p.bias) p.bias = scale(*p.bias, 40.0);
  };
  boost(w.phi);
  boost(w.theta);
  if (w.own_gamma) boost(*w.own_gamma);
  boost(w.out);
  return w;
}

bool spatially_constant(const Tensor& y, double tol) {
  const Shape3 s = y.shape3();
  for (std::size_t c = 0; c < s.channels; ++c)
    for (std::size_t p = 0; p < s.positions(); ++p)
      if (std::abs(y[c * s.positions() + p] - y[c * s.positions()]) > tol) return false;
  return true;
}

Tensor constant_map(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  const Tensor v = random({c}, seed);
  Tensor x({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) x[ch * h * w + p] = v[ch];
  return x;
}

}  // namespace

TEST(NbForward, SinglePositionDoublesInput) {
  BlockConfig cfg = config(1, 1, Normalization::softmax, Combine::residual, false, false);
  const Projection one{Tensor::full({1, 1}, 1.0), std::nullopt};
  const BlockWeights w{one, one, one, one};
  const Tensor y = nb_forward(from_values({1, 1, 1}, {3}), cfg, w);
  EXPECT_EQ(y, from_values({1, 1, 1}, {6}));
}

TEST(NbForward, ZeroValuePathLeavesInput) {
  BlockConfig cfg = config(3, 2, Normalization::softmax, Combine::residual, false, false);
  BlockWeights w = init_weights(cfg, 4);
  w.own_gamma->weight = Tensor({2, 3});
  const Tensor x = random({3, 4, 5}, 5);
  EXPECT_EQ(nb_forward(x, cfg, w), x);
}

TEST(NbForward, MatchesStraightLineOracle) {
  const BlockConfig cfg = config(4, 3);
  const BlockWeights w = strong_weights(cfg, 7);
  const Tensor x = random({4, 3, 3}, 7);
  const Tensor y = nb_forward(x, cfg, w);
  ASSERT_EQ(y.dims(), (Dims{8, 3, 3}));
  EXPECT_LT(oracle::max_abs_diff(oracle::block(x, x, cfg, w), y.reshaped({8, 9})), 1e-10);
}

TEST(NbForward, MatchesOracleInEveryRegime) {
  for (auto n : {Normalization::softmax, Normalization::rescale, Normalization::none})
    for (auto combine : {Combine::residual, Combine::concat})
      for (bool shared : {false, true}) {
        const BlockConfig cfg = config(3, 2, n, combine, shared);
        const BlockWeights w = strong_weights(cfg, 8);
        const Tensor x = random({3, 2, 4}, 9);
        const Tensor y = nb_forward(x, cfg, w);
        EXPECT_LT(oracle::max_abs_diff(oracle::block(x, x, cfg, w), y.reshaped({y.dim(0), 8})), 1e-10)
            << to_string(n) << " " << to_string(combine) << " shared=" << shared;
      }
}

TEST(FnbForward, MatchesStraightLineOracle) {
  BlockConfig cfg = config(3, 4);
  cfg.low_channels = 5;
  const BlockWeights w = strong_weights(cfg, 10);
  const FusionInputs in{random({3, 2, 2}, 11), random({5, 4, 4}, 12)};
  const Tensor y = fnb_forward(in, cfg, w);
  ASSERT_EQ(y.dims(), (Dims{6, 2, 2}));
  EXPECT_LT(oracle::max_abs_diff(oracle::block(in.high, in.low, cfg, w), y.reshaped({6, 4})), 1e-10);
}

TEST(ApnbForward, MatchesPyramidOracle) {
  BlockConfig cfg = config(3, 2);
  cfg.sampler = SamplerSpec::pyramid_average({1, 2, 3});
  const BlockWeights w = strong_weights(cfg, 13);
  const Tensor x = random({3, 5, 4}, 14);
  const std::vector<std::size_t> levels{1, 2, 3};
  EXPECT_LT(oracle::max_abs_diff(oracle::block(x, x, cfg, w, &levels), apnb_forward(x, cfg, w).reshaped({6, 20})),
            1e-10);
}

TEST(AfnbForward, MatchesPyramidOracle) {
  BlockConfig cfg = config(2, 3, Normalization::softmax, Combine::concat, true);
  cfg.low_channels = 4;
  cfg.sampler = SamplerSpec::pyramid_average({1, 2});
  const BlockWeights w = strong_weights(cfg, 15);
  const FusionInputs in{random({2, 3, 3}, 16), random({4, 5, 5}, 17)};
  const std::vector<std::size_t> levels{1, 2};
  EXPECT_LT(oracle::max_abs_diff(oracle::block(in.high, in.low, cfg, w, &levels), afnb_forward(in, cfg, w).reshaped({4, 9})),
            1e-10);
}

TEST(ApnbForward, IdentitySamplerEqualsNb) {
  BlockConfig cfg = config(3, 2);
  const BlockWeights w = strong_weights(cfg, 18);
  const Tensor x = random({3, 4, 3}, 19);
  BlockConfig sampled = cfg;
  sampled.sampler = SamplerSpec::identity();
  EXPECT_LT(max_abs_diff(apnb_forward(x, sampled, w), nb_forward(x, cfg, w)), 1e-12);
}

TEST(AfnbForward, IdentitySamplerEqualsFnb) {
  BlockConfig cfg = config(3, 2);
  cfg.low_channels = 2;
  const BlockWeights w = strong_weights(cfg, 20);
  const FusionInputs in{random({3, 2, 3}, 21), random({2, 4, 4}, 22)};
  BlockConfig sampled = cfg;
  sampled.sampler = SamplerSpec::identity();
  EXPECT_LT(max_abs_diff(afnb_forward(in, sampled, w), fnb_forward(in, cfg, w)), 1e-12);
}

TEST(ApnbForward, ConstantInputGivesConstantOutput) {
  BlockConfig cfg = config(3, 2);
  cfg.sampler = SamplerSpec::pyramid_average({1, 3, 6, 8});
  const BlockWeights w = strong_weights(cfg, 23);
  EXPECT_TRUE(spatially_constant(apnb_forward(constant_map(3, 9, 7, 24), cfg, w), 1e-12));
}

TEST(ApnbForward, TrainingSizeSimilarityShape) {
  BlockConfig cfg = config(1, 1);
  cfg.sampler = SamplerSpec::pyramid_average({1, 3, 6, 8});
  const BlockWeights w = init_weights(cfg, 25);
  const Tensor x = random({1, 96, 96}, 26);
  const AttentionTrace t = attention_forward(x, x, cfg, w, &*cfg.sampler);
  EXPECT_EQ(t.similarity.dims(), (Dims{9216, 110}));
}

TEST(FnbForward, SameInputsReproduceNbAggregation) {
  const BlockConfig cfg = config(3, 2);
  const BlockWeights w = strong_weights(cfg, 27);
  const Tensor x = random({3, 3, 4}, 28);
  const AttentionTrace nb = attention_forward(x, x, cfg, w, nullptr);
  const Tensor fnb = fnb_forward({x, x}, cfg, w);
  EXPECT_LT(max_abs_diff(fnb, nb.output), 1e-12);
  EXPECT_LT(max_abs_diff(attention_forward(x, x, cfg, w, nullptr).aggregated, nb.aggregated), 1e-12);
}

TEST(FnbForward, SingleKeyBroadcastsItsValue) {
  BlockConfig cfg = config(2, 3);
  cfg.low_channels = 4;
  const BlockWeights w = strong_weights(cfg, 29);
  const Tensor high = random({2, 3, 3}, 30), low = random({4, 1, 1}, 31);
  const AttentionTrace t = attention_forward(high, low, cfg, w, nullptr);
  for (double a : t.attention.data()) EXPECT_DOUBLE_EQ(a, 1.0);
  for (std::size_t q = 0; q < 9; ++q)
    for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(t.aggregated.at(q, e), t.gamma.at(e, 0), 1e-15);
}

TEST(AfnbForward, ConstantLowInputMakesSamplerIrrelevant) {
  BlockConfig cfg = config(2, 3);
  cfg.low_channels = 3;
  const BlockWeights w = strong_weights(cfg, 32);
  const FusionInputs in{random({2, 4, 4}, 33), constant_map(3, 8, 8, 34)};
  std::optional<Tensor> first;
  for (auto m : {SampleMethod::pyramid_average, SampleMethod::pyramid_max, SampleMethod::pyramid_random}) {
    for (std::vector<std::size_t> levels : {std::vector<std::size_t>{1, 3, 6, 8}, std::vector<std::size_t>{2}}) {
      BlockConfig c = cfg;
      c.sampler = SamplerSpec{m, levels, 5};
      const Tensor y = afnb_forward(in, c, w);
      if (!first) first = y;
      EXPECT_LT(max_abs_diff(y, *first), 1e-12);
    }
  }
}

TEST(AfnbForward, PyramidGives110Columns) {
  BlockConfig cfg = config(2, 2);
  cfg.low_channels = 2;
  cfg.sampler = SamplerSpec::pyramid_average({1, 3, 6, 8});
  const BlockWeights w = init_weights(cfg, 35);
  const Tensor high = random({2, 3, 3}, 36);
  for (auto [h, wd] : {std::pair<std::size_t, std::size_t>{8, 8}, {12, 9}}) {
    const AttentionTrace t = attention_forward(high, random({2, h, wd}, 37), cfg, w, &*cfg.sampler);
    EXPECT_EQ(t.similarity.cols(), 110u);
  }
}

TEST(InitWeights, DeterministicAndShaped) {
  oracle::Gen g(38);
  for (int i = 0; i < 20; ++i) {
    BlockConfig cfg = config(g.between(1, 6), g.between(1, 6), Normalization::softmax, Combine::concat, g.coin(), g.coin());
    cfg.low_channels = g.between(1, 6);
    cfg.out_channels = g.between(1, 6);
    const std::uint64_t seed = g.seed();
    const BlockWeights a = init_weights(cfg, seed), b = init_weights(cfg, seed);
    EXPECT_EQ(a.phi.weight, b.phi.weight);
    EXPECT_EQ(a.out.weight, b.out.weight);
    EXPECT_NO_THROW(check_weights(cfg, a));
    EXPECT_EQ(a.phi.weight.dims(), (Dims{cfg.embed_channels, cfg.in_channels}));
    EXPECT_EQ(a.gamma().weight.dims(), (Dims{cfg.embed_channels, *cfg.low_channels}));
    EXPECT_EQ(a.out.weight.dims(), (Dims{*cfg.out_channels, cfg.embed_channels}));
    EXPECT_EQ(a.shares_key_value(), cfg.share_key_value);
    if (cfg.share_key_value) {
      EXPECT_EQ(a.gamma().weight, a.theta.weight);
    }
  }
}

TEST(InitWeights, MismatchedWeightsRejected) {
  const BlockConfig cfg = config(3, 2);
  BlockWeights w = init_weights(cfg, 1);
  w.phi.weight = Tensor({2, 4});
  EXPECT_THROW(check_weights(cfg, w), ShapeError);
  EXPECT_THROW(nb_forward(random({4, 2, 2}, 1), cfg, init_weights(cfg, 1)), ShapeError);
}

TEST(BlockConfig, Validation) {
  BlockConfig cfg = config(3, 2, Normalization::softmax, Combine::residual);
  cfg.out_channels = 4;
  EXPECT_THROW(cfg.validate(), ParameterError);
  EXPECT_THROW(config(3, 0).validate(), ParameterError);
  EXPECT_THROW(apnb_forward(random({3, 2, 2}, 1), config(3, 2), init_weights(config(3, 2), 1)), ParameterError);
}

TEST(StagePipeline, ConstantStagesGiveConstantOutput) {
  BlockConfig afnb = config(3, 2);
  afnb.low_channels = 4;
  afnb.sampler = SamplerSpec::pyramid_average({1, 2});
  BlockConfig apnb = config(6, 3);
  apnb.sampler = SamplerSpec::pyramid_average({1, 2});
  const StageFusionWeights w{strong_weights(afnb, 39), strong_weights(apnb, 40)};
  const Tensor y = stage_fusion_pipeline(constant_map(4, 6, 6, 41), constant_map(3, 4, 4, 42), afnb, apnb, w);
  EXPECT_EQ(y.dim(0), apnb.output_projection_channels() + apnb.in_channels);
  EXPECT_TRUE(spatially_constant(y, 1e-12));
}

TEST(StagePipeline, IdentitySamplersMatchFnbThenNb) {
  BlockConfig afnb = config(3, 2);
  afnb.low_channels = 4;
  afnb.sampler = SamplerSpec::identity();
  BlockConfig apnb = config(6, 3, Normalization::softmax, Combine::concat, true);
  apnb.sampler = SamplerSpec::identity();
  const StageFusionWeights w{strong_weights(afnb, 43), strong_weights(apnb, 44)};
  const Tensor stage4 = random({4, 5, 5}, 45), stage5 = random({3, 3, 3}, 46);

  BlockConfig fnb = afnb, nb = apnb;
  fnb.sampler.reset();
  nb.sampler.reset();
  const Tensor composed = nb_forward(fnb_forward({stage5, stage4}, fnb, w.fusion), nb, w.attention);
  EXPECT_LT(max_abs_diff(stage_fusion_pipeline(stage4, stage5, afnb, apnb, w), composed), 1e-12);
  BlockConfig wrong = apnb;
  wrong.in_channels = 5;
  EXPECT_THROW(stage_fusion_pipeline(stage4, stage5, afnb, wrong, w), std::exception);
}

TEST(BlockProperty, AnchorPermutationInvariance) {
  oracle::Gen g(47);
  for (int i = 0; i < 20; ++i) {
    BlockConfig cfg = config(g.between(1, 4), g.between(1, 4), Normalization::softmax, Combine::concat, g.coin());
    cfg.sampler = SamplerSpec::pyramid_average({1, 2, 3});
    const BlockWeights w = strong_weights(cfg, g.seed());
    const Tensor x = random({cfg.in_channels, g.between(1, 8), g.between(1, 8)}, g.seed());
    const AttentionTrace t = attention_forward(x, x, cfg, w, &*cfg.sampler);
    std::vector<std::size_t> perm(t.theta_anchors.cols());
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    std::rotate(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(g.between(0, perm.size() - 1)), perm.end());
    const AttentionTrace p = attend_anchors(x, t.phi, gather_columns(t.theta_anchors, perm),
                                            gather_columns(t.gamma_anchors, perm), cfg, w);
    EXPECT_LT(max_abs_diff(p.output, t.output), 1e-12);
  }
}

TEST(BlockProperty, AttentionRowsAreStochastic) {
  oracle::Gen g(48);
  for (int i = 0; i < 20; ++i) {
    const BlockKind kind = static_cast<BlockKind>(i % 4);
    BlockConfig cfg = config(g.between(1, 4), g.between(1, 4));
    if (is_fusion(kind)) cfg.low_channels = g.between(1, 4);
    if (is_sampled(kind)) cfg.sampler = SamplerSpec::pyramid_average({1, 2});
    const BlockWeights w = strong_weights(cfg, g.seed());
    const Tensor high = random({cfg.in_channels, g.between(1, 8), g.between(1, 8)}, g.seed());
    const Tensor low = random({cfg.key_channels(), g.between(1, 8), g.between(1, 8)}, g.seed());
    const AttentionTrace t =
        attention_forward(high, is_fusion(kind) ? low : high, cfg, w, cfg.sampler ? &*cfg.sampler : nullptr);
    for (std::size_t r = 0; r < t.attention.rows(); ++r) {
      double sum = 0.0;
      for (std::size_t k = 0; k < t.attention.cols(); ++k) sum += t.attention.at(r, k);
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(BlockProperty, ShapeContract) {
  oracle::Gen g(49);
  for (int i = 0; i < 40; ++i) {
    const BlockKind kind = static_cast<BlockKind>(i % 4);
    const Combine combine = g.coin() ? Combine::concat : Combine::residual;
    BlockConfig cfg = config(g.between(1, 5), g.between(1, 5), Normalization::rescale, combine, g.coin(), g.coin());
    if (combine == Combine::concat) cfg.out_channels = g.between(1, 5);
    if (is_fusion(kind)) cfg.low_channels = g.between(1, 5);
    if (is_sampled(kind)) cfg.sampler = SamplerSpec{SampleMethod::pyramid_max, {1, 2}, 0};
    const Tensor high = random({cfg.in_channels, g.between(1, 6), g.between(1, 6)}, g.seed());
    const Tensor low = random({cfg.key_channels(), g.between(1, 6), g.between(1, 6)}, g.seed());
    const Tensor y = block_forward(kind, high, &low, cfg, init_weights(cfg, g.seed()));
    EXPECT_EQ(y.dim(0), cfg.result_channels());
    EXPECT_EQ(y.dim(1), high.dim(1));
    EXPECT_EQ(y.dim(2), high.dim(2));
    if (combine == Combine::residual) {
      EXPECT_EQ(y.dims(), high.dims());
    }
  }
}

TEST(BlockProperty, ValueShiftMovesOutputByShift) {
  oracle::Gen g(50);
  for (int i = 0; i < 10; ++i) {
    BlockConfig cfg = config(3, g.between(1, 4));
    cfg.sampler = SamplerSpec::pyramid_average({1, 2});
    const BlockWeights w = strong_weights(cfg, g.seed());
    const Tensor x = random({3, g.between(2, 7), g.between(2, 7)}, g.seed());
    const AttentionTrace t = attention_forward(x, x, cfg, w, &*cfg.sampler);
    const Tensor c = random({cfg.embed_channels}, g.seed());
    Tensor shifted = t.gamma_anchors;
    for (std::size_t e = 0; e < shifted.rows(); ++e)
      for (std::size_t k = 0; k < shifted.cols(); ++k) shifted[e * shifted.cols() + k] += c[e];
    const AttentionTrace s = attend_anchors(x, t.phi, t.theta_anchors, shifted, cfg, w);
    for (std::size_t q = 0; q < s.aggregated.rows(); ++q)
      for (std::size_t e = 0; e < cfg.embed_channels; ++e)
        EXPECT_NEAR(s.aggregated.at(q, e) - t.aggregated.at(q, e), c[e], 1e-10);
  }
}
