#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "pkcam/pkcam.hpp"

using namespace pkcam;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng) {
  return Tensor::uniform(std::move(shape), -1.0, 1.0, rng);
}

void zero_params(PkcamModule& m) {
  ParamRegistry reg;
  m.register_params("m", reg);
  for (auto& [name, t] : reg.entries()) std::fill(t.data(), t.data() + t.numel(), 0.0);
}

TEST(AlignChannels, IdentityWhenWidthsMatch) {
  std::mt19937_64 rng(201);
  Tensor x = random_tensor({2, 4, 3, 3}, rng);
  Tensor y = align_channels(x, 4);
  EXPECT_TRUE(y.same_storage(x));
}

TEST(AlignChannels, RepeatTwice) {
  Tensor x(Shape{1, 2, 1, 1}, {3.0, 7.0});
  Tensor y = align_channels(x, 4);
  ASSERT_EQ(y.shape(), (Shape{1, 4, 1, 1}));
  EXPECT_DOUBLE_EQ(y[0], 3.0);
  EXPECT_DOUBLE_EQ(y[1], 7.0);
  EXPECT_DOUBLE_EQ(y[2], 3.0);
  EXPECT_DOUBLE_EQ(y[3], 7.0);
}

TEST(AlignChannels, RepeatThenTruncate) {
  Tensor x(Shape{1, 3, 1, 1}, {1.0, 2.0, 3.0});
  Tensor y = align_channels(x, 8);
  ASSERT_EQ(y.dim(1), 8);
  const double want[8] = {1, 2, 3, 1, 2, 3, 1, 2};
  for (int c = 0; c < 8; ++c) EXPECT_DOUBLE_EQ(y[c], want[c]);
}

TEST(AlignChannels, RejectsShrinking) {
  Tensor x = Tensor::ones({1, 8, 2, 2});
  EXPECT_THROW(align_channels(x, 4), ContractError);
}

TEST(SqueezeStack, IdenticalPredecessorGivesIdenticalRows) {
  std::mt19937_64 rng(211);
  Tensor x = random_tensor({2, 4, 3, 3}, rng);
  SqueezedStack st = squeeze_stack(x, {x});
  ASSERT_EQ(st.rows(), 2);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 4; ++c)
      EXPECT_DOUBLE_EQ(st.values[(n * 2 + 0) * 4 + c], st.values[(n * 2 + 1) * 4 + c]);
}

TEST(SqueezeStack, ConstantTensorsGiveConstantRows) {
  Tensor cur = Tensor::full({1, 3, 2, 2}, 2.0);
  Tensor prev = Tensor::full({1, 3, 4, 4}, -1.5);
  SqueezedStack st = squeeze_stack(cur, {prev});
  for (std::int64_t c = 0; c < 3; ++c) {
    EXPECT_DOUBLE_EQ(st.values[0 * 3 + c], 2.0);
    EXPECT_DOUBLE_EQ(st.values[1 * 3 + c], -1.5);
  }
}

TEST(SqueezeStack, RowsMatchGapOracle) {
  std::mt19937_64 rng(212);
  Tensor cur = random_tensor({2, 4, 3, 3}, rng);
  Tensor p1 = random_tensor({2, 4, 5, 5}, rng);
  Tensor p2 = random_tensor({2, 4, 2, 2}, rng);
  SqueezedStack st = squeeze_stack(cur, {p1, p2});
  auto g0 = oracle::gap(cur.values(), 2, 4, 3, 3);
  auto g1 = oracle::gap(p1.values(), 2, 4, 5, 5);
  auto g2 = oracle::gap(p2.values(), 2, 4, 2, 2);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t c = 0; c < 4; ++c) {
      EXPECT_NEAR(st.values[(n * 3 + 0) * 4 + c], g0[static_cast<std::size_t>(n * 4 + c)], 1e-12);
      EXPECT_NEAR(st.values[(n * 3 + 1) * 4 + c], g1[static_cast<std::size_t>(n * 4 + c)], 1e-12);
      EXPECT_NEAR(st.values[(n * 3 + 2) * 4 + c], g2[static_cast<std::size_t>(n * 4 + c)], 1e-12);
    }
}

TEST(SqueezeStack, EmptyPredecessorListIsContractError) {
  Tensor cur = Tensor::ones({1, 3, 2, 2});
  EXPECT_THROW(squeeze_stack(cur, {}), ContractError);
}

TEST(PkInteract, SelectorKernelPicksCurrentRow) {
  std::mt19937_64 rng(221);
  Tensor cur = random_tensor({2, 5, 2, 2}, rng);
  Tensor prev = random_tensor({2, 5, 2, 2}, rng);
  SqueezedStack st = squeeze_stack(cur, {prev});
  Tensor y = pk_interact(st, Interaction::Conv1dOverR, Tensor::vec({1.0, 0.0}));
  Tensor mean = ops::gap2d(cur);
  for (std::int64_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y[i], mean[i]);
}

TEST(PkInteract, AllOnesKernelEqualsSum) {
  std::mt19937_64 rng(222);
  Tensor cur = random_tensor({2, 6, 3, 3}, rng);
  Tensor p1 = random_tensor({2, 6, 3, 3}, rng);
  Tensor p2 = random_tensor({2, 6, 3, 3}, rng);
  SqueezedStack st = squeeze_stack(cur, {p1, p2});
  Tensor a = pk_interact(st, Interaction::Conv1dOverR, Tensor::ones({3}));
  Tensor b = pk_interact(st, Interaction::Sum, Tensor());
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(PkInteract, FullFcMatchesMatrixOracle) {
  std::mt19937_64 rng(223);
  Tensor cur = random_tensor({2, 4, 2, 2}, rng);
  Tensor prev = random_tensor({2, 4, 2, 2}, rng);
  SqueezedStack st = squeeze_stack(cur, {prev});
  Tensor w = random_tensor({4, 8}, rng);
  Tensor y = pk_interact(st, Interaction::FullFC, w);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t o = 0; o < 4; ++o) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < 8; ++i) acc += w.at(o, i) * st.values[n * 8 + i];
      EXPECT_NEAR(y.at(n, o), acc, 1e-10);
    }
}

TEST(PkInteract, DepthwiseMatchesLoopOracle) {
  std::mt19937_64 rng(224);
  Tensor cur = random_tensor({1, 3, 2, 2}, rng);
  Tensor prev = random_tensor({1, 3, 2, 2}, rng);
  SqueezedStack st = squeeze_stack(cur, {prev});
  Tensor w = random_tensor({3, 2}, rng);
  Tensor y = pk_interact(st, Interaction::Depthwise, w);
  for (std::int64_t c = 0; c < 3; ++c) {
    double acc = w.at(c, 0) * st.values[0 * 3 + c] + w.at(c, 1) * st.values[1 * 3 + c];
    EXPECT_NEAR(y[c], acc, 1e-12);
  }
}

TEST(PkInteract, KernelLengthMismatchIsContractError) {
  std::mt19937_64 rng(225);
  Tensor cur = random_tensor({1, 3, 2, 2}, rng);
  Tensor prev = random_tensor({1, 3, 2, 2}, rng);
  SqueezedStack st = squeeze_stack(cur, {prev});
  EXPECT_THROW(pk_interact(st, Interaction::Conv1dOverR, Tensor::vec({1.0, 1.0, 1.0})),
               ContractError);
}

TEST(Gcci, EcaBackendCases) {
  std::mt19937_64 rng(231);
  ChannelTransform zero_eca(AttentionKind::eca(3), 6, rng);
  std::fill(zero_eca.kernel().data(), zero_eca.kernel().data() + 3, 0.0);
  Tensor y = random_tensor({2, 6}, rng);
  Tensor z = gcci(y, zero_eca);
  for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(z[i], 0.0);

  zero_eca.kernel()[1] = 1.0;
  Tensor z2 = gcci(y, zero_eca);
  for (std::int64_t i = 0; i < z2.numel(); ++i) EXPECT_DOUBLE_EQ(z2[i], y[i]);
}

TEST(Gcci, SeBackendMatchesComposedOracle) {
  std::mt19937_64 rng(232);
  ChannelTransform se(AttentionKind::se(2), 8, rng);
  Tensor y = random_tensor({2, 8}, rng);
  Tensor z = gcci(y, se);
  auto h = oracle::relu(
      oracle::fc(y.values(), 2, 8, se.mlp().w1.values(), 4, se.mlp().b1.values()));
  auto want = oracle::fc(h, 2, 4, se.mlp().w2.values(), 8, se.mlp().b2.values());
  for (std::int64_t i = 0; i < z.numel(); ++i)
    EXPECT_NEAR(z[i], want[static_cast<std::size_t>(i)], 1e-10);
}

TEST(Lcci, MirrorsGcciWithSqueezePrepended) {
  std::mt19937_64 rng(233);
  ChannelTransform eca(AttentionKind::eca(3), 5, rng);
  Tensor x = random_tensor({2, 5, 3, 3}, rng);
  Tensor a = lcci(x, eca);
  Tensor b = gcci(ops::gap2d(x), eca);
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_DOUBLE_EQ(a[i], b[i]);

  std::fill(eca.kernel().data(), eca.kernel().data() + 3, 0.0);
  Tensor z = lcci(x, eca);
  for (std::int64_t i = 0; i < z.numel(); ++i) EXPECT_DOUBLE_EQ(z[i], 0.0);

  ChannelTransform se(AttentionKind::se(2), 4, rng);
  Tensor x2 = random_tensor({1, 4, 2, 2}, rng);
  Tensor got = lcci(x2, se);
  auto mean = oracle::gap(x2.values(), 1, 4, 2, 2);
  auto h = oracle::relu(
      oracle::fc(mean, 1, 4, se.mlp().w1.values(), 2, se.mlp().b1.values()));
  auto want = oracle::fc(h, 1, 2, se.mlp().w2.values(), 4, se.mlp().b2.values());
  for (std::int64_t i = 0; i < got.numel(); ++i)
    EXPECT_NEAR(got[i], want[static_cast<std::size_t>(i)], 1e-10);
}

TEST(FuseScales, SumWithZeroLocalIsSigmoidOfGlobal) {
  std::mt19937_64 rng(241);
  Tensor z1 = random_tensor({2, 5}, rng);
  Tensor z2 = Tensor::zeros({2, 5});
  Tensor s = fuse_scales(z1, z2, Fusion::Sum, Tensor());
  for (std::int64_t i = 0; i < s.numel(); ++i)
    EXPECT_NEAR(s[i], oracle::sigmoid(z1[i]), 1e-14);
}

TEST(FuseScales, SelectorWeightsPickGlobal) {
  std::mt19937_64 rng(242);
  Tensor z1 = random_tensor({2, 5}, rng);
  Tensor z2 = random_tensor({2, 5}, rng);
  Tensor s = fuse_scales(z1, z2, Fusion::Conv1dK2, Tensor::vec({1.0, 0.0}));
  Tensor want = ops::sigmoid(z1);
  for (std::int64_t i = 0; i < s.numel(); ++i) EXPECT_DOUBLE_EQ(s[i], want[i]);
}

TEST(FuseScales, UnitWeightsEqualSumFusion) {
  std::mt19937_64 rng(243);
  Tensor z1 = random_tensor({2, 5}, rng);
  Tensor z2 = random_tensor({2, 5}, rng);
  Tensor a = fuse_scales(z1, z2, Fusion::Conv1dK2, Tensor::vec({1.0, 1.0}));
  Tensor b = fuse_scales(z1, z2, Fusion::Sum, Tensor());
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Module, ZeroParamsGateIsHalf) {
  std::mt19937_64 rng(251);
  PkcamModule m(6, PkcamConfig{}, rng);
  zero_params(m);
  Tensor x = random_tensor({2, 6, 3, 3}, rng);
  FeatureCache cache(1);
  cache.push(0, random_tensor({2, 6, 3, 3}, rng));
  Tensor y = m.forward(x, cache);
  for (std::int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(y[i], 0.5 * x[i], 1e-15);
}

TEST(Module, LocalOnlyEcaEqualsStandaloneEca) {
  std::mt19937_64 rng(252);
  EcaModule eca(8, AttentionKind::eca(3), rng);
  PkcamConfig cfg;
  cfg.paths = Paths::LocalOnly;
  cfg.lcci = AttentionKind::eca(3);
  PkcamModule m(8, cfg, rng);
  std::copy(eca.kernel().data(), eca.kernel().data() + 3,
            m.lcci_transform().kernel().data());
  Tensor x = random_tensor({2, 8, 4, 4}, rng);
  FeatureCache cache(0);
  Tensor a = m.forward(x, cache);
  Tensor b = eca.forward(x);
  for (std::int64_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

// End-to-end R=1 default config against a monolithic straight-line oracle
// assembled from the per-op loop oracles.
TEST(Module, MatchesMonolithicOracle) {
  std::mt19937_64 rng(253);
  PkcamConfig cfg;  // conv1d interaction, eca/eca, conv1d2 fusion, both paths
  cfg.gcci = AttentionKind::eca(3);
  cfg.lcci = AttentionKind::eca(3);
  PkcamModule m(8, cfg, rng);
  Tensor x0 = random_tensor({2, 8, 3, 3}, rng);
  Tensor prev = random_tensor({2, 4, 5, 5}, rng);  // narrower: exercises align
  FeatureCache cache(1);
  cache.push(0, prev);
  Tensor got = m.forward(x0, cache);

  // align: repeat prev channels to 8
  std::vector<double> aligned(2 * 8 * 25);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 8; ++c)
      for (int s = 0; s < 25; ++s)
        aligned[static_cast<std::size_t>((n * 8 + c) * 25 + s)] =
            prev[(n * 4 + c % 4) * 25 + s];
  auto row0 = oracle::gap(x0.values(), 2, 8, 3, 3);
  auto row1 = oracle::gap(aligned, 2, 8, 5, 5);
  // interaction: y = w0*row0 + w1*row1
  const Tensor& iw = m.interaction_weights();
  std::vector<double> y(16);
  for (int i = 0; i < 16; ++i)
    y[static_cast<std::size_t>(i)] = iw[0] * row0[static_cast<std::size_t>(i)] +
                                     iw[1] * row1[static_cast<std::size_t>(i)];
  auto z1 = oracle::conv1d(y, 2, 8, m.gcci_transform().kernel().values(), 1);
  auto z2 = oracle::conv1d(row0, 2, 8, m.lcci_transform().kernel().values(), 1);
  const Tensor& fw = m.fusion_weights();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 8; ++c) {
      const double s = oracle::sigmoid(fw[0] * z1[static_cast<std::size_t>(n * 8 + c)] +
                                       fw[1] * z2[static_cast<std::size_t>(n * 8 + c)]);
      for (int p = 0; p < 9; ++p)
        EXPECT_NEAR(got[(n * 8 + c) * 9 + p], x0[(n * 8 + c) * 9 + p] * s, 1e-10);
    }
}

TEST(Module, ScalesStayInUnitIntervalForAllFusions) {
  std::mt19937_64 rng(254);
  Tensor x = random_tensor({2, 6, 3, 3}, rng);
  FeatureCache cache(2);
  cache.push(0, random_tensor({2, 3, 4, 4}, rng));
  cache.push(1, random_tensor({2, 6, 3, 3}, rng));
  for (Fusion f : {Fusion::Sum, Fusion::Conv1dK2, Fusion::FullFC}) {
    PkcamConfig cfg;
    cfg.coverage = 2;
    cfg.fusion = f;
    PkcamModule m(6, cfg, rng);
    ChannelScales s = m.scales(x, cache);
    ASSERT_TRUE(s.gated);
    ASSERT_EQ(s.values.shape(), (Shape{2, 6}));
    for (std::int64_t i = 0; i < s.values.numel(); ++i) {
      EXPECT_GT(s.values[i], 0.0);
      EXPECT_LT(s.values[i], 1.0);
    }
    Tensor y = m.forward(x, cache);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
      EXPECT_LE(std::abs(y[i]), std::abs(x[i]) + 1e-15);
  }
}

TEST(Module, EqualPredecessorsScaleSumInteraction) {
  std::mt19937_64 rng(255);
  const int R = 3;
  Tensor x = random_tensor({2, 5, 3, 3}, rng);
  FeatureCache cache(R);
  for (int i = 0; i < R; ++i) cache.push(i, x);
  SqueezedStack st = squeeze_stack(x, align_channels(cache.recent(), 5));
  Tensor y = pk_interact(st, Interaction::Sum, Tensor());
  Tensor mean = ops::gap2d(x);
  for (std::int64_t i = 0; i < y.numel(); ++i)
    EXPECT_NEAR(y[i], (R + 1) * mean[i], 1e-12);
}

TEST(Module, ShrunkenStackUsesLeadingKernelTaps) {
  std::mt19937_64 rng(256);
  PkcamConfig cfg;
  cfg.coverage = 3;
  PkcamModule m(6, cfg, rng);
  Tensor x = random_tensor({1, 6, 3, 3}, rng);
  FeatureCache cache(3);
  cache.push(0, random_tensor({1, 6, 3, 3}, rng));  // only one of three
  Tensor y = m.forward(x, cache);                    // must not throw
  EXPECT_EQ(y.shape(), x.shape());
}

TEST(Module, DefaultConfigParameterCount) {
  std::mt19937_64 rng(257);
  for (int R : {1, 2}) {
    PkcamConfig cfg;
    cfg.coverage = R;
    cfg.gcci = AttentionKind::eca(3);
    cfg.lcci = AttentionKind::eca(5);
    PkcamModule m(16, cfg, rng);
    EXPECT_EQ(m.param_count(), (R + 1) + 3 + 5 + 2);
  }
}

TEST(Module, GradientsReachEveryParameter) {
  std::mt19937_64 rng(258);
  PkcamConfig cfg;
  cfg.coverage = 2;
  PkcamModule m(6, cfg, rng);
  Tensor x = random_tensor({2, 6, 3, 3}, rng);
  FeatureCache cache(2);
  cache.push(0, random_tensor({2, 3, 4, 4}, rng));
  cache.push(1, random_tensor({2, 6, 2, 2}, rng));

  ParamRegistry reg;
  m.register_params("pkcam", reg);
  Tensor probe;
  {
    GradTape tape;
    Tensor y = m.forward(x, cache);
    probe = Tensor(y.shape(),
                   oracle::random_vec(static_cast<std::size_t>(y.numel()), rng));
    Tensor loss = ops::sum_all(ops::mul(y, probe));
    reg.zero_grads();
    tape.backward(loss);
  }
  auto loss_value = [&]() {
    Tensor y = m.forward(x, cache);
    double acc = 0.0;
    for (std::int64_t i = 0; i < y.numel(); ++i) acc += y[i] * probe[i];
    return acc;
  };
  for (auto& [name, t] : reg.entries()) {
    auto rep = oracle::fd_check_param(loss_value, t);
    EXPECT_LT(rep.max_rel, 1e-4) << name;
    // every parameter actually received a gradient
    bool any = false;
    for (std::int64_t i = 0; i < t.numel(); ++i) any = any || t.grad()[i] != 0.0;
    EXPECT_TRUE(any) << name << " has all-zero gradient";
  }
}

TEST(Module, CoverageValidation) {
  std::mt19937_64 rng(259);
  PkcamConfig cfg;
  cfg.coverage = 0;
  EXPECT_THROW(PkcamModule(4, cfg, rng), ConfigError);
  cfg.paths = Paths::LocalOnly;
  PkcamModule m(4, cfg, rng);  // allowed: local path ignores coverage
  EXPECT_GT(m.param_count(), 0);
}

TEST(Cache, EvictsOldestBeyondCapacity) {
  FeatureCache cache(2);
  Tensor a = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor b = Tensor::full({1, 1, 1, 1}, 2.0);
  Tensor c = Tensor::full({1, 1, 1, 1}, 3.0);
  cache.push(0, a);
  cache.push(1, b);
  cache.push(2, c);
  EXPECT_EQ(cache.size(), 2u);
  auto recent = cache.recent();
  EXPECT_DOUBLE_EQ(recent[0][0], 3.0);  // most recent first
  EXPECT_DOUBLE_EQ(recent[1][0], 2.0);
}

}  // namespace
