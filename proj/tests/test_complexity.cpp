#include <gtest/gtest.h>

#include "pkcam/complexity.hpp"

using namespace pkcam;

namespace {

double rel_to(double got, double want) { return std::abs(got - want) / want; }

AttentionConfig att(AttentionChoice choice, AttentionKind kind = AttentionKind::eca()) {
  AttentionConfig a;
  a.choice = choice;
  a.kind = kind;
  return a;
}

AttentionConfig pkcam_att(Interaction inter = Interaction::Conv1dOverR,
                          Fusion fus = Fusion::Conv1dK2, Paths paths = Paths::Both,
                          IntegrationPolicy policy = IntegrationPolicy::LastBlockPerStage) {
  AttentionConfig a;
  a.choice = AttentionChoice::PKCAM;
  a.policy = policy;
  a.pkcam.interaction = inter;
  a.pkcam.fusion = fus;
  a.pkcam.paths = paths;
  return a;
}

TEST(Params, ResnetFamilyMatchesReportedMillions) {
  // Reference points: 11.14 / 20.78 / 24.37 M, tolerance 5%.
  const double p18 = static_cast<double>(count_params(make_resnet_graph(18, {})).total_params());
  const double p34 = static_cast<double>(count_params(make_resnet_graph(34, {})).total_params());
  const double p50 = static_cast<double>(count_params(make_resnet_graph(50, {})).total_params());
  EXPECT_LT(rel_to(p18, 11.14e6), 0.05) << p18;
  EXPECT_LT(rel_to(p34, 20.78e6), 0.05) << p34;
  EXPECT_LT(rel_to(p50, 24.37e6), 0.05) << p50;

  const double pse50 = static_cast<double>(
      count_params(make_resnet_graph(50, att(AttentionChoice::SE, AttentionKind::se(16))))
          .total_params());
  EXPECT_LT(rel_to(pse50, 26.77e6), 0.05) << pse50;
}

TEST(Flops, ResnetFamilyAt224MatchesReportedGiga) {
  // Reference points: 1.699 / 3.427 / 3.86 G, tolerance 10%, mac1.
  const Shape in{1, 3, 224, 224};
  const double f18 = static_cast<double>(count_flops(make_resnet_graph(18, {}), in).total_flops());
  const double f34 = static_cast<double>(count_flops(make_resnet_graph(34, {}), in).total_flops());
  const double f50 = static_cast<double>(count_flops(make_resnet_graph(50, {}), in).total_flops());
  EXPECT_LT(rel_to(f18, 1.699e9), 0.10) << f18;
  EXPECT_LT(rel_to(f34, 3.427e9), 0.10) << f34;
  EXPECT_LT(rel_to(f50, 3.86e9), 0.10) << f50;
}

TEST(Flops, Resnet18TinyImagenetConfig) {
  // 64x64 inputs with the compact stem; reference 2.075 G, tolerance 15%.
  LayerGraph g = make_resnet_graph(18, {}, 200, StemKind::Compact);
  const double f = static_cast<double>(count_flops(g, {1, 3, 64, 64}).total_flops());
  EXPECT_LT(rel_to(f, 2.075e9), 0.15) << f;
}

TEST(Flops, LinearInBatch) {
  LayerGraph g = make_resnet_graph(18, pkcam_att());
  const auto f1 = count_flops(g, {1, 3, 64, 64}).total_flops();
  const auto f2 = count_flops(g, {2, 3, 64, 64}).total_flops();
  EXPECT_EQ(f2, 2 * f1);
}

TEST(Flops, Mac2DoublesConvTerms) {
  LayerGraph g = make_resnet_graph(18, {});
  const auto r1 = count_flops(g, {1, 3, 224, 224}, FlopConvention::Mac1);
  const auto r2 = count_flops(g, {1, 3, 224, 224}, FlopConvention::Mac2);
  EXPECT_EQ(r1.convention, "mac1");
  EXPECT_EQ(r2.convention, "mac2");
  ASSERT_EQ(r1.rows.size(), r2.rows.size());
  for (std::size_t i = 0; i < r1.rows.size(); ++i) {
    if (r1.rows[i].name.find("conv") != std::string::npos)
      EXPECT_EQ(r2.rows[i].flops, 2 * r1.rows[i].flops) << r1.rows[i].name;
    EXPECT_EQ(r2.rows[i].params, r1.rows[i].params);
  }
}

TEST(Params, IndependentOfInputShape) {
  LayerGraph g = make_resnet_graph(18, pkcam_att());
  const auto a = count_flops(g, {1, 3, 224, 224});
  const auto b = count_flops(g, {4, 3, 64, 64});
  EXPECT_EQ(a.total_params(), b.total_params());
  EXPECT_EQ(a.total_params(), count_params(g).total_params());
}

TEST(Params, PkcamDeltaIsNegligibleAndAuditExact) {
  for (int depth : {18, 34, 50}) {
    const std::int64_t vanilla = count_params(make_resnet_graph(depth, {})).total_params();
    LayerGraph g = make_resnet_graph(depth, pkcam_att());
    const std::int64_t with_pk = count_params(g).total_params();
    EXPECT_LT(static_cast<double>(with_pk - vanilla), 0.001 * static_cast<double>(vanilla))
        << depth;
    // audit-sum oracle: the delta equals the per-module formula sum
    std::int64_t audit = 0;
    for (std::size_t s = 0; s < g.stages.size(); ++s)
      for (int b = 0; b < g.stages[s].blocks; ++b)
        audit += cost::attention_params(g.placement(static_cast<int>(s), b),
                                        g.block_out_width(static_cast<int>(s)));
    EXPECT_EQ(with_pk - vanilla, audit) << depth;
  }
}

TEST(Params, EcaEverywhereAddsExactlyTheKernels) {
  const std::int64_t vanilla = count_params(make_resnet_graph(18, {})).total_params();
  LayerGraph g = make_resnet_graph(18, att(AttentionChoice::ECA));
  const std::int64_t with_eca = count_params(g).total_params();
  std::int64_t kernels = 0;
  for (std::size_t s = 0; s < g.stages.size(); ++s)
    for (int b = 0; b < g.stages[s].blocks; ++b)
      kernels += eca_kernel_for(g.block_out_width(static_cast<int>(s)));
  EXPECT_EQ(with_eca - vanilla, kernels);
  EXPECT_EQ(kernels, 2 * 3 + 2 * 5 + 2 * 5 + 2 * 5);  // k(64)=3, k(128)=k(256)=k(512)=5
}

TEST(Params, FormulaCountEqualsInstantiatedTensors) {
  // The analyzer's closed-form count must equal the built network's tensors.
  std::vector<LayerGraph> graphs;
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16}, {}, 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16}, att(AttentionChoice::SE, AttentionKind::se(2)), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16}, att(AttentionChoice::ECA), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16}, att(AttentionChoice::SRM), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16}, att(AttentionChoice::GC, AttentionKind::gc(2)), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16}, pkcam_att(), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16},
                                   pkcam_att(Interaction::FullFC, Fusion::FullFC), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16},
                                   pkcam_att(Interaction::Depthwise, Fusion::Sum), 7));
  graphs.push_back(make_tiny_graph({2, 2}, {8, 16},
                                   pkcam_att(Interaction::Sum, Fusion::Conv1dK2,
                                             Paths::GlobalOnly), 7));
  graphs.push_back(make_tiny_graph(
      {2, 2}, {8, 16},
      pkcam_att(Interaction::Conv1dOverR, Fusion::Conv1dK2, Paths::Both,
                IntegrationPolicy::AllBlocks),
      7));
  {
    LayerGraph bottleneck = make_resnet_graph(50, att(AttentionChoice::SE, AttentionKind::se(16)));
    bottleneck.stages = {{2, 8, 1}, {2, 16, 2}};  // scaled-down bottleneck family
    bottleneck.stem = StemKind::Compact;
    bottleneck.classes = 7;
    bottleneck.attention.kind = AttentionKind::se(2);
    graphs.push_back(bottleneck);
  }
  graphs.push_back(make_resnet_graph(18, pkcam_att(), 1000, StemKind::Full));
  for (const auto& g : graphs) {
    Network net(g, 3);
    EXPECT_EQ(count_params(g).total_params(), net.param_count());
  }
}

TEST(Params, Table3PartialOrder) {
  // FC fusion strictly exceeds conv1d/sum fusion; FC interaction strictly
  // exceeds conv1d/sum; sum interaction has the fewest interaction params.
  auto total = [](Interaction i, Fusion f) {
    return count_params(make_resnet_graph(18, pkcam_att(i, f))).total_params();
  };
  const auto conv_conv = total(Interaction::Conv1dOverR, Fusion::Conv1dK2);
  const auto conv_sum = total(Interaction::Conv1dOverR, Fusion::Sum);
  const auto conv_fc = total(Interaction::Conv1dOverR, Fusion::FullFC);
  const auto sum_conv = total(Interaction::Sum, Fusion::Conv1dK2);
  const auto fc_conv = total(Interaction::FullFC, Fusion::Conv1dK2);
  EXPECT_GT(conv_fc, conv_conv);
  EXPECT_GT(conv_fc, conv_sum);
  EXPECT_GT(fc_conv, conv_conv);
  EXPECT_GT(fc_conv, sum_conv);
  EXPECT_LT(sum_conv, conv_conv);  // sum interaction is the smallest
}

TEST(Report, CsvLayoutAndDeterminism) {
  LayerGraph g = make_tiny_graph({1, 1}, {4, 8}, pkcam_att(), 5);
  const auto a = count_flops(g, {1, 3, 16, 16});
  const auto b = count_flops(g, {1, 3, 16, 16});
  EXPECT_EQ(cost_csv(a), cost_csv(b));
  const std::string csv = cost_csv(a);
  EXPECT_EQ(csv.rfind("layer,params,flops\n", 0), 0u);
  EXPECT_NE(csv.find("s1.b0.att"), std::string::npos);
  EXPECT_NE(csv.find("head.fc"), std::string::npos);
  std::int64_t totp = 0, totf = 0;
  for (const auto& r : a.rows) {
    totp += r.params;
    totf += r.flops;
  }
  EXPECT_EQ(totp, a.total_params());
  EXPECT_EQ(totf, a.total_flops());
}

TEST(Report, RejectsBadInputShape) {
  LayerGraph g = make_tiny_graph({1, 1}, {4, 8}, {}, 5);
  EXPECT_THROW(count_flops(g, {3, 16, 16}), ConfigError);
  EXPECT_THROW(count_flops(g, {1, 4, 16, 16}), ConfigError);
}

}  // namespace
