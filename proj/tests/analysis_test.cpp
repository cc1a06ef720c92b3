// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sstream>

#include "cnxt/analysis.hpp"
#include "test_support.hpp"

namespace cnxt {
namespace {

TEST(ConvFlops, Examples) {
  EXPECT_EQ(conv_flops(ConvSpec::depthwise(8, 3, 1, 1), 16, 16), 18432U);
  EXPECT_EQ(conv_flops(ConvSpec::pointwise(8, 16), 16, 16), 32768U);
  EXPECT_EQ(conv_flops(ConvSpec::standard(3, 8, 16, 1, 1), 16, 16), 294912U);
  const double ratio = (18432.0 + 32768.0) / 294912.0;
  EXPECT_NEAR(ratio, 1.0 / 16 + 1.0 / 9, 1e-15);
  EXPECT_NEAR(ratio, 0.1736, 1e-4);
}

TEST(ConvFlops, DepthwiseGrid) {
  for (std::size_t f : {1, 3, 5})
    for (std::size_t c : {1, 8, 32})
      for (std::size_t out : {4, 16, 32}) {
        EXPECT_EQ(conv_flops(ConvSpec::depthwise(c, f), out, out), out * out * f * f * c);
      }
}

TEST(ConvFlops, SeparableRatioLaw) {
  for (std::size_t b : {8, 16, 64})
    for (std::size_t a : {3, 8, 32}) {
      const std::size_t f = 3, out = 12;
      const double sep = static_cast<double>(conv_flops(ConvSpec::depthwise(a, f), out, out) +
                                             conv_flops(ConvSpec::pointwise(a, b), out, out));
      const double std_ = static_cast<double>(conv_flops(ConvSpec::standard(f, a, b), out, out));
      const double law = 1.0 / b + 1.0 / (f * f);
      EXPECT_LE(std::abs(sep / std_ - law) / law, 1e-12);
    }
}

TEST(ConvParams, Counts) {
  EXPECT_EQ(conv_params(ConvSpec::grouped(3, 8, 16, 4)), 16U * 2 * 9);
  EXPECT_EQ(conv_params(ConvSpec::pointwise(8, 16), true), 8U * 16 + 16);
  PruneMask m = PruneMask::all_keep(4, 8);
  EXPECT_EQ(masked_conv_params(ConvSpec::pointwise(8, 16), m), 128U);
  m.drop(0, 0);
  EXPECT_EQ(masked_conv_params(ConvSpec::pointwise(8, 16), m), 124U);
  EXPECT_EQ(masked_conv_flops(ConvSpec::pointwise(8, 16), 2, 3, m), 124U * 6);
}

ArchConfig small_arch() {
  ArchConfig a;
  a.stages = {{2, 8}, {2, 16}};
  a.height = a.width = 16;
  return a;
}

TEST(CountGraph, EmptyAndMaskNeutrality) {
  const CostReport empty = count_graph(NetworkGraph{});
  EXPECT_EQ(empty.total_flops, 0U);
  EXPECT_EQ(empty.total_params, 0U);

  const NetworkGraph g = build(small_arch());
  MaskSet keep;
  for (std::size_t i : g.learned_convs()) {
    keep.emplace(g.nodes[i].id, PruneMask::all_keep(g.nodes[i].mask_groups, g.nodes[i].conv.in_channels));
  }
  const CostReport a = count_graph(g);
  const CostReport b = count_graph(g, &keep);
  EXPECT_EQ(a.total_flops, b.total_flops);
  EXPECT_EQ(a.total_params, b.total_params);
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    EXPECT_EQ(a.layers[i].flops, b.layers[i].flops);
    EXPECT_EQ(a.layers[i].params, b.layers[i].params);
  }
}

TEST(CountGraph, ParamsMatchRegistry) {
  NetworkGraph g = build(small_arch());
  EXPECT_EQ(count_graph(g).total_params, g.params.trainable_count());
  init_params(g, 1);
  g.set_masks(final_masks(g));
  const NetworkGraph c = compact_graph(g);
  EXPECT_EQ(count_graph(c).total_params, c.params.trainable_count());
}

TEST(CountGraph, Additivity) {
  const CostReport r = count_graph(build(small_arch()));
  for (std::size_t cut = 0; cut <= r.layers.size(); cut += 7) {
    const CostReport head = count_layers({r.layers.begin(), r.layers.begin() + cut});
    const CostReport tail = count_layers({r.layers.begin() + cut, r.layers.end()});
    EXPECT_EQ(head.total_flops + tail.total_flops, r.total_flops);
    EXPECT_EQ(head.total_params + tail.total_params, r.total_params);
  }
  std::uint64_t f = 0;
  for (const auto& l : r.layers) f += l.flops;
  EXPECT_EQ(f, r.total_flops);
}

TEST(CountGraph, MaskMonotonicity) {
  const NetworkGraph g = build(small_arch());
  std::mt19937_64 rng(2);
  MaskSet masks = g.masks();
  CostReport prev = count_graph(g, &masks);
  for (int step = 0; step < 40; ++step) {
    for (auto& [id, m] : masks) {
      m.drop(testing::pick(rng, 0, m.groups() - 1), testing::pick(rng, 0, m.columns() - 1));
    }
    const CostReport next = count_graph(g, &masks);
    for (std::size_t i = 0; i < next.layers.size(); ++i) {
      ASSERT_LE(next.layers[i].flops, prev.layers[i].flops);
      ASSERT_LE(next.layers[i].params, prev.layers[i].params);
    }
    prev = next;
  }
}

TEST(Compare, Examples) {
  CostReport a;
  a.total_flops = 100;
  a.total_params = 10;
  const CostComparison same = compare(a, a);
  EXPECT_EQ(same.flop_reduction_percent, 0.0);
  EXPECT_EQ(same.size_delta_bytes, 0);

  CostReport base, cond;
  base.total_flops = 65'810'000;
  cond.total_flops = 26'350'000;
  base.total_params = 520'000;
  cond.total_params = 180'000;
  const CostComparison c = compare(cond, base);
  EXPECT_NEAR(c.flop_reduction_percent, 59.96, 0.005);
  EXPECT_EQ(c.size_delta_bytes, 1'360'000);
}

TEST(Compare, CifarPresetAgainstBaseline) {
  const CostReport cond = projected_cost(ArchConfig::preset("cifar10"));
  const CostReport base = projected_cost(ArchConfig::preset("cifar10-baseline"));
  const CostComparison c = compare(cond, base);
  EXPECT_NEAR(c.flop_reduction_percent, 59.96, 5.0);
  EXPECT_NEAR(static_cast<double>(cond.total_params), 0.18e6, 0.018e6);
  EXPECT_NEAR(static_cast<double>(base.total_params), 0.52e6, 0.052e6);
}

TEST(Calibration, RecoversPresetDepth) {
  ArchConfig base = ArchConfig::preset("cifar10");
  for (auto& s : base.stages) s.blocks = 1;
  const CalibrationResult r = calibrate_depth(base, CalibrationTarget{}, 10);
  EXPECT_EQ(r.config.stages, ArchConfig::preset("cifar10").stages);
  EXPECT_LT(r.score, 0.1);
}

TEST(Format, TextAndRecords) {
  const CostReport cond = projected_cost(small_arch());
  const CostReport r = with_comparison(cond, cond);
  const std::string text = format_text(r);
  EXPECT_EQ(text.rfind("# 1 multiply-accumulate = 1 FLOP", 0), 0U);
  EXPECT_NE(text.find("flop reduction 0.00%"), std::string::npos);

  std::istringstream in(format_records(cond));
  std::string id, kind;
  std::uint64_t flops = 0, params = 0, sum_f = 0, sum_p = 0;
  std::size_t rows = 0;
  while (in >> id >> kind >> flops >> params) {
    if (id == "TOTAL") {
      EXPECT_EQ(flops, cond.total_flops);
      EXPECT_EQ(params, cond.total_params);
      EXPECT_EQ(sum_f, flops);
      EXPECT_EQ(sum_p, params);
      continue;
    }
    sum_f += flops;
    sum_p += params;
    ++rows;
  }
  EXPECT_EQ(rows, cond.layers.size());
}

}  // namespace
}  // namespace cnxt
