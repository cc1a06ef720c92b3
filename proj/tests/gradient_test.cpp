// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "cnxt/arch.hpp"
#include "cnxt/training.hpp"
#include "gradient_cases.hpp"

namespace cnxt {
namespace {

TEST(Gradients, EveryKernelMatchesFiniteDifferences) {
  const auto cases = testing::gradient_cases();
  EXPECT_GE(cases.size(), 30U);
  for (const auto& c : cases) EXPECT_LT(c.rel_error, 1e-5) << c.name;
}

TEST(Gradients, StableAcrossSeeds) {
  for (std::uint64_t seed : {1, 2, 3}) {
    for (const auto& c : testing::gradient_cases(seed)) EXPECT_LT(c.rel_error, 1e-5) << c.name;
  }
}

TEST(Gradients, GroupLassoOriginIsZero) {
  const auto v = group_lasso_penalty(std::vector<std::vector<double>>{{0.0, 0.0}}, 1.0);
  EXPECT_EQ(v.penalty, 0.0);
  EXPECT_EQ(v.grads[0], (std::vector<double>{0.0, 0.0}));
}

ArchConfig tiny_arch() {
  ArchConfig a;
  a.stages = {{1, 4}, {1, 4}};
  a.cardinality = 4;
  a.prune_p = 2;
  a.height = 8;
  a.width = 8;
  a.dropout_rate = 0.0;
  a.num_classes = 5;
  return a;
}

// Whole-network check in float: coarser step and tolerance than the
// double-precision kernel checks.
TEST(Gradients, NetworkBackwardMatchesFiniteDifferences) {
  NetworkGraph g = build(tiny_arch());
  init_params(g, 5);
  std::mt19937_64 rng(6);
  const Tensor4 x = testing::random_tensorf({4, 3, 8, 8}, rng);
  const std::vector<std::size_t> labels{0, 1, 4, 2};

  auto loss_at = [&](NetworkGraph& graph) {
    TrainingPass pass;
    return cross_entropy_loss(pass.forward(graph, x, 0), labels).loss;
  };
  TrainingPass pass;
  const auto lv = cross_entropy_loss(pass.forward(g, x, 0), labels);
  const auto grads = pass.backward(g, lv.grad);

  std::size_t checked = 0;
  for (std::size_t i = 0; i < g.params.size(); ++i) {
    if (!g.params[i].trainable()) {
      EXPECT_FALSE(grads[i].has_value()) << g.params[i].name;
      continue;
    }
    ASSERT_TRUE(grads[i].has_value()) << g.params[i].name;
    const Tensor4 base = g.params[i].value;
    std::vector<double> fd, an;
    for (std::size_t k = 0; k < std::min<std::size_t>(base.size(), 6); ++k) {
      const std::size_t j = (k * 7919) % base.size();
      constexpr float h = 1e-3F;
      auto v = base.to_vector();
      v[j] = base[j] + h;
      g.params.set(i, Tensor4(base.shape(), v));
      const double up = loss_at(g);
      v[j] = base[j] - h;
      g.params.set(i, Tensor4(base.shape(), v));
      const double down = loss_at(g);
      g.params.set(i, base);
      fd.push_back((up - down) / (2.0 * h));
      an.push_back((*grads[i])[j]);
    }
    const double err = testing::relative_error(fd, an);
    const double scale = std::sqrt(std::inner_product(an.begin(), an.end(), an.begin(), 0.0));
    if (scale > 1e-4) {
      EXPECT_LT(err, 5e-2) << g.params[i].name;
      ++checked;
    }
  }
  EXPECT_GT(checked, 10U);
}

TEST(Gradients, PrunedSlotsGetZeroGradient) {
  NetworkGraph g = build(tiny_arch());
  init_params(g, 7);
  g.set_masks(final_masks(g));
  std::mt19937_64 rng(8);
  const Tensor4 x = testing::random_tensorf({2, 3, 8, 8}, rng);
  TrainingPass pass;
  const auto lv = cross_entropy_loss(pass.forward(g, x, 0), std::vector<std::size_t>{1, 3});
  const auto grads = pass.backward(g, lv.grad);
  for (std::size_t li : g.learned_convs()) {
    const Node& n = g.nodes[li];
    const Tensor4& dw = *grads[n.params.front()];
    EXPECT_EQ(apply_mask(dw, n.mask), dw) << n.id;
  }
}

}  // namespace
}  // namespace cnxt
