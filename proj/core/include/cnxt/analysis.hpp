// SPDX-License-Identifier: Apache-2.0
//
// Analytical cost model. One multiply-accumulate counts as one FLOP; bias
// adds, batch norm and activations are not counted. Parameter totals include
// batch-norm gamma/beta and linear biases but not running statistics.
#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cnxt/arch.hpp"

namespace cnxt {

/// out_h * out_w * F^2 * (A/G) * B.
std::uint64_t conv_flops(const ConvSpec& spec, std::size_t out_h, std::size_t out_w);
std::uint64_t conv_params(const ConvSpec& spec, bool bias = false);

/// Masked variant: only kept (group, channel) slots contribute.
std::uint64_t masked_conv_flops(const ConvSpec& spec, std::size_t out_h, std::size_t out_w,
                                const PruneMask& mask);
std::uint64_t masked_conv_params(const ConvSpec& spec, const PruneMask& mask);

struct LayerCost {
  std::string id;
  NodeKind kind = NodeKind::kConv;
  std::uint64_t flops = 0;
  std::uint64_t params = 0;
};

struct CostComparison {
  std::uint64_t baseline_flops = 0;
  std::uint64_t baseline_params = 0;
  double flop_reduction_percent = 0.0;
  double param_reduction_percent = 0.0;
  /// Raw 32-bit weight bytes saved; container overhead is not included.
  std::int64_t size_delta_bytes = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  std::uint64_t total_flops = 0;
  std::uint64_t total_params = 0;
  std::optional<CostComparison> comparison;
};

/// Costs in graph order. Learned convs are counted through `masks` when
/// given (missing ids fall back to the layer's own mask) and through their
/// current masks otherwise.
CostReport count_graph(const NetworkGraph& graph, const MaskSet* masks = nullptr);
CostReport count_layers(std::vector<LayerCost> layers);

/// Reduction of `condensed` relative to `baseline`, 100 * (1 - c / b).
CostComparison compare(const CostReport& condensed, const CostReport& baseline);
CostReport with_comparison(CostReport condensed, const CostReport& baseline);

/// Projected cost of an architecture once every learned conv carries its
/// final prune quota.
CostReport projected_cost(const ArchConfig& config);

/// Aligned table with a header stating the counting convention.
std::string format_text(const CostReport& report);
/// One `layer_id kind flops params` line per layer plus a TOTAL line.
std::string format_records(const CostReport& report);

struct CalibrationTarget {
  double flops = 26.35e6;
  double params = 0.18e6;
};

struct CalibrationResult {
  ArchConfig config;
  CostReport cost;
  double score = 0.0;  // sum of relative deviations
};

/// Searches non-increasing per-stage block counts up to `max_blocks` keeping
/// every other field of `base`, minimizing the summed relative deviation of
/// projected FLOPs and params from the target.
CalibrationResult calibrate_depth(const ArchConfig& base, const CalibrationTarget& target,
                                  std::size_t max_blocks = 16);

}  // namespace cnxt
