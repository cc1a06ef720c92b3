// SPDX-License-Identifier: Apache-2.0
//
// Group-wise L1 filter pruning. A layer's output filters are partitioned
// into `groups`; each (group, input channel) pair is one prunable slot whose
// importance is the L1 norm of the weights connecting them. Over a run the
// layer loses exactly A*C - p*A slots in total, where A is the input channel
// count, C the cardinality and p the pruning hyperparameter.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "cnxt/ops.hpp"
#include "cnxt/tensor.hpp"

namespace cnxt {

struct PruneConfig {
  std::size_t p = 4;
  std::size_t cardinality = 8;
  std::size_t groups = 8;

  /// p <= C, and the C - p pruned slots per input channel must fit into the
  /// available groups.
  void validate() const;
};

/// score(g, j): importance of input channel j to output group g.
class ScoreTable {
 public:
  ScoreTable(std::size_t groups, std::size_t columns)
      : groups_(groups), columns_(columns), values_(groups * columns, 0.0) {}

  std::size_t groups() const { return groups_; }
  std::size_t columns() const { return columns_; }
  double at(std::size_t g, std::size_t j) const { return values_[g * columns_ + j]; }
  double& at(std::size_t g, std::size_t j) { return values_[g * columns_ + j]; }

 private:
  std::size_t groups_;
  std::size_t columns_;
  std::vector<double> values_;
};

/// Keep flags per (group, input channel) slot.
class PruneMask {
 public:
  PruneMask() = default;
  static PruneMask all_keep(std::size_t groups, std::size_t columns);

  std::size_t groups() const { return groups_; }
  std::size_t columns() const { return columns_; }
  bool empty() const { return keep_.empty(); }

  bool kept(std::size_t g, std::size_t j) const { return keep_[g * columns_ + j] != 0; }
  /// Drops one slot. There is no way to bring a slot back.
  void drop(std::size_t g, std::size_t j) { keep_[g * columns_ + j] = 0; }

  std::size_t kept_in_group(std::size_t g) const;
  std::size_t pruned_in_group(std::size_t g) const { return columns_ - kept_in_group(g); }
  std::size_t kept_total() const;
  std::size_t pruned_total() const { return groups_ * columns_ - kept_total(); }
  std::vector<std::size_t> kept_columns(std::size_t g) const;

  /// True when every slot kept here is also kept in `other`.
  bool nested_in(const PruneMask& other) const;

  std::span<const std::uint8_t> flags() const { return keep_; }
  static PruneMask from_flags(std::size_t groups, std::size_t columns,
                              std::vector<std::uint8_t> flags);

  friend bool operator==(const PruneMask&, const PruneMask&) = default;

 private:
  std::size_t groups_ = 0;
  std::size_t columns_ = 0;
  std::vector<std::uint8_t> keep_;
};

/// A*C - p*A.
std::size_t total_pruned_slots(std::size_t in_channels, const PruneConfig& config);

/// Splits the pruned total across groups as evenly as possible, lower group
/// indices taking the remainder.
std::vector<std::size_t> group_prune_quota(std::size_t in_channels, const PruneConfig& config);

/// Rows partition the output filters into `groups`; columns are the weight
/// tensor's input channels.
ScoreTable group_l1_scores(const Tensor4& weights, std::size_t groups);
ScoreTable group_l1_scores(const Tensor4& weights, const ConvSpec& spec);

/// Final mask: in each group keeps the highest-scoring columns, lower channel
/// index first on ties, and prunes that group's share of A*C - p*A.
PruneMask build_prune_mask(const ScoreTable& scores, const PruneConfig& config,
                           std::size_t in_channels);

/// Prunes further kept slots until group g has target_pruned[g] pruned slots.
/// The result is always nested in `current`.
PruneMask condense(const PruneMask& current, const ScoreTable& scores,
                   std::span<const std::size_t> target_pruned);

template <typename T>
BasicTensor4<T> apply_mask(const BasicTensor4<T>& weights, const PruneMask& mask);

template <typename T>
ConvParams<T> apply_mask(const ConvParams<T>& params, const PruneMask& mask) {
  return {apply_mask(params.weights, mask), params.bias};
}

struct StageAction {
  bool fire = false;
  std::size_t stage = 0;  // 1-based; cumulative
  std::size_t total_stages = 0;
  double cumulative_fraction = 0.0;  // pruned share of the A*C slots
};

/// Epochs at which stages 1..C-p fire: C-p equal steps over the first half of
/// training, never before epoch 1.
std::vector<std::size_t> stage_epochs(std::size_t total_epochs, const PruneConfig& config);

StageAction prune_schedule(std::size_t epoch, std::size_t total_epochs,
                           const PruneConfig& config);

/// Cumulative per-group pruned counts once `stage` has fired.
std::vector<std::size_t> stage_quota(std::size_t in_channels, const PruneConfig& config,
                                     std::size_t stage);

/// A masked convolution with pruned slots physically removed. Each group
/// gathers its kept input channels and applies a dense convolution to them.
struct CompactConv {
  ConvSpec spec;  // geometry of the masked original
  std::size_t mask_groups = 1;
  std::vector<std::vector<std::size_t>> inputs;  // global input channel per group
  std::vector<Tensor4> weights;                  // (B/groups, |inputs[g]|, F, F)

  std::size_t parameter_count() const;
};

CompactConv compact(const Tensor4& weights, const ConvSpec& spec, const PruneMask& mask);

Tensor4 compact_forward(const Tensor4& input, const CompactConv& conv);

}  // namespace cnxt
