// SPDX-License-Identifier: Apache-2.0
//
// CondenseNeXt network description and execution. A network is a stem
// convolution followed by stages of densely connected blocks separated by
// 2x2 average-pool transitions, then a BN -> ReLU6 -> global pool ->
// dropout -> linear -> softmax head. Each block appends `growth` channels:
//
//   BN -> ReLU6 -> learned group 1x1 (prunable) -> BN -> ReLU6
//      -> depthwise 3x3 -> pointwise 1x1 -> concat with the block input
//
// The `standard` block kind replaces the depthwise/pointwise pair by a
// grouped 3x3 convolution, which is how the CondenseNet baseline is laid out.
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cnxt/config.hpp"
#include "cnxt/ops.hpp"
#include "cnxt/pruning.hpp"
#include "cnxt/tensor.hpp"

namespace cnxt {

enum class BlockKind { kSeparable, kStandard };

struct StageConfig {
  std::size_t blocks = 1;
  std::size_t growth = 8;
  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct ArchConfig {
  std::vector<StageConfig> stages{{7, 8}, {6, 16}, {6, 32}};
  std::size_t cardinality = 8;
  std::size_t prune_p = 4;
  std::size_t num_classes = 10;
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double dropout_rate = 0.1;
  std::size_t bottleneck = 4;
  BlockKind block = BlockKind::kSeparable;
  std::size_t conv3x3_groups = 4;  // standard blocks only
  std::size_t stem_stride = 1;
  std::size_t stem_channels = 0;  // 0 means twice the first growth rate

  /// cifar10, cifar100, imagenet, and the CondenseNet layouts
  /// cifar10-baseline and cifar100-baseline.
  static ArchConfig preset(std::string_view name);
  static std::vector<std::string> preset_names();

  /// Reads the [arch] section; `arch.preset` seeds defaults that the other
  /// keys then override.
  static ArchConfig from_config(const ConfigFile& cfg);
  void write(ConfigFile& cfg) const;
  static std::span<const std::string_view> known_keys();

  void validate() const;
  PruneConfig prune_config() const { return {prune_p, cardinality, cardinality}; }
  std::size_t resolved_stem_channels() const;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;
};

std::string format_stages(std::span<const StageConfig> stages);
std::vector<StageConfig> parse_stages(std::string_view text);

enum class NodeKind {
  kConv,           // standard or grouped convolution
  kLearnedConv,    // 1x1 convolution whose slots are pruned by a mask
  kCondensedConv,  // learned conv after physical compaction
  kDepthwise,
  kPointwise,
  kBatchNorm,
  kReLU6,
  kAvgPool,
  kGlobalPool,
  kDropout,
  kLinear,
  kSoftmax,
  kBlockInput,  // remembers its input for the matching concat
  kConcat,
};

std::string_view kind_name(NodeKind kind);

enum class ParamRole { kWeight, kBias, kGamma, kBeta, kRunningMean, kRunningVar };

struct Parameter {
  std::string name;
  ParamRole role = ParamRole::kWeight;
  Tensor4 value;
  std::size_t owner = 0;  // node index

  /// Running statistics are buffers, not learned parameters.
  bool trainable() const { return role != ParamRole::kRunningMean && role != ParamRole::kRunningVar; }
};

class ParameterRegistry {
 public:
  std::size_t add(std::string name, ParamRole role, Tensor4 value, std::size_t owner);

  std::size_t size() const { return params_.size(); }
  const Parameter& operator[](std::size_t i) const { return params_.at(i); }
  std::optional<std::size_t> find(std::string_view name) const;

  /// Replaces a value; the new tensor must keep the old shape.
  void set(std::size_t i, Tensor4 value);
  /// Replaces a value with a possibly different shape (compaction).
  void reshape_set(std::size_t i, Tensor4 value);

  std::size_t trainable_count() const;

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

struct Node {
  std::string id;
  NodeKind kind = NodeKind::kConv;
  Shape4 in_shape;   // per-sample, n = 1
  Shape4 out_shape;  // per-sample, n = 1
  ConvSpec conv;
  PoolSpec pool;
  double dropout_rate = 0.0;
  std::size_t mask_groups = 0;  // learned and condensed convs
  PruneMask mask;               // learned convs
  std::optional<CompactConv> condensed;
  std::vector<std::size_t> params;  // registry indices owned by this node
};

using MaskSet = std::map<std::string, PruneMask>;

class NetworkGraph {
 public:
  ArchConfig config;
  std::vector<Node> nodes;
  ParameterRegistry params;
  bool compacted = false;

  const Node& node(std::string_view id) const;
  std::optional<std::size_t> find_node(std::string_view id) const;
  std::vector<std::size_t> learned_convs() const;

  /// Current masks of every learned conv, keyed by node id.
  MaskSet masks() const;
  /// Installs masks and zeroes the pruned weights. Masks must be nested in
  /// the current ones.
  void set_masks(const MaskSet& masks);
  std::size_t pruned_total() const;
};

/// Builds the layer list with shape annotations and zero-valued parameters.
NetworkGraph build(const ArchConfig& config);

/// Deterministic He-normal conv init, unit BN, small normal linear weights
/// with zero bias.
void init_params(NetworkGraph& graph, std::uint64_t seed);

/// Class probabilities (n, classes, 1, 1) in inference mode.
Tensor4 forward(const NetworkGraph& graph, const Tensor4& input);

/// Cached state for one training step: forward in train mode, then
/// backward from the gradient of the loss with respect to the logits.
class TrainingPass {
 public:
  /// Updates batch-norm running statistics in the graph.
  Tensor4 forward(NetworkGraph& graph, const Tensor4& input, std::uint64_t dropout_seed);
  const Tensor4& logits() const;

  /// Per-parameter gradients indexed like the registry; buffers and
  /// parameters without a gradient stay empty. Pruned slots get 0.
  std::vector<std::optional<Tensor4>> backward(const NetworkGraph& graph,
                                               const Tensor4& d_logits) const;

  struct Cache;

 private:
  std::shared_ptr<const Cache> cache_;
};

/// Final masks: every learned conv pruned to its share of A*C - p*A using
/// the L1 scores of its current weights, nested in the current masks.
MaskSet final_masks(const NetworkGraph& graph);

/// Masks for cost projection: final per-group counts, lowest channels kept.
MaskSet quota_masks(const NetworkGraph& graph);

/// Replaces every learned conv by its compacted form.
NetworkGraph compact_graph(const NetworkGraph& graph);

}  // namespace cnxt
