// SPDX-License-Identifier: Apache-2.0
#include "cnxt/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cnxt {

void PruneConfig::validate() const {
  if (cardinality == 0 || groups == 0) {
    throw ConfigError("pruning cardinality and groups must be positive");
  }
  if (p > cardinality) {
    throw ConfigError("pruning hyperparameter p=" + std::to_string(p) +
                      " exceeds cardinality C=" + std::to_string(cardinality));
  }
  if (cardinality - p > groups) {
    throw ConfigError("C - p = " + std::to_string(cardinality - p) +
                      " pruned slots per input channel do not fit into " +
                      std::to_string(groups) + " groups");
  }
}

PruneMask PruneMask::all_keep(std::size_t groups, std::size_t columns) {
  PruneMask m;
  m.groups_ = groups;
  m.columns_ = columns;
  m.keep_.assign(groups * columns, 1);
  return m;
}

PruneMask PruneMask::from_flags(std::size_t groups, std::size_t columns,
                                std::vector<std::uint8_t> flags) {
  if (flags.size() != groups * columns) {
    throw ShapeError("mask flags length " + std::to_string(flags.size()) + " does not match " +
                     std::to_string(groups) + "x" + std::to_string(columns));
  }
  for (auto& f : flags) f = f != 0 ? 1 : 0;
  PruneMask m;
  m.groups_ = groups;
  m.columns_ = columns;
  m.keep_ = std::move(flags);
  return m;
}

std::size_t PruneMask::kept_in_group(std::size_t g) const {
  const auto* row = keep_.data() + g * columns_;
  return static_cast<std::size_t>(std::count(row, row + columns_, std::uint8_t{1}));
}

std::size_t PruneMask::kept_total() const {
  return static_cast<std::size_t>(std::count(keep_.begin(), keep_.end(), std::uint8_t{1}));
}

std::vector<std::size_t> PruneMask::kept_columns(std::size_t g) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < columns_; ++j) {
    if (kept(g, j)) out.push_back(j);
  }
  return out;
}

bool PruneMask::nested_in(const PruneMask& other) const {
  if (groups_ != other.groups_ || columns_ != other.columns_) return false;
  for (std::size_t i = 0; i < keep_.size(); ++i) {
    if (keep_[i] && !other.keep_[i]) return false;
  }
  return true;
}

std::size_t total_pruned_slots(std::size_t in_channels, const PruneConfig& config) {
  config.validate();
  return in_channels * config.cardinality - config.p * in_channels;
}

std::vector<std::size_t> group_prune_quota(std::size_t in_channels, const PruneConfig& config) {
  const std::size_t total = total_pruned_slots(in_channels, config);
  const std::size_t base = total / config.groups;
  const std::size_t extra = total % config.groups;
  std::vector<std::size_t> quota(config.groups, base);
  for (std::size_t g = 0; g < extra; ++g) ++quota[g];
  return quota;
}

ScoreTable group_l1_scores(const Tensor4& weights, std::size_t groups) {
  const Shape4& s = weights.shape();
  if (groups == 0 || s.n() % groups != 0) {
    throw ShapeError("cannot split " + std::to_string(s.n()) + " output filters into " +
                     std::to_string(groups) + " groups");
  }
  const std::size_t per_group = s.n() / groups;
  const std::size_t taps = s.plane_size();
  ScoreTable scores(groups, s.c());
  for (std::size_t o = 0; o < s.n(); ++o) {
    const std::size_t g = o / per_group;
    for (std::size_t j = 0; j < s.c(); ++j) {
      const float* w = weights.data() + weights.index(o, j, 0, 0);
      double acc = 0.0;
      for (std::size_t t = 0; t < taps; ++t) acc += std::abs(static_cast<double>(w[t]));
      scores.at(g, j) += acc;
    }
  }
  return scores;
}

ScoreTable group_l1_scores(const Tensor4& weights, const ConvSpec& spec) {
  spec.validate();
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("weights " + weights.shape().str() + " do not match spec " + spec.str());
  }
  return group_l1_scores(weights, spec.groups);
}

namespace {

// Column order from most to least important; ties keep the lower index first.
std::vector<std::size_t> rank_columns(const ScoreTable& scores, std::size_t g) {
  std::vector<std::size_t> order(scores.columns());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores.at(g, a) > scores.at(g, b);
  });
  return order;
}

}  // namespace

PruneMask build_prune_mask(const ScoreTable& scores, const PruneConfig& config,
                           std::size_t in_channels) {
  config.validate();
  if (scores.groups() != config.groups || scores.columns() != in_channels) {
    throw ShapeError("score table " + std::to_string(scores.groups()) + "x" +
                     std::to_string(scores.columns()) + " does not cover " +
                     std::to_string(config.groups) + " groups x " + std::to_string(in_channels) +
                     " input channels");
  }
  const auto quota = group_prune_quota(in_channels, config);
  return condense(PruneMask::all_keep(config.groups, in_channels), scores, quota);
}

PruneMask condense(const PruneMask& current, const ScoreTable& scores,
                   std::span<const std::size_t> target_pruned) {
  if (scores.groups() != current.groups() || scores.columns() != current.columns() ||
      target_pruned.size() != current.groups()) {
    throw ShapeError("condense operands disagree on mask dimensions");
  }
  PruneMask next = current;
  for (std::size_t g = 0; g < current.groups(); ++g) {
    if (target_pruned[g] > current.columns()) {
      throw ConfigError("group " + std::to_string(g) + " cannot prune " +
                        std::to_string(target_pruned[g]) + " of " +
                        std::to_string(current.columns()) + " slots");
    }
    std::size_t pruned = current.pruned_in_group(g);
    if (pruned > target_pruned[g]) {
      throw ConfigError("group " + std::to_string(g) + " already prunes " + std::to_string(pruned) +
                        " slots; condensing to " + std::to_string(target_pruned[g]) +
                        " would regrow pruned connections");
    }
    const auto order = rank_columns(scores, g);
    for (auto it = order.rbegin(); it != order.rend() && pruned < target_pruned[g]; ++it) {
      if (next.kept(g, *it)) {
        next.drop(g, *it);
        ++pruned;
      }
    }
  }
  return next;
}

template <typename T>
BasicTensor4<T> apply_mask(const BasicTensor4<T>& weights, const PruneMask& mask) {
  const Shape4& s = weights.shape();
  if (mask.empty() || s.c() != mask.columns() || s.n() % mask.groups() != 0) {
    throw ShapeError("mask " + std::to_string(mask.groups()) + "x" +
                     std::to_string(mask.columns()) + " does not fit weights " + s.str());
  }
  const std::size_t per_group = s.n() / mask.groups();
  std::vector<T> out = weights.to_vector();
  for (std::size_t o = 0; o < s.n(); ++o) {
    const std::size_t g = o / per_group;
    for (std::size_t j = 0; j < s.c(); ++j) {
      if (mask.kept(g, j)) continue;
      const std::size_t base = weights.index(o, j, 0, 0);
      std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(base), s.plane_size(), T{0});
    }
  }
  return BasicTensor4<T>(s, std::move(out));
}

template BasicTensor4<float> apply_mask(const BasicTensor4<float>&, const PruneMask&);
template BasicTensor4<double> apply_mask(const BasicTensor4<double>&, const PruneMask&);

std::vector<std::size_t> stage_epochs(std::size_t total_epochs, const PruneConfig& config) {
  config.validate();
  const std::size_t stages = config.cardinality - config.p;
  std::vector<std::size_t> epochs;
  for (std::size_t s = 1; s <= stages; ++s) {
    epochs.push_back(std::max<std::size_t>(1, s * total_epochs / (2 * stages)));
  }
  return epochs;
}

StageAction prune_schedule(std::size_t epoch, std::size_t total_epochs,
                           const PruneConfig& config) {
  const auto epochs = stage_epochs(total_epochs, config);
  StageAction action;
  action.total_stages = epochs.size();
  for (std::size_t s = 0; s < epochs.size(); ++s) {
    if (epochs[s] == epoch) {
      action.fire = true;
      action.stage = s + 1;
    }
  }
  action.cumulative_fraction =
      static_cast<double>(action.stage) / static_cast<double>(config.cardinality);
  return action;
}

std::vector<std::size_t> stage_quota(std::size_t in_channels, const PruneConfig& config,
                                     std::size_t stage) {
  auto quota = group_prune_quota(in_channels, config);
  const std::size_t stages = config.cardinality - config.p;
  if (stage >= stages) return quota;
  for (auto& q : quota) q = q * stage / stages;
  return quota;
}

std::size_t CompactConv::parameter_count() const {
  std::size_t total = 0;
  const std::size_t per_group = spec.out_channels / mask_groups;
  for (const auto& in : inputs) total += in.size() * per_group * spec.kernel * spec.kernel;
  return total;
}

CompactConv compact(const Tensor4& weights, const ConvSpec& spec, const PruneMask& mask) {
  spec.validate();
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("weights " + weights.shape().str() + " do not match spec " + spec.str());
  }
  if (mask.columns() != spec.in_per_group() || spec.out_channels % mask.groups() != 0 ||
      mask.groups() % spec.groups != 0) {
    throw ShapeError("mask " + std::to_string(mask.groups()) + "x" +
                     std::to_string(mask.columns()) + " does not fit conv " + spec.str());
  }
  CompactConv out;
  out.spec = spec;
  out.mask_groups = mask.groups();
  const std::size_t per_group = spec.out_channels / mask.groups();
  const std::size_t f = spec.kernel;
  const std::size_t masks_per_exec = mask.groups() / spec.groups;
  for (std::size_t g = 0; g < mask.groups(); ++g) {
    const std::size_t exec_group = g / masks_per_exec;
    const auto cols = mask.kept_columns(g);
    std::vector<std::size_t> global;
    for (std::size_t j : cols) global.push_back(exec_group * spec.in_per_group() + j);
    const std::size_t width = std::max<std::size_t>(1, cols.size());
    std::vector<float> w(per_group * width * f * f, 0.0F);
    for (std::size_t o = 0; o < per_group; ++o) {
      for (std::size_t k = 0; k < cols.size(); ++k) {
        const float* src = weights.data() + weights.index(g * per_group + o, cols[k], 0, 0);
        std::copy_n(src, f * f, w.begin() + static_cast<std::ptrdiff_t>((o * width + k) * f * f));
      }
    }
    out.inputs.push_back(std::move(global));
    out.weights.emplace_back(Shape4(per_group, width, f, f), std::move(w));
  }
  return out;
}

Tensor4 compact_forward(const Tensor4& input, const CompactConv& conv) {
  const Shape4& in = input.shape();
  if (in.c() != conv.spec.in_channels) {
    throw ShapeError("compact conv expects " + std::to_string(conv.spec.in_channels) +
                     " channels, input has " + std::to_string(in.c()));
  }
  const Shape4 out_shape = conv.spec.output_shape(in);
  const std::size_t per_group = conv.spec.out_channels / conv.mask_groups;
  const std::size_t plane = out_shape.plane_size();
  std::vector<float> out(out_shape.count(), 0.0F);
  for (std::size_t g = 0; g < conv.mask_groups; ++g) {
    const auto& chans = conv.inputs[g];
    if (chans.empty()) continue;
    std::vector<float> gathered;
    gathered.reserve(in.n() * chans.size() * in.plane_size());
    for (std::size_t n = 0; n < in.n(); ++n) {
      for (std::size_t c : chans) {
        auto src = input.values().subspan(input.index(n, c, 0, 0), in.plane_size());
        gathered.insert(gathered.end(), src.begin(), src.end());
      }
    }
    const Tensor4 sub(Shape4(in.n(), chans.size(), in.h(), in.w()), std::move(gathered));
    const ConvSpec spec{conv.spec.kernel, chans.size(), per_group, 1, conv.spec.stride,
                        conv.spec.padding};
    const Tensor4 y = conv2d(sub, ConvParams<float>{conv.weights[g], std::nullopt}, spec);
    for (std::size_t n = 0; n < in.n(); ++n) {
      auto src = y.values().subspan(n * per_group * plane, per_group * plane);
      std::copy(src.begin(), src.end(),
                out.begin() +
                    static_cast<std::ptrdiff_t>((n * conv.spec.out_channels + g * per_group) * plane));
    }
  }
  return Tensor4(out_shape, std::move(out));
}

}  // namespace cnxt
