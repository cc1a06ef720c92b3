// SPDX-License-Identifier: Apache-2.0
#include "cnxt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <sstream>

namespace cnxt {

std::uint64_t conv_flops(const ConvSpec& spec, std::size_t out_h, std::size_t out_w) {
  return static_cast<std::uint64_t>(out_h) * out_w * spec.kernel * spec.kernel *
         spec.in_per_group() * spec.out_channels;
}

std::uint64_t conv_params(const ConvSpec& spec, bool bias) {
  return static_cast<std::uint64_t>(spec.out_channels) * spec.in_per_group() * spec.kernel *
             spec.kernel +
         (bias ? spec.out_channels : 0);
}

std::uint64_t masked_conv_params(const ConvSpec& spec, const PruneMask& mask) {
  const std::uint64_t per_group = spec.out_channels / mask.groups();
  return mask.kept_total() * per_group * spec.kernel * spec.kernel;
}

std::uint64_t masked_conv_flops(const ConvSpec& spec, std::size_t out_h, std::size_t out_w,
                                const PruneMask& mask) {
  return masked_conv_params(spec, mask) * out_h * out_w;
}

CostReport count_layers(std::vector<LayerCost> layers) {
  CostReport r;
  r.layers = std::move(layers);
  for (const auto& l : r.layers) {
    r.total_flops += l.flops;
    r.total_params += l.params;
  }
  return r;
}

CostReport count_graph(const NetworkGraph& graph, const MaskSet* masks) {
  std::vector<LayerCost> rows;
  rows.reserve(graph.nodes.size());
  for (const auto& n : graph.nodes) {
    LayerCost row{n.id, n.kind, 0, 0};
    const std::size_t oh = n.out_shape.h();
    const std::size_t ow = n.out_shape.w();
    switch (n.kind) {
      case NodeKind::kConv:
      case NodeKind::kDepthwise:
      case NodeKind::kPointwise:
        row.flops = conv_flops(n.conv, oh, ow);
        row.params = conv_params(n.conv);
        break;
      case NodeKind::kLearnedConv:
      case NodeKind::kCondensedConv: {
        const PruneMask* mask = &n.mask;
        if (masks) {
          if (const auto it = masks->find(n.id); it != masks->end()) mask = &it->second;
        }
        row.flops = masked_conv_flops(n.conv, oh, ow, *mask);
        row.params = masked_conv_params(n.conv, *mask);
        break;
      }
      case NodeKind::kBatchNorm:
        row.params = 2 * static_cast<std::uint64_t>(n.out_shape.c());
        break;
      case NodeKind::kLinear: {
        const std::uint64_t in = n.in_shape.sample_size();
        const std::uint64_t out = n.out_shape.c();
        row.flops = in * out;
        row.params = in * out + out;
        break;
      }
      default:
        break;
    }
    rows.push_back(std::move(row));
  }
  return count_layers(std::move(rows));
}

CostComparison compare(const CostReport& condensed, const CostReport& baseline) {
  CostComparison c;
  c.baseline_flops = baseline.total_flops;
  c.baseline_params = baseline.total_params;
  auto reduction = [](std::uint64_t now, std::uint64_t base) {
    if (base == 0) return 0.0;
    return 100.0 * (1.0 - static_cast<double>(now) / static_cast<double>(base));
  };
  c.flop_reduction_percent = reduction(condensed.total_flops, baseline.total_flops);
  c.param_reduction_percent = reduction(condensed.total_params, baseline.total_params);
  c.size_delta_bytes = 4 * (static_cast<std::int64_t>(baseline.total_params) -
                            static_cast<std::int64_t>(condensed.total_params));
  return c;
}

CostReport with_comparison(CostReport condensed, const CostReport& baseline) {
  condensed.comparison = compare(condensed, baseline);
  return condensed;
}

CostReport projected_cost(const ArchConfig& config) {
  const NetworkGraph g = build(config);
  const MaskSet masks = quota_masks(g);
  return count_graph(g, &masks);
}

namespace {

std::string millions(std::uint64_t v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << static_cast<double>(v) / 1e6 << "M";
  return s.str();
}

}  // namespace

std::string format_text(const CostReport& report) {
  std::size_t id_width = 5;
  for (const auto& l : report.layers) id_width = std::max(id_width, l.id.size());
  std::ostringstream out;
  out << "# 1 multiply-accumulate = 1 FLOP; BN and activations excluded; params include BN "
         "affine and linear bias\n";
  out << std::left << std::setw(static_cast<int>(id_width)) << "layer" << "  " << std::setw(14)
      << "kind" << std::right << std::setw(14) << "flops" << std::setw(12) << "params" << "\n";
  for (const auto& l : report.layers) {
    if (l.flops == 0 && l.params == 0) continue;
    out << std::left << std::setw(static_cast<int>(id_width)) << l.id << "  " << std::setw(14)
        << kind_name(l.kind) << std::right << std::setw(14) << l.flops << std::setw(12)
        << l.params << "\n";
  }
  out << std::left << std::setw(static_cast<int>(id_width)) << "total" << "  " << std::setw(14)
      << "" << std::right << std::setw(14) << report.total_flops << std::setw(12)
      << report.total_params << "\n";
  out << "flops " << millions(report.total_flops) << "  params " << millions(report.total_params)
      << "\n";
  if (report.comparison) {
    const auto& c = *report.comparison;
    out << std::fixed << std::setprecision(2);
    out << "baseline flops " << millions(c.baseline_flops) << "  params "
        << millions(c.baseline_params) << "\n";
    out << "flop reduction " << c.flop_reduction_percent << "%  param reduction "
        << c.param_reduction_percent << "%\n";
    out << "raw weight size delta " << c.size_delta_bytes << " bytes ("
        << static_cast<double>(c.size_delta_bytes) / 1e6 << " MB, 4-byte weights)\n";
  }
  return out.str();
}

std::string format_records(const CostReport& report) {
  std::ostringstream out;
  for (const auto& l : report.layers) {
    out << l.id << " " << kind_name(l.kind) << " " << l.flops << " " << l.params << "\n";
  }
  out << "TOTAL total " << report.total_flops << " " << report.total_params << "\n";
  return out.str();
}

CalibrationResult calibrate_depth(const ArchConfig& base, const CalibrationTarget& target,
                                  std::size_t max_blocks) {
  const std::size_t stages = base.stages.size();
  if (stages == 0 || max_blocks == 0) throw ConfigError("calibration needs stages and a depth bound");
  CalibrationResult best;
  best.score = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> blocks(stages, 1);
  std::function<void(std::size_t, std::size_t)> visit = [&](std::size_t s, std::size_t cap) {
    if (s == stages) {
      ArchConfig c = base;
      for (std::size_t i = 0; i < stages; ++i) c.stages[i].blocks = blocks[i];
      CostReport r = projected_cost(c);
      const double score =
          std::abs(static_cast<double>(r.total_flops) - target.flops) / target.flops +
          std::abs(static_cast<double>(r.total_params) - target.params) / target.params;
      if (score < best.score) best = {c, std::move(r), score};
      return;
    }
    for (std::size_t b = 1; b <= cap; ++b) {
      blocks[s] = b;
      visit(s + 1, b);
    }
  };
  visit(0, max_blocks);
  return best;
}

}  // namespace cnxt
