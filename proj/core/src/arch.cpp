// SPDX-License-Identifier: Apache-2.0
#include "cnxt/arch.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <numbers>
#include <random>
#include <variant>

#include "cnxt/error.hpp"

namespace cnxt {

// ---------------------------------------------------------------------------
// Configuration

namespace {

constexpr std::array<std::string_view, 14> kArchKeys{
    "arch.preset",     "arch.stages",      "arch.cardinality", "arch.prune_p",
    "arch.num_classes", "arch.in_channels", "arch.height",      "arch.width",
    "arch.dropout",    "arch.bottleneck",  "arch.block",       "arch.conv3x3_groups",
    "arch.stem_stride", "arch.stem_channels"};

std::size_t parse_count(std::string_view text, std::string_view what) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), out);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("malformed " + std::string(what) + " `" + std::string(text) + "`");
  }
  return out;
}

ArchConfig cifar_baseline(std::size_t classes) {
  ArchConfig c;
  c.stages = {{14, 8}, {14, 16}, {14, 32}};
  c.cardinality = 4;
  c.prune_p = 1;
  c.num_classes = classes;
  c.block = BlockKind::kStandard;
  c.conv3x3_groups = 4;
  return c;
}

}  // namespace

ArchConfig ArchConfig::preset(std::string_view name) {
  if (name == "cifar10") return ArchConfig{};
  if (name == "cifar100") {
    ArchConfig c;
    c.num_classes = 100;
    return c;
  }
  if (name == "imagenet") {
    ArchConfig c;
    c.stages = {{4, 8}, {6, 16}, {8, 32}, {10, 64}, {8, 128}};
    c.num_classes = 1000;
    c.height = c.width = 224;
    c.stem_stride = 2;
    return c;
  }
  if (name == "cifar10-baseline") return cifar_baseline(10);
  if (name == "cifar100-baseline") return cifar_baseline(100);
  std::string msg = "unknown architecture preset `" + std::string(name) + "`; choose one of:";
  for (const auto& p : preset_names()) msg += " " + p;
  throw ConfigError(msg);
}

std::vector<std::string> ArchConfig::preset_names() {
  return {"cifar10", "cifar100", "imagenet", "cifar10-baseline", "cifar100-baseline"};
}

std::span<const std::string_view> ArchConfig::known_keys() { return kArchKeys; }

ArchConfig ArchConfig::from_config(const ConfigFile& cfg) {
  ArchConfig c = preset(cfg.text("arch.preset", "cifar10"));
  if (const auto s = cfg.get("arch.stages")) c.stages = parse_stages(*s);
  c.cardinality = cfg.count("arch.cardinality", c.cardinality);
  c.prune_p = cfg.count("arch.prune_p", c.prune_p);
  c.num_classes = cfg.count("arch.num_classes", c.num_classes);
  c.in_channels = cfg.count("arch.in_channels", c.in_channels);
  c.height = cfg.count("arch.height", c.height);
  c.width = cfg.count("arch.width", c.width);
  c.dropout_rate = cfg.real("arch.dropout", c.dropout_rate);
  c.bottleneck = cfg.count("arch.bottleneck", c.bottleneck);
  if (const auto b = cfg.get("arch.block")) {
    if (*b == "separable") {
      c.block = BlockKind::kSeparable;
    } else if (*b == "standard") {
      c.block = BlockKind::kStandard;
    } else {
      throw ConfigError("arch.block must be `separable` or `standard`, got `" + *b + "`");
    }
  }
  c.conv3x3_groups = cfg.count("arch.conv3x3_groups", c.conv3x3_groups);
  c.stem_stride = cfg.count("arch.stem_stride", c.stem_stride);
  c.stem_channels = cfg.count("arch.stem_channels", c.stem_channels);
  c.validate();
  return c;
}

void ArchConfig::write(ConfigFile& cfg) const {
  cfg.set("arch.stages", format_stages(stages));
  cfg.set("arch.cardinality", std::to_string(cardinality));
  cfg.set("arch.prune_p", std::to_string(prune_p));
  cfg.set("arch.num_classes", std::to_string(num_classes));
  cfg.set("arch.in_channels", std::to_string(in_channels));
  cfg.set("arch.height", std::to_string(height));
  cfg.set("arch.width", std::to_string(width));
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, dropout_rate);
  cfg.set("arch.dropout", std::string(buf, res.ptr));
  cfg.set("arch.bottleneck", std::to_string(bottleneck));
  cfg.set("arch.block", block == BlockKind::kSeparable ? "separable" : "standard");
  cfg.set("arch.conv3x3_groups", std::to_string(conv3x3_groups));
  cfg.set("arch.stem_stride", std::to_string(stem_stride));
  cfg.set("arch.stem_channels", std::to_string(stem_channels));
}

std::size_t ArchConfig::resolved_stem_channels() const {
  if (stem_channels != 0) return stem_channels;
  return stages.empty() ? 16 : 2 * stages.front().growth;
}

void ArchConfig::validate() const {
  if (stages.empty()) throw ConfigError("architecture needs at least one stage");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    if (stages[s].blocks == 0 || stages[s].growth == 0) {
      throw ConfigError("stage" + std::to_string(s + 1) + " needs positive blocks and growth");
    }
  }
  if (num_classes == 0 || in_channels == 0 || height == 0 || width == 0) {
    throw ConfigError("classes and input dimensions must be positive");
  }
  if (bottleneck == 0 || stem_stride == 0) {
    throw ConfigError("bottleneck and stem stride must be positive");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1)");
  }
  prune_config().validate();
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const std::size_t k = stages[s].growth;
    const std::string layer = "stage" + std::to_string(s + 1) + ".block1";
    if ((bottleneck * k) % cardinality != 0) {
      throw ConfigError("layer " + layer + ".conv1: " + std::to_string(bottleneck * k) +
                        " output filters cannot be split into cardinality " +
                        std::to_string(cardinality) + " groups");
    }
    if (block == BlockKind::kStandard &&
        (conv3x3_groups == 0 || (bottleneck * k) % conv3x3_groups != 0 || k % conv3x3_groups != 0)) {
      throw ConfigError("layer " + layer + ".conv2: groups " + std::to_string(conv3x3_groups) +
                        " do not divide " + std::to_string(bottleneck * k) + " -> " +
                        std::to_string(k) + " channels");
    }
  }
}

std::string format_stages(std::span<const StageConfig> stages) {
  std::string out;
  for (const auto& s : stages) {
    if (!out.empty()) out += ",";
    out += std::to_string(s.blocks) + "x" + std::to_string(s.growth);
  }
  return out;
}

std::vector<StageConfig> parse_stages(std::string_view text) {
  std::vector<StageConfig> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find(',', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto item = text.substr(pos, end - pos);
    const auto x = item.find('x');
    if (x == std::string_view::npos) {
      throw ConfigError("stage `" + std::string(item) + "` is not of the form <blocks>x<growth>");
    }
    out.push_back({parse_count(item.substr(0, x), "stage block count"),
                   parse_count(item.substr(x + 1), "stage growth rate")});
    pos = end + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Graph containers

std::string_view kind_name(NodeKind kind) {
  switch (kind) {
    case NodeKind::kConv: return "conv";
    case NodeKind::kLearnedConv: return "learned_conv";
    case NodeKind::kCondensedConv: return "condensed_conv";
    case NodeKind::kDepthwise: return "depthwise";
    case NodeKind::kPointwise: return "pointwise";
    case NodeKind::kBatchNorm: return "batch_norm";
    case NodeKind::kReLU6: return "relu6";
    case NodeKind::kAvgPool: return "avg_pool";
    case NodeKind::kGlobalPool: return "global_pool";
    case NodeKind::kDropout: return "dropout";
    case NodeKind::kLinear: return "linear";
    case NodeKind::kSoftmax: return "softmax";
    case NodeKind::kBlockInput: return "block_input";
    case NodeKind::kConcat: return "concat";
  }
  return "unknown";
}

std::size_t ParameterRegistry::add(std::string name, ParamRole role, Tensor4 value,
                                   std::size_t owner) {
  if (find(name)) throw UsageError("duplicate parameter " + name);
  params_.push_back({std::move(name), role, std::move(value), owner});
  return params_.size() - 1;
}

std::optional<std::size_t> ParameterRegistry::find(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

void ParameterRegistry::set(std::size_t i, Tensor4 value) {
  auto& p = params_.at(i);
  if (value.shape() != p.value.shape()) {
    throw ShapeError("parameter " + p.name + " has shape " + p.value.shape().str() + ", got " +
                     value.shape().str());
  }
  p.value = std::move(value);
}

void ParameterRegistry::reshape_set(std::size_t i, Tensor4 value) {
  params_.at(i).value = std::move(value);
}

std::size_t ParameterRegistry::trainable_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) {
    if (p.trainable()) total += p.value.size();
  }
  return total;
}

const Node& NetworkGraph::node(std::string_view id) const {
  const auto i = find_node(id);
  if (!i) throw UsageError("no layer named " + std::string(id));
  return nodes[*i];
}

std::optional<std::size_t> NetworkGraph::find_node(std::string_view id) const {
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].id == id) return i;
  }
  return std::nullopt;
}

std::vector<std::size_t> NetworkGraph::learned_convs() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].kind == NodeKind::kLearnedConv || nodes[i].kind == NodeKind::kCondensedConv) {
      out.push_back(i);
    }
  }
  return out;
}

MaskSet NetworkGraph::masks() const {
  MaskSet out;
  for (std::size_t i : learned_convs()) out.emplace(nodes[i].id, nodes[i].mask);
  return out;
}

void NetworkGraph::set_masks(const MaskSet& masks) {
  for (const auto& [id, mask] : masks) {
    const auto i = find_node(id);
    if (!i || nodes[*i].kind != NodeKind::kLearnedConv) {
      throw UsageError("layer " + id + " is not a prunable convolution");
    }
    Node& n = nodes[*i];
    if (mask.groups() != n.mask_groups || mask.columns() != n.conv.in_channels) {
      throw ShapeError("mask for " + id + " is " + std::to_string(mask.groups()) + "x" +
                       std::to_string(mask.columns()) + ", layer expects " +
                       std::to_string(n.mask_groups) + "x" + std::to_string(n.conv.in_channels));
    }
    if (!mask.nested_in(n.mask)) {
      throw UsageError("mask for " + id + " would restore pruned slots");
    }
    n.mask = mask;
    const std::size_t w = n.params.front();
    params.set(w, apply_mask(params[w].value, mask));
  }
}

std::size_t NetworkGraph::pruned_total() const {
  std::size_t total = 0;
  for (std::size_t i : learned_convs()) total += nodes[i].mask.pruned_total();
  return total;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

class GraphBuilder {
 public:
  explicit GraphBuilder(NetworkGraph& g) : g_(g) {}

  Shape4 shape() const { return shape_; }
  void set_shape(Shape4 s) { shape_ = s; }

  Node& push(std::string id, NodeKind kind, Shape4 out) {
    Node n;
    n.id = std::move(id);
    n.kind = kind;
    n.in_shape = shape_;
    n.out_shape = out;
    g_.nodes.push_back(std::move(n));
    shape_ = out;
    return g_.nodes.back();
  }

  void add_param(Node& n, const char* suffix, ParamRole role, Shape4 s, float fill = 0.0F) {
    const std::size_t owner = g_.nodes.size() - 1;
    n.params.push_back(g_.params.add(n.id + "." + suffix, role, Tensor4(s, fill), owner));
  }

  void conv(const std::string& id, NodeKind kind, const ConvSpec& spec) {
    const Shape4 out = spec.output_shape(shape_);
    Node& n = push(id, kind, out);
    n.conv = spec;
    add_param(n, "weight", ParamRole::kWeight, spec.weight_shape());
  }

  void batch_norm(const std::string& id) {
    const std::size_t c = shape_.c();
    Node& n = push(id, NodeKind::kBatchNorm, shape_);
    add_param(n, "gamma", ParamRole::kGamma, {1, c, 1, 1}, 1.0F);
    add_param(n, "beta", ParamRole::kBeta, {1, c, 1, 1});
    add_param(n, "running_mean", ParamRole::kRunningMean, {1, c, 1, 1});
    add_param(n, "running_var", ParamRole::kRunningVar, {1, c, 1, 1}, 1.0F);
  }

  void simple(const std::string& id, NodeKind kind) { push(id, kind, shape_); }

 private:
  NetworkGraph& g_;
  Shape4 shape_;
};

}  // namespace

NetworkGraph build(const ArchConfig& config) {
  config.validate();
  NetworkGraph g;
  g.config = config;
  GraphBuilder b(g);
  b.set_shape({1, config.in_channels, config.height, config.width});

  b.conv("stem.conv", NodeKind::kConv,
         ConvSpec::standard(3, config.in_channels, config.resolved_stem_channels(),
                            config.stem_stride, 1));

  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const std::size_t k = config.stages[s].growth;
    const std::size_t wide = config.bottleneck * k;
    for (std::size_t blk = 0; blk < config.stages[s].blocks; ++blk) {
      const std::string p = "stage" + std::to_string(s + 1) + ".block" + std::to_string(blk + 1) + ".";
      const Shape4 in = b.shape();
      b.simple(p + "input", NodeKind::kBlockInput);
      b.batch_norm(p + "bn1");
      b.simple(p + "relu1", NodeKind::kReLU6);
      b.conv(p + "conv1", NodeKind::kLearnedConv, ConvSpec::pointwise(in.c(), wide));
      Node& learned = g.nodes.back();
      learned.mask_groups = config.cardinality;
      learned.mask = PruneMask::all_keep(config.cardinality, in.c());
      b.batch_norm(p + "bn2");
      b.simple(p + "relu2", NodeKind::kReLU6);
      if (config.block == BlockKind::kSeparable) {
        b.conv(p + "dwconv", NodeKind::kDepthwise, ConvSpec::depthwise(wide, 3, 1, 1));
        b.conv(p + "pwconv", NodeKind::kPointwise, ConvSpec::pointwise(wide, k));
      } else {
        b.conv(p + "conv2", NodeKind::kConv,
               ConvSpec::grouped(3, wide, k, config.conv3x3_groups, 1, 1));
      }
      b.push(p + "concat", NodeKind::kConcat, in.with_c(in.c() + k));
    }
    if (s + 1 < config.stages.size()) {
      const Shape4 in = b.shape();
      if (in.h() < 2 || in.w() < 2) {
        throw ConfigError("layer trans" + std::to_string(s + 1) + ".pool: input " + in.str() +
                          " is too small for a 2x2 transition");
      }
      Node& n = b.push("trans" + std::to_string(s + 1) + ".pool", NodeKind::kAvgPool,
                       {1, in.c(), in.h() / 2, in.w() / 2});
      n.pool = PoolSpec{2, 2};
    }
  }

  b.batch_norm("head.bn");
  b.simple("head.relu", NodeKind::kReLU6);
  b.push("head.pool", NodeKind::kGlobalPool, {1, b.shape().c(), 1, 1});
  b.simple("head.dropout", NodeKind::kDropout);
  g.nodes.back().dropout_rate = config.dropout_rate;
  const std::size_t features = b.shape().c();
  {
    Node& fc = b.push("head.fc", NodeKind::kLinear, {1, config.num_classes, 1, 1});
    b.add_param(fc, "weight", ParamRole::kWeight, {config.num_classes, features, 1, 1});
    b.add_param(fc, "bias", ParamRole::kBias, {1, config.num_classes, 1, 1});
  }
  b.simple("head.softmax", NodeKind::kSoftmax);
  return g;
}

namespace {

// Box-Muller over the top 53 bits, so streams agree across standard libraries.
class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : gen_(seed) {}
  double next() {
    if (spare_) {
      const double v = *spare_;
      spare_.reset();
      return v;
    }
    double u1 = 0.0;
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  std::mt19937_64 gen_;
  std::optional<double> spare_;
};

Tensor4 normal_tensor(const Shape4& s, double stddev, NormalStream& rng) {
  std::vector<float> v(s.count());
  for (auto& x : v) x = static_cast<float>(stddev * rng.next());
  return Tensor4(s, std::move(v));
}

}  // namespace

void init_params(NetworkGraph& graph, std::uint64_t seed) {
  if (graph.compacted) throw UsageError("cannot re-initialize a compacted network");
  NormalStream rng(seed);
  for (auto& node : graph.nodes) {
    switch (node.kind) {
      case NodeKind::kConv:
      case NodeKind::kLearnedConv:
      case NodeKind::kDepthwise:
      case NodeKind::kPointwise: {
        const double fan_in = static_cast<double>(node.conv.in_per_group() * node.conv.kernel *
                                                  node.conv.kernel);
        const std::size_t w = node.params.front();
        Tensor4 value = normal_tensor(graph.params[w].value.shape(), std::sqrt(2.0 / fan_in), rng);
        if (node.kind == NodeKind::kLearnedConv) value = apply_mask(value, node.mask);
        graph.params.set(w, std::move(value));
        break;
      }
      case NodeKind::kBatchNorm: {
        const Shape4 s = graph.params[node.params[0]].value.shape();
        graph.params.set(node.params[0], Tensor4(s, 1.0F));
        graph.params.set(node.params[1], Tensor4(s, 0.0F));
        graph.params.set(node.params[2], Tensor4(s, 0.0F));
        graph.params.set(node.params[3], Tensor4(s, 1.0F));
        break;
      }
      case NodeKind::kLinear: {
        const Shape4 s = graph.params[node.params[0]].value.shape();
        graph.params.set(node.params[0],
                         normal_tensor(s, std::sqrt(1.0 / static_cast<double>(s.c())), rng));
        graph.params.set(node.params[1], Tensor4(graph.params[node.params[1]].value.shape(), 0.0F));
        break;
      }
      default:
        break;
    }
  }
}

// ---------------------------------------------------------------------------
// Execution

struct TrainingPass::Cache {
  using Op = std::variant<std::monostate, ConvOp<float>, BatchNormOp<float>, ReLU6Op<float>,
                          AvgPoolOp<float>, GlobalAvgPoolOp<float>, DropoutOp<float>,
                          LinearOp<float>>;
  std::vector<Op> ops;
  std::vector<std::size_t> split;  // concat: channels contributed by the block input
  Tensor4 logits;
  std::size_t param_count = 0;
};

namespace {

BatchNormParams<float> bn_params(const ParameterRegistry& reg, const Node& n) {
  BatchNormParams<float> p;
  p.gamma = reg[n.params[0]].value;
  p.beta = reg[n.params[1]].value;
  p.running_mean = reg[n.params[2]].value;
  p.running_var = reg[n.params[3]].value;
  return p;
}

ConvOp<float>::Kind op_kind(NodeKind kind) {
  if (kind == NodeKind::kDepthwise) return ConvOp<float>::Kind::kDepthwise;
  if (kind == NodeKind::kPointwise || kind == NodeKind::kLearnedConv) {
    return ConvOp<float>::Kind::kPointwise;
  }
  return ConvOp<float>::Kind::kGeneral;
}

void check_input(const NetworkGraph& graph, const Tensor4& input) {
  const Shape4& want = graph.nodes.front().in_shape;
  const Shape4& got = input.shape();
  if (got.c() != want.c() || got.h() != want.h() || got.w() != want.w()) {
    throw ShapeError("layer " + graph.nodes.front().id + " expects samples of " +
                     std::to_string(want.c()) + "x" + std::to_string(want.h()) + "x" +
                     std::to_string(want.w()) + ", input is " + got.str());
  }
}

// Runs the graph; with a cache the ops run in train mode and keep their state.
Tensor4 run(const NetworkGraph& graph, ParameterRegistry* stats, const Tensor4& input,
            std::uint64_t seed, TrainingPass::Cache* cache) {
  check_input(graph, input);
  const ParameterRegistry& reg = graph.params;
  const Mode mode = cache ? Mode::kTrain : Mode::kInfer;
  if (cache) {
    cache->ops.assign(graph.nodes.size(), std::monostate{});
    cache->split.assign(graph.nodes.size(), 0);
    cache->param_count = reg.size();
  }
  std::vector<Tensor4> saved;
  Tensor4 x = input;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    const Node& n = graph.nodes[i];
    switch (n.kind) {
      case NodeKind::kConv:
      case NodeKind::kLearnedConv:
      case NodeKind::kDepthwise:
      case NodeKind::kPointwise: {
        const ConvParams<float> p{reg[n.params.front()].value, std::nullopt};
        if (cache) {
          auto& op = cache->ops[i].emplace<ConvOp<float>>(n.conv, op_kind(n.kind));
          x = op.forward(x, p);
        } else if (n.kind == NodeKind::kDepthwise) {
          x = depthwise_conv(x, p, n.conv);
        } else {
          x = conv2d(x, p, n.conv);
        }
        break;
      }
      case NodeKind::kCondensedConv: {
        if (cache) throw UsageError("a compacted network cannot be trained");
        CompactConv cc = *n.condensed;
        cc.weights.clear();
        for (std::size_t idx : n.params) cc.weights.push_back(reg[idx].value);
        x = compact_forward(x, cc);
        break;
      }
      case NodeKind::kBatchNorm: {
        BatchNormParams<float> p = bn_params(reg, n);
        if (cache) {
          x = cache->ops[i].emplace<BatchNormOp<float>>().forward(x, p, mode);
          if (stats) {
            stats->set(n.params[2], p.running_mean);
            stats->set(n.params[3], p.running_var);
          }
        } else {
          x = batch_norm(x, p, mode);
        }
        break;
      }
      case NodeKind::kReLU6:
        x = cache ? cache->ops[i].emplace<ReLU6Op<float>>().forward(x) : relu6(x);
        break;
      case NodeKind::kAvgPool:
        x = cache ? cache->ops[i].emplace<AvgPoolOp<float>>(n.pool).forward(x) : avg_pool(x, n.pool);
        break;
      case NodeKind::kGlobalPool:
        x = cache ? cache->ops[i].emplace<GlobalAvgPoolOp<float>>().forward(x) : global_avg_pool(x);
        break;
      case NodeKind::kDropout:
        if (cache) {
          const std::uint64_t s = seed + 0x9E3779B97F4A7C15ULL * (i + 1);
          x = cache->ops[i].emplace<DropoutOp<float>>().forward(x, n.dropout_rate, mode, s);
        }
        break;
      case NodeKind::kLinear: {
        const Tensor4& w = reg[n.params[0]].value;
        const Tensor4& bias = reg[n.params[1]].value;
        x = cache ? cache->ops[i].emplace<LinearOp<float>>().forward(x, w, bias)
                  : linear(x, w, bias);
        if (cache) cache->logits = x;
        break;
      }
      case NodeKind::kSoftmax:
        x = softmax(x);
        break;
      case NodeKind::kBlockInput:
        saved.push_back(x);
        break;
      case NodeKind::kConcat: {
        if (saved.empty()) throw UsageError("layer " + n.id + " has no matching block input");
        if (cache) cache->split[i] = saved.back().shape().c();
        x = concat_channels(saved.back(), x);
        saved.pop_back();
        break;
      }
    }
    const Shape4& s = x.shape();
    if (s.c() != n.out_shape.c() || s.h() != n.out_shape.h() || s.w() != n.out_shape.w()) {
      throw ShapeError("layer " + n.id + " produced " + s.str() + ", expected per-sample " +
                       n.out_shape.str());
    }
  }
  return x;
}

}  // namespace

Tensor4 forward(const NetworkGraph& graph, const Tensor4& input) {
  return run(graph, nullptr, input, 0, nullptr);
}

Tensor4 TrainingPass::forward(NetworkGraph& graph, const Tensor4& input,
                              std::uint64_t dropout_seed) {
  auto cache = std::make_shared<Cache>();
  Tensor4 out = run(graph, &graph.params, input, dropout_seed, cache.get());
  cache_ = std::move(cache);
  return out;
}

const Tensor4& TrainingPass::logits() const {
  if (!cache_) throw UsageError("logits requested before forward");
  return cache_->logits;
}

std::vector<std::optional<Tensor4>> TrainingPass::backward(const NetworkGraph& graph,
                                                           const Tensor4& d_logits) const {
  if (!cache_) throw UsageError("backward called before forward");
  const Cache& c = *cache_;
  if (c.ops.size() != graph.nodes.size() || c.param_count != graph.params.size()) {
    throw UsageError("backward called with a different network than forward");
  }
  if (d_logits.shape() != c.logits.shape()) {
    throw ShapeError("logit gradient " + d_logits.shape().str() + " does not match logits " +
                     c.logits.shape().str());
  }
  std::vector<std::optional<Tensor4>> grads(graph.params.size());
  std::vector<Tensor4> pending;
  Tensor4 g = d_logits;
  for (std::size_t i = graph.nodes.size(); i-- > 0;) {
    const Node& n = graph.nodes[i];
    switch (n.kind) {
      case NodeKind::kSoftmax:
        break;
      case NodeKind::kConv:
      case NodeKind::kLearnedConv:
      case NodeKind::kDepthwise:
      case NodeKind::kPointwise: {
        auto b = std::get<ConvOp<float>>(c.ops[i]).backward(g);
        Tensor4 dw = std::move(*b.d_weights);
        if (n.kind == NodeKind::kLearnedConv) dw = apply_mask(dw, n.mask);
        grads[n.params.front()] = std::move(dw);
        g = std::move(b.d_input);
        break;
      }
      case NodeKind::kBatchNorm: {
        auto b = std::get<BatchNormOp<float>>(c.ops[i]).backward(g);
        grads[n.params[0]] = std::move(b.d_weights);
        grads[n.params[1]] = std::move(b.d_bias);
        g = std::move(b.d_input);
        break;
      }
      case NodeKind::kReLU6:
        g = std::get<ReLU6Op<float>>(c.ops[i]).backward(g).d_input;
        break;
      case NodeKind::kAvgPool:
        g = std::get<AvgPoolOp<float>>(c.ops[i]).backward(g).d_input;
        break;
      case NodeKind::kGlobalPool:
        g = std::get<GlobalAvgPoolOp<float>>(c.ops[i]).backward(g).d_input;
        break;
      case NodeKind::kDropout:
        g = std::get<DropoutOp<float>>(c.ops[i]).backward(g).d_input;
        break;
      case NodeKind::kLinear: {
        auto b = std::get<LinearOp<float>>(c.ops[i]).backward(g);
        grads[n.params[0]] = std::move(b.d_weights);
        grads[n.params[1]] = std::move(b.d_bias);
        g = std::move(b.d_input);
        break;
      }
      case NodeKind::kConcat: {
        const std::size_t split = c.split[i];
        pending.push_back(slice_channels(g, 0, split));
        g = slice_channels(g, split, g.shape().c() - split);
        break;
      }
      case NodeKind::kBlockInput:
        g = add(g, pending.back());
        pending.pop_back();
        break;
      case NodeKind::kCondensedConv:
        throw UsageError("a compacted network cannot be trained");
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Masks and compaction

MaskSet final_masks(const NetworkGraph& graph) {
  MaskSet out;
  const PruneConfig cfg = graph.config.prune_config();
  for (std::size_t i : graph.learned_convs()) {
    const Node& n = graph.nodes[i];
    if (n.kind != NodeKind::kLearnedConv) {
      out.emplace(n.id, n.mask);
      continue;
    }
    const auto scores = group_l1_scores(graph.params[n.params.front()].value, n.mask_groups);
    out.emplace(n.id, condense(n.mask, scores, group_prune_quota(n.conv.in_channels, cfg)));
  }
  return out;
}

MaskSet quota_masks(const NetworkGraph& graph) {
  MaskSet out;
  const PruneConfig cfg = graph.config.prune_config();
  for (std::size_t i : graph.learned_convs()) {
    const Node& n = graph.nodes[i];
    const ScoreTable flat(n.mask_groups, n.conv.in_channels);
    out.emplace(n.id, condense(PruneMask::all_keep(n.mask_groups, n.conv.in_channels), flat,
                               group_prune_quota(n.conv.in_channels, cfg)));
  }
  return out;
}

NetworkGraph compact_graph(const NetworkGraph& graph) {
  if (graph.compacted) throw UsageError("network is already compacted");
  NetworkGraph out;
  out.config = graph.config;
  out.compacted = true;
  for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
    Node n = graph.nodes[i];
    n.params.clear();
    if (n.kind == NodeKind::kLearnedConv) {
      CompactConv cc = compact(graph.params[graph.nodes[i].params.front()].value, n.conv, n.mask);
      for (std::size_t gi = 0; gi < cc.weights.size(); ++gi) {
        n.params.push_back(out.params.add(n.id + ".group" + std::to_string(gi) + ".weight",
                                          ParamRole::kWeight, cc.weights[gi], i));
      }
      cc.weights.clear();
      n.kind = NodeKind::kCondensedConv;
      n.condensed = std::move(cc);
    } else {
      for (std::size_t idx : graph.nodes[i].params) {
        const Parameter& p = graph.params[idx];
        n.params.push_back(out.params.add(p.name, p.role, p.value, i));
      }
    }
    out.nodes.push_back(std::move(n));
  }
  return out;
}

}  // namespace cnxt
