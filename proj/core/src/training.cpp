// SPDX-License-Identifier: Apache-2.0
#include "cnxt/training.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "cnxt/error.hpp"

namespace cnxt {

namespace {

constexpr std::array<std::string_view, 12> kTrainKeys{
    "train.epochs",      "train.batch_size",  "train.lr",          "train.momentum",
    "train.nesterov",    "train.group_lasso", "train.loss",        "train.focal_gamma",
    "train.class_balance_beta", "train.augment", "train.prune",    "train.seed"};

std::string real_text(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

TrainConfig TrainConfig::from_config(const ConfigFile& cfg) {
  TrainConfig c;
  c.epochs = cfg.count("train.epochs", c.epochs);
  c.batch_size = cfg.count("train.batch_size", c.batch_size);
  c.base_lr = cfg.real("train.lr", c.base_lr);
  c.momentum = cfg.real("train.momentum", c.momentum);
  c.nesterov = cfg.flag("train.nesterov", c.nesterov);
  c.group_lasso_rate = cfg.real("train.group_lasso", c.group_lasso_rate);
  if (const auto loss = cfg.get("train.loss")) {
    if (*loss == "focal") {
      c.loss = LossKind::kFocal;
    } else if (*loss == "ce") {
      c.loss = LossKind::kCrossEntropy;
    } else {
      throw ConfigError("train.loss must be `focal` or `ce`, got `" + *loss + "`");
    }
  }
  c.focal_gamma = cfg.real("train.focal_gamma", c.focal_gamma);
  c.class_balance_beta = cfg.real("train.class_balance_beta", c.class_balance_beta);
  c.augment = cfg.flag("train.augment", c.augment);
  c.prune = cfg.flag("train.prune", c.prune);
  c.seed = cfg.count("train.seed", c.seed);
  c.validate();
  return c;
}

void TrainConfig::write(ConfigFile& cfg) const {
  cfg.set("train.epochs", std::to_string(epochs));
  cfg.set("train.batch_size", std::to_string(batch_size));
  cfg.set("train.lr", real_text(base_lr));
  cfg.set("train.momentum", real_text(momentum));
  cfg.set("train.nesterov", nesterov ? "true" : "false");
  cfg.set("train.group_lasso", real_text(group_lasso_rate));
  cfg.set("train.loss", loss == LossKind::kFocal ? "focal" : "ce");
  cfg.set("train.focal_gamma", real_text(focal_gamma));
  cfg.set("train.class_balance_beta", real_text(class_balance_beta));
  cfg.set("train.augment", augment ? "true" : "false");
  cfg.set("train.prune", prune ? "true" : "false");
  cfg.set("train.seed", std::to_string(seed));
}

std::span<const std::string_view> TrainConfig::known_keys() { return kTrainKeys; }

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs must be at least 1");
  if (batch_size == 0) throw ConfigError("train.batch_size must be at least 1");
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("train.lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must lie in [0, 1)");
  if (!(group_lasso_rate >= 0.0)) throw ConfigError("train.group_lasso must be non-negative");
  if (!(focal_gamma >= 0.0)) throw ConfigError("train.focal_gamma must be non-negative");
  if (!(class_balance_beta >= 0.0 && class_balance_beta < 1.0)) {
    throw ConfigError("train.class_balance_beta must lie in [0, 1)");
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0 || step > total_steps) {
    throw UsageError("cosine schedule step " + std::to_string(step) + " outside [0, " +
                     std::to_string(total_steps) + "]");
  }
  if (step == total_steps) return 0.0;
  if (2 * step == total_steps) return 0.5 * base_lr;
  return 0.5 * base_lr *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

template <typename T>
void sgd_nesterov_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity,
                       double lr, double momentum, bool nesterov) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw ShapeError("optimizer operands differ in size: " + std::to_string(params.size()) + ", " +
                     std::to_string(grads.size()) + ", " + std::to_string(velocity.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double v = momentum * velocity[i] - lr * g;
    velocity[i] = static_cast<T>(v);
    const double step = nesterov ? momentum * v - lr * g : v;
    params[i] = static_cast<T>(params[i] + step);
  }
}

template void sgd_nesterov_step(std::span<float>, std::span<const float>, std::span<float>, double,
                                double, bool);
template void sgd_nesterov_step(std::span<double>, std::span<const double>, std::span<double>,
                                double, double, bool);

namespace {

template <typename T>
void check_probs(const BasicTensor4<T>& probs, std::span<const std::size_t> labels) {
  const Shape4& s = probs.shape();
  if (labels.size() != s.n()) {
    throw ShapeError(std::to_string(labels.size()) + " labels for " + std::to_string(s.n()) +
                     " predictions");
  }
  for (auto l : labels) {
    if (l >= s.sample_size()) {
      throw UsageError("label " + std::to_string(l) + " out of range for " +
                       std::to_string(s.sample_size()) + " classes");
    }
  }
}

}  // namespace

template <typename T>
LossValue<T> cross_entropy_loss(const BasicTensor4<T>& probs, std::span<const std::size_t> labels) {
  check_probs(probs, labels);
  const Shape4& s = probs.shape();
  const std::size_t k = s.sample_size();
  std::vector<T> grad = probs.to_vector();
  double total = 0.0;
  const double inv_n = 1.0 / static_cast<double>(s.n());
  for (std::size_t i = 0; i < s.n(); ++i) {
    const double p = std::max(static_cast<double>(probs[i * k + labels[i]]), 1e-300);
    total -= std::log(p);
    grad[i * k + labels[i]] -= T{1};
    for (std::size_t j = 0; j < k; ++j) grad[i * k + j] = static_cast<T>(grad[i * k + j] * inv_n);
  }
  return {total * inv_n, BasicTensor4<T>(s, std::move(grad))};
}

std::vector<double> class_balance_weights(std::span<const std::size_t> class_counts, double beta) {
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("class balance beta must lie in [0, 1)");
  if (class_counts.empty()) throw ConfigError("class balance needs at least one class");
  std::vector<double> w;
  double sum = 0.0;
  for (auto n : class_counts) {
    if (n == 0) throw ConfigError("class balance needs a positive count for every class");
    const double v = (1.0 - beta) / (1.0 - std::pow(beta, static_cast<double>(n)));
    w.push_back(v);
    sum += v;
  }
  for (auto& v : w) v *= static_cast<double>(w.size()) / sum;
  return w;
}

template <typename T>
LossValue<T> focal_loss(const BasicTensor4<T>& probs, std::span<const std::size_t> labels,
                        std::span<const double> class_weights, double gamma) {
  if (!(gamma >= 0.0)) throw ConfigError("focal gamma must be non-negative");
  check_probs(probs, labels);
  const Shape4& s = probs.shape();
  const std::size_t k = s.sample_size();
  if (class_weights.size() != k) {
    throw ShapeError(std::to_string(class_weights.size()) + " class weights for " +
                     std::to_string(k) + " classes");
  }
  std::vector<T> grad(s.count(), T{0});
  const double inv_n = 1.0 / static_cast<double>(s.n());
  double total = 0.0;
  for (std::size_t i = 0; i < s.n(); ++i) {
    const std::size_t y = labels[i];
    const double w = class_weights[y];
    const double p = std::max(static_cast<double>(probs[i * k + y]), 1e-300);
    const double q = 1.0 - p;
    const double logp = std::log(p);
    const double qg = gamma == 0.0 ? 1.0 : std::pow(q, gamma);
    total -= w * qg * logp;
    // dL/dp_y * p_y; the softmax Jacobian then distributes it over logits.
    double tail = 0.0;
    if (gamma != 0.0 && q > 0.0) tail = gamma * std::pow(q, gamma - 1.0) * p * logp;
    const double coef = -w * (qg - tail) * inv_n;
    for (std::size_t j = 0; j < k; ++j) {
      const double delta = j == y ? 1.0 : 0.0;
      grad[i * k + j] = static_cast<T>(coef * (delta - static_cast<double>(probs[i * k + j])));
    }
  }
  return {total * inv_n, BasicTensor4<T>(s, std::move(grad))};
}

#define CNXT_INSTANTIATE_LOSSES(T)                                                             \
  template LossValue<T> cross_entropy_loss(const BasicTensor4<T>&, std::span<const std::size_t>); \
  template LossValue<T> focal_loss(const BasicTensor4<T>&, std::span<const std::size_t>,        \
                                   std::span<const double>, double);                           \
  template LossValue<T> slot_group_lasso(const BasicTensor4<T>&, std::size_t, double);

GroupLassoValue group_lasso_penalty(std::span<const std::vector<double>> groups, double rate) {
  if (!(rate >= 0.0)) throw ConfigError("group lasso rate must be non-negative");
  GroupLassoValue out;
  for (const auto& g : groups) {
    double sq = 0.0;
    for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    out.penalty += rate * norm;
    std::vector<double> d(g.size(), 0.0);
    if (norm > 0.0) {
      for (std::size_t i = 0; i < g.size(); ++i) d[i] = rate * g[i] / norm;
    }
    out.grads.push_back(std::move(d));
  }
  return out;
}

template <typename T>
LossValue<T> slot_group_lasso(const BasicTensor4<T>& weights, std::size_t mask_groups, double rate) {
  if (!(rate >= 0.0)) throw ConfigError("group lasso rate must be non-negative");
  const Shape4& s = weights.shape();
  if (mask_groups == 0 || s.n() % mask_groups != 0) {
    throw ShapeError("cannot split " + std::to_string(s.n()) + " filters into " +
                     std::to_string(mask_groups) + " groups");
  }
  const std::size_t per = s.n() / mask_groups;
  const std::size_t taps = s.plane_size();
  std::vector<T> grad(s.count(), T{0});
  double penalty = 0.0;
  if (rate == 0.0) return {0.0, BasicTensor4<T>(s, std::move(grad))};
  for (std::size_t g = 0; g < mask_groups; ++g) {
    for (std::size_t j = 0; j < s.c(); ++j) {
      double sq = 0.0;
      for (std::size_t o = g * per; o < (g + 1) * per; ++o) {
        const T* w = weights.data() + weights.index(o, j, 0, 0);
        for (std::size_t t = 0; t < taps; ++t) sq += static_cast<double>(w[t]) * w[t];
      }
      const double norm = std::sqrt(sq);
      penalty += rate * norm;
      if (norm == 0.0) continue;
      for (std::size_t o = g * per; o < (g + 1) * per; ++o) {
        const std::size_t base = weights.index(o, j, 0, 0);
        for (std::size_t t = 0; t < taps; ++t) {
          grad[base + t] = static_cast<T>(rate * weights[base + t] / norm);
        }
      }
    }
  }
  return {penalty, BasicTensor4<T>(s, std::move(grad))};
}

CNXT_INSTANTIATE_LOSSES(float)
CNXT_INSTANTIATE_LOSSES(double)

#undef CNXT_INSTANTIATE_LOSSES

std::string metrics_header() { return "epoch lr loss top1 top5 pruned_count"; }

std::string format_metrics(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu %.9g %.9g %.6f %.6f %zu", m.epoch, m.lr, m.loss,
                m.top1_error, m.top5_error, m.pruned);
  return buf;
}

std::vector<std::size_t> top_k(std::span<const float> scores, std::size_t k) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  k = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
                    });
  order.resize(k);
  return order;
}

namespace {

struct Hits {
  std::size_t top1 = 0;
  std::size_t topk = 0;
};

Hits count_hits(const Tensor4& probs, std::span<const std::size_t> labels, std::size_t k) {
  Hits h;
  const std::size_t classes = probs.shape().sample_size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = probs.values().subspan(i * classes, classes);
    const auto best = top_k(row, k);
    if (best.front() == labels[i]) ++h.top1;
    if (std::find(best.begin(), best.end(), labels[i]) != best.end()) ++h.topk;
  }
  return h;
}

}  // namespace

EvalResult evaluate(const NetworkGraph& graph, const Dataset& data, std::size_t batch_size,
                    std::optional<std::size_t> k) {
  const std::size_t classes = graph.config.num_classes;
  if (k && (*k == 0 || *k > classes)) {
    throw UsageError("top-k of " + std::to_string(*k) + " requested for " + std::to_string(classes) +
                     " classes");
  }
  if (data.num_classes() > classes) {
    throw ShapeError("dataset has " + std::to_string(data.num_classes()) +
                     " classes, network predicts " + std::to_string(classes));
  }
  if (batch_size == 0) throw UsageError("evaluation batch size must be positive");
  EvalResult r;
  r.k = k.value_or(std::min<std::size_t>(5, classes));
  r.count = data.size();
  if (data.empty()) return r;
  Hits total;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - start);
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = start + i;
    const Tensor4 probs = forward(graph, data.batch(idx));
    const Hits h = count_hits(probs, data.labels().subspan(start, n), r.k);
    total.top1 += h.top1;
    total.topk += h.topk;
  }
  const double n = static_cast<double>(data.size());
  r.top1_error = 1.0 - static_cast<double>(total.top1) / n;
  r.topk_error = 1.0 - static_cast<double>(total.topk) / n;
  return r;
}

namespace {

void zero_pruned_slots(NetworkGraph& graph, TrainState& state) {
  for (std::size_t i : graph.learned_convs()) {
    const Node& n = graph.nodes[i];
    const std::size_t w = n.params.front();
    state.velocity[w] = apply_mask(state.velocity[w], n.mask);
  }
}

Tensor4 augment_batch(const Tensor4& batch, std::mt19937_64& rng) {
  const Shape4& s = batch.shape();
  std::vector<float> out;
  out.reserve(s.count());
  for (std::size_t n = 0; n < s.n(); ++n) {
    const Tensor4 img = augment(take_sample(batch, n), rng);
    out.insert(out.end(), img.values().begin(), img.values().end());
  }
  return Tensor4(s, std::move(out));
}

}  // namespace

void prune_stage(NetworkGraph& graph, std::size_t stage) {
  const PruneConfig cfg = graph.config.prune_config();
  MaskSet next;
  for (std::size_t i : graph.learned_convs()) {
    const Node& n = graph.nodes[i];
    if (n.kind != NodeKind::kLearnedConv) throw UsageError("cannot prune a compacted network");
    const auto scores = group_l1_scores(graph.params[n.params.front()].value, n.mask_groups);
    next.emplace(n.id, condense(n.mask, scores, stage_quota(n.conv.in_channels, cfg, stage)));
  }
  graph.set_masks(next);
}

TrainState train(NetworkGraph& graph, const Dataset& data, const TrainConfig& config,
                 const TrainHooks& hooks) {
  config.validate();
  if (graph.compacted) throw UsageError("a compacted network cannot be trained");
  if (data.empty()) throw ConfigError("training dataset is empty");
  const Shape4& in = graph.nodes.front().in_shape;
  if (data.sample_shape() != in) {
    throw ShapeError("dataset samples " + data.sample_shape().str() + " do not match network input " +
                     in.str());
  }
  if (data.num_classes() > graph.config.num_classes) {
    throw ShapeError("dataset has more classes than the network predicts");
  }
  const std::size_t classes = graph.config.num_classes;
  std::vector<std::size_t> counts = data.class_counts();
  counts.resize(classes, 0);
  std::vector<double> class_weights(classes, 1.0);
  if (config.loss == LossKind::kFocal) {
    for (auto& c : counts) c = std::max<std::size_t>(c, 1);
    class_weights = class_balance_weights(counts, config.class_balance_beta);
  }

  TrainState state;
  for (const auto& p : graph.params) {
    state.velocity.push_back(p.trainable() ? Tensor4(p.value.shape(), 0.0F) : Tensor4());
  }
  const std::size_t batches = (data.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = config.epochs * batches;
  const PruneConfig prune_cfg = graph.config.prune_config();
  const std::size_t k = std::min<std::size_t>(5, classes);
  const auto learned = graph.learned_convs();

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 shuffle_rng(mix(config.seed, 1));
  std::mt19937_64 augment_rng(mix(config.seed, 2));

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng() % i]);
    double loss_sum = 0.0;
    Hits hits;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t start = b * config.batch_size;
      const std::size_t n = std::min(config.batch_size, data.size() - start);
      const std::span<const std::size_t> idx(order.data() + start, n);
      Tensor4 x = data.batch(idx);
      if (config.augment) x = augment_batch(x, augment_rng);
      std::vector<std::size_t> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = data.label(idx[i]);

      TrainingPass pass;
      const Tensor4 probs = pass.forward(graph, x, mix(config.seed, 3 + state.step));
      LossValue<float> lv = config.loss == LossKind::kFocal
                                ? focal_loss(probs, labels, class_weights, config.focal_gamma)
                                : cross_entropy_loss(probs, labels);
      auto grads = pass.backward(graph, lv.grad);
      double loss = lv.loss;
      if (config.group_lasso_rate > 0.0) {
        for (std::size_t li : learned) {
          const Node& node = graph.nodes[li];
          const std::size_t w = node.params.front();
          auto gl = slot_group_lasso(graph.params[w].value, node.mask_groups, config.group_lasso_rate);
          loss += gl.loss;
          grads[w] = add(*grads[w], gl.grad);
        }
      }
      if (!std::isfinite(loss)) {
        throw NumericError("training diverged at step " + std::to_string(state.step) + " (epoch " +
                           std::to_string(epoch) + "): loss is " + std::to_string(loss));
      }
      state.lr = cosine_lr(state.step, total_steps, config.base_lr);
      for (std::size_t i = 0; i < graph.params.size(); ++i) {
        if (!grads[i]) continue;
        std::vector<float> theta = graph.params[i].value.to_vector();
        std::vector<float> vel = std::move(state.velocity[i]).release();
        sgd_nesterov_step<float>(theta, grads[i]->values(), vel, state.lr, config.momentum,
                                 config.nesterov);
        const Shape4 shape = graph.params[i].value.shape();
        graph.params.set(i, Tensor4(shape, std::move(theta)));
        state.velocity[i] = Tensor4(shape, std::move(vel));
      }
      for (std::size_t li : learned) {
        const Node& node = graph.nodes[li];
        const std::size_t w = node.params.front();
        graph.params.set(w, apply_mask(graph.params[w].value, node.mask));
      }
      zero_pruned_slots(graph, state);
      loss_sum += loss * static_cast<double>(n);
      const Hits h = count_hits(probs, labels, k);
      hits.top1 += h.top1;
      hits.topk += h.topk;
      ++state.step;
    }

    if (config.prune) {
      const StageAction action = prune_schedule(epoch, config.epochs, prune_cfg);
      if (action.fire) prune_stage(graph, action.stage);
      if (epoch == config.epochs) graph.set_masks(final_masks(graph));
      zero_pruned_slots(graph, state);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = state.lr;
    m.loss = loss_sum / static_cast<double>(data.size());
    m.pruned = graph.pruned_total();
    if (hooks.eval_set) {
      const EvalResult r = evaluate(graph, *hooks.eval_set);
      m.top1_error = r.top1_error;
      m.top5_error = r.topk_error;
    } else {
      m.top1_error = 1.0 - static_cast<double>(hits.top1) / static_cast<double>(data.size());
      m.top5_error = 1.0 - static_cast<double>(hits.topk) / static_cast<double>(data.size());
    }
    state.epoch = epoch;
    state.history.push_back(m);
    if (hooks.on_epoch) hooks.on_epoch(m);
  }
  return state;
}

}  // namespace cnxt
