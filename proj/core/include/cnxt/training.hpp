// SPDX-License-Identifier: Apache-2.0
//
// Losses, optimizer, schedules and the training loop.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnxt/arch.hpp"
#include "cnxt/config.hpp"
#include "cnxt/data.hpp"

namespace cnxt {

enum class LossKind { kFocal, kCrossEntropy };

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  double base_lr = 0.1;
  double momentum = 0.9;
  bool nesterov = true;
  double group_lasso_rate = 1e-5;
  LossKind loss = LossKind::kFocal;
  double focal_gamma = 0.5;
  double class_balance_beta = 0.999;
  bool augment = true;
  bool prune = true;  // run the staged pruning schedule
  std::uint64_t seed = 0;

  /// Reads the [train] section.
  static TrainConfig from_config(const ConfigFile& cfg);
  void write(ConfigFile& cfg) const;
  static std::span<const std::string_view> known_keys();
  void validate() const;
};

/// 0.5 * base * (1 + cos(pi * step / total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

/// v <- mu v - lr g, then theta <- theta + mu v - lr g (Nesterov) or
/// theta <- theta + v.
template <typename T>
void sgd_nesterov_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity,
                       double lr, double momentum, bool nesterov = true);

template <typename T>
struct LossValue {
  double loss = 0.0;
  BasicTensor4<T> grad;  // with respect to the logits, or the weights for penalties
};

/// Mean negative log-likelihood of `probs` (n, classes, 1, 1); the gradient
/// is (probs - one_hot) / n.
template <typename T>
LossValue<T> cross_entropy_loss(const BasicTensor4<T>& probs, std::span<const std::size_t> labels);

/// (1 - beta) / (1 - beta^n_c), scaled to mean 1 over classes.
std::vector<double> class_balance_weights(std::span<const std::size_t> class_counts, double beta);

/// Mean of -w_y (1 - p_y)^gamma log p_y; gradient with respect to the logits.
template <typename T>
LossValue<T> focal_loss(const BasicTensor4<T>& probs, std::span<const std::size_t> labels,
                        std::span<const double> class_weights, double gamma);

template <typename T>
LossValue<T> class_balanced_focal_loss(const BasicTensor4<T>& probs,
                                       std::span<const std::size_t> labels,
                                       std::span<const std::size_t> class_counts, double beta,
                                       double gamma) {
  const auto w = class_balance_weights(class_counts, beta);
  return focal_loss(probs, labels, std::span<const double>(w), gamma);
}

struct GroupLassoValue {
  double penalty = 0.0;
  std::vector<std::vector<double>> grads;
};

/// rate * sum_g ||w_g||_2; gradient rate * w_g / ||w_g||, zero at the origin.
GroupLassoValue group_lasso_penalty(std::span<const std::vector<double>> groups, double rate);

/// The same penalty over the (group, input channel) slots of a learned conv.
template <typename T>
LossValue<T> slot_group_lasso(const BasicTensor4<T>& weights, std::size_t mask_groups, double rate);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  double top1_error = 0.0;
  double top5_error = 0.0;
  std::size_t pruned = 0;
};

/// "epoch lr loss top1 top5 pruned_count" header and records.
std::string metrics_header();
std::string format_metrics(const EpochMetrics& m);

struct TrainState {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  std::vector<Tensor4> velocity;  // registry order; buffers hold an empty 1x1x1x1
  std::vector<EpochMetrics> history;
};

struct EvalResult {
  double top1_error = 0.0;
  double topk_error = 0.0;
  std::size_t k = 5;
  std::size_t count = 0;
};

/// Indices of the k largest values, lower index first on ties.
std::vector<std::size_t> top_k(std::span<const float> scores, std::size_t k);

/// k defaults to 5 and is clamped to the class count; an explicit k larger
/// than the class count is rejected.
EvalResult evaluate(const NetworkGraph& graph, const Dataset& data, std::size_t batch_size = 256,
                    std::optional<std::size_t> k = std::nullopt);

struct TrainHooks {
  std::function<void(const EpochMetrics&)> on_epoch;
  const Dataset* eval_set = nullptr;  // metrics on held-out data when set
};

/// Trains in place. Divergence throws NumericError naming the step.
TrainState train(NetworkGraph& graph, const Dataset& data, const TrainConfig& config,
                 const TrainHooks& hooks = {});

/// One pruning stage on every learned conv, scored by current weights.
void prune_stage(NetworkGraph& graph, std::size_t stage);

}  // namespace cnxt
