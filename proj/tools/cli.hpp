// SPDX-License-Identifier: Apache-2.0
//
// The `cnxt` command line: train, eval, predict, prune, analyze, export.
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cnxt/config.hpp"
#include "cnxt/data.hpp"

namespace cnxt::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigFailure = 2,  // bad flags, config keys or values
  kIoFailure = 3,      // unreadable files and malformed formats
  kNumericFailure = 4,
};

/// Dataset selection read from the [data] section.
struct DataSettings {
  std::string dataset = "cifar10";  // cifar10 | cifar100 | synthetic | folder
  std::filesystem::path dir = "data/cifar-10-batches-bin";
  std::size_t train_count = 0;  // 0 keeps every record, synthetic defaults to 5000
  std::size_t eval_count = 0;   // synthetic defaults to 1000
  SyntheticKind synthetic_kind = SyntheticKind::kGaussianBlobs;
  double noise = 0.5;
  std::uint64_t seed = 0;
  bool standardize = true;  // ignored for synthetic data

  static DataSettings from_config(const ConfigFile& cfg);
  static std::span<const std::string_view> known_keys();
};

/// Every key accepted in a config file or through --set.
std::vector<std::string_view> known_keys();

/// Channel statistics applied to images of `settings`, or null.
const ChannelStats* input_stats(const DataSettings& settings);

/// Train split (`held_out` false) or evaluation split of the configured
/// dataset, shaped for a network with the given input geometry.
Dataset load_dataset(const DataSettings& settings, bool held_out, std::size_t classes,
                     std::size_t channels, std::size_t height, std::size_t width);

/// Runs one command; `args` excludes the program name.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace cnxt::cli
