// SPDX-License-Identifier: Apache-2.0
//
// Datasets, preprocessing and image readers.
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cnxt/tensor.hpp"

namespace cnxt {

/// Images of one shape stored contiguously, with labels.
class Dataset {
 public:
  Dataset() = default;
  Dataset(Shape4 sample_shape, std::size_t num_classes);

  const Shape4& sample_shape() const { return sample_shape_; }  // n = 1
  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t num_classes() const { return num_classes_; }

  /// Label must be < num_classes and pixels finite.
  void add(std::span<const float> pixels, std::size_t label);

  std::span<const float> pixels(std::size_t i) const;
  std::size_t label(std::size_t i) const { return labels_.at(i); }
  std::span<const std::size_t> labels() const { return labels_; }
  std::vector<std::size_t> class_counts() const;

  Tensor4 batch(std::span<const std::size_t> indices) const;
  Dataset subset(std::size_t begin, std::size_t count) const;

  std::vector<std::string> class_names;
  std::vector<std::string> warnings;

 private:
  Shape4 sample_shape_;
  std::size_t num_classes_ = 0;
  std::vector<float> pixels_;
  std::vector<std::size_t> labels_;
};

struct ChannelStats {
  std::array<double, 3> mean{};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};
};

/// Per-channel train-split statistics of pixels scaled to [0, 1], as
/// produced by the cnxt-cifar-stats tool.
ChannelStats cifar10_stats();
ChannelStats cifar100_stats();

enum class CifarVariant { kCifar10, kCifar100 };
enum class Split { kTrain, kTest };

/// Record size in bytes: 1 label + 3072 pixels, plus a coarse label byte
/// for CIFAR-100 (the fine label is used).
std::size_t cifar_record_size(CifarVariant variant);

/// Parses raw records, scaling pixels to [0, 1] and, when `stats` is given,
/// standardizing each channel.
Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant,
                    const ChannelStats* stats, std::string_view origin = "<cifar>");

/// Reads data_batch_{1..5}.bin / test_batch.bin (CIFAR-10) or train.bin /
/// test.bin (CIFAR-100) from `dir`.
Dataset load_cifar(const std::filesystem::path& dir, Split split, CifarVariant variant,
                   bool standardize = true);
bool cifar_present(const std::filesystem::path& dir, CifarVariant variant);
std::vector<std::string> cifar10_class_names();

enum class SyntheticKind { kGaussianBlobs, kStriped };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::kGaussianBlobs;
  std::size_t count = 1000;
  std::size_t classes = 10;
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  double noise = 0.5;  // per-pixel standard deviation
  std::uint64_t seed = 0;    // class layout
  std::uint64_t stream = 0;  // sample draws; held-out sets use another stream
};

/// Blobs: each class has a constant per-channel colour, class colours at
/// least 4 noise deviations apart. Striped: each class has its own stripe
/// orientation and frequency. Labels cycle 0, 1, ..., classes-1.
Dataset synthetic_dataset(const SyntheticSpec& spec);
SyntheticKind parse_synthetic_kind(std::string_view name);

/// Deterministic augmentation draw.
struct AugmentDraw {
  std::size_t offset_y = 4;
  std::size_t offset_x = 4;
  bool flip = false;
};

AugmentDraw draw_augment(std::mt19937_64& rng, std::size_t pad = 4);
/// Zero pad by `pad`, crop at the drawn offset, then optionally mirror.
Tensor4 augment(const Tensor4& image, const AugmentDraw& draw, std::size_t pad = 4);
Tensor4 augment(const Tensor4& image, std::mt19937_64& rng, std::size_t pad = 4);
Tensor4 hflip(const Tensor4& image);

/// Binary PPM (P6, maxval <= 255) as a (1, 3, h, w) tensor in [0, 1].
Tensor4 read_ppm(const std::filesystem::path& path);
Tensor4 parse_ppm(std::span<const std::uint8_t> bytes, std::string_view origin = "<ppm>");
void write_ppm(const std::filesystem::path& path, const Tensor4& image);

/// Nearest-neighbour resize of every sample.
Tensor4 resize_nearest(const Tensor4& image, std::size_t height, std::size_t width);
Tensor4 standardize(const Tensor4& image, const ChannelStats& stats);

/// Label-index file: `class_index<TAB>class_name` per line.
std::vector<std::string> read_label_file(const std::filesystem::path& path);
void write_label_file(const std::filesystem::path& path, std::span<const std::string> names);

/// A directory holding labels.txt and `<class_name>_*.ppm` images.
Dataset load_folder(const std::filesystem::path& dir, std::size_t height, std::size_t width,
                    const ChannelStats* stats);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace cnxt
