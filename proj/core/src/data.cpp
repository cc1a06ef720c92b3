// SPDX-License-Identifier: Apache-2.0
#include "cnxt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "cnxt/error.hpp"

namespace cnxt {

Dataset::Dataset(Shape4 sample_shape, std::size_t num_classes)
    : sample_shape_(sample_shape.with_n(1)), num_classes_(num_classes) {
  if (num_classes == 0) throw ConfigError("dataset needs at least one class");
}

void Dataset::add(std::span<const float> pixels, std::size_t label) {
  if (pixels.size() != sample_shape_.count()) {
    throw ShapeError("sample has " + std::to_string(pixels.size()) + " values, dataset expects " +
                     sample_shape_.str());
  }
  if (label >= num_classes_) {
    throw CorruptRecordError("label " + std::to_string(label) + " out of range for " +
                             std::to_string(num_classes_) + " classes");
  }
  for (float v : pixels) {
    if (!std::isfinite(v)) throw NumericError("sample contains a non-finite pixel");
  }
  pixels_.insert(pixels_.end(), pixels.begin(), pixels.end());
  labels_.push_back(label);
}

std::span<const float> Dataset::pixels(std::size_t i) const {
  if (i >= labels_.size()) throw UsageError("sample index out of range");
  return std::span<const float>(pixels_).subspan(i * sample_shape_.count(),
                                                 sample_shape_.count());
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes_, 0);
  for (auto l : labels_) ++counts[l];
  return counts;
}

Tensor4 Dataset::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw UsageError("empty batch");
  const std::size_t per = sample_shape_.count();
  std::vector<float> out;
  out.reserve(indices.size() * per);
  for (auto i : indices) {
    const auto px = pixels(i);
    out.insert(out.end(), px.begin(), px.end());
  }
  return Tensor4(sample_shape_.with_n(indices.size()), std::move(out));
}

Dataset Dataset::subset(std::size_t begin, std::size_t count) const {
  if (begin + count > size()) throw UsageError("subset exceeds dataset size");
  Dataset out(sample_shape_, num_classes_);
  out.class_names = class_names;
  for (std::size_t i = begin; i < begin + count; ++i) out.add(pixels(i), labels_[i]);
  return out;
}

// Derived with cnxt-cifar-stats over the respective train splits.
ChannelStats cifar10_stats() { return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}}; }
ChannelStats cifar100_stats() { return {{0.5071, 0.4865, 0.4409}, {0.2673, 0.2564, 0.2762}}; }

std::size_t cifar_record_size(CifarVariant variant) {
  return variant == CifarVariant::kCifar10 ? 3073 : 3074;
}

Dataset parse_cifar(std::span<const std::uint8_t> bytes, CifarVariant variant,
                    const ChannelStats* stats, std::string_view origin) {
  const std::size_t record = cifar_record_size(variant);
  const std::size_t label_bytes = record - 3072;
  const std::size_t classes = variant == CifarVariant::kCifar10 ? 10 : 100;
  Dataset out(Shape4(1, 3, 32, 32), classes);
  if (bytes.empty()) {
    out.warnings.push_back(std::string(origin) + ": empty split, no records");
    return out;
  }
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % record;
    throw TruncatedError(std::string(origin) + ": truncated record at byte offset " +
                             std::to_string(offset),
                         offset);
  }
  std::vector<float> px(3072);
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    const std::size_t label = bytes[off + label_bytes - 1];
    if (label >= classes) {
      throw CorruptRecordError(std::string(origin) + ": label byte " + std::to_string(label) +
                               " at offset " + std::to_string(off + label_bytes - 1) +
                               " exceeds class count " + std::to_string(classes));
    }
    for (std::size_t c = 0; c < 3; ++c) {
      const double mean = stats ? stats->mean[c] : 0.0;
      const double sd = stats ? stats->stddev[c] : 1.0;
      for (std::size_t k = 0; k < 1024; ++k) {
        const double v = bytes[off + label_bytes + c * 1024 + k] / 255.0;
        px[c * 1024 + k] = static_cast<float>((v - mean) / sd);
      }
    }
    out.add(px, label);
  }
  return out;
}

namespace {

constexpr std::array<const char*, 10> kCifar10Names{"airplane", "automobile", "bird", "cat",
                                                    "deer",     "dog",        "frog", "horse",
                                                    "ship",     "truck"};

std::vector<std::filesystem::path> cifar_files(const std::filesystem::path& dir, Split split,
                                               CifarVariant variant) {
  if (variant == CifarVariant::kCifar100) {
    return {dir / (split == Split::kTrain ? "train.bin" : "test.bin")};
  }
  if (split == Split::kTest) return {dir / "test_batch.bin"};
  std::vector<std::filesystem::path> out;
  for (int i = 1; i <= 5; ++i) out.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  return out;
}

}  // namespace

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

std::vector<std::string> cifar10_class_names() {
  return {kCifar10Names.begin(), kCifar10Names.end()};
}

bool cifar_present(const std::filesystem::path& dir, CifarVariant variant) {
  for (auto split : {Split::kTrain, Split::kTest}) {
    for (const auto& f : cifar_files(dir, split, variant)) {
      if (!std::filesystem::exists(f)) return false;
    }
  }
  return true;
}

Dataset load_cifar(const std::filesystem::path& dir, Split split, CifarVariant variant,
                   bool standardize) {
  const ChannelStats stats = variant == CifarVariant::kCifar10 ? cifar10_stats() : cifar100_stats();
  const std::size_t classes = variant == CifarVariant::kCifar10 ? 10 : 100;
  Dataset out(Shape4(1, 3, 32, 32), classes);
  for (const auto& f : cifar_files(dir, split, variant)) {
    const auto bytes = read_file(f);
    const Dataset part = parse_cifar(bytes, variant, standardize ? &stats : nullptr, f.string());
    for (std::size_t i = 0; i < part.size(); ++i) out.add(part.pixels(i), part.label(i));
    out.warnings.insert(out.warnings.end(), part.warnings.begin(), part.warnings.end());
  }
  if (variant == CifarVariant::kCifar10) {
    out.class_names = cifar10_class_names();
  } else if (std::filesystem::exists(dir / "fine_label_names.txt")) {
    std::ifstream in(dir / "fine_label_names.txt");
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) out.class_names.push_back(line);
    }
  }
  if (out.class_names.size() != classes) {
    out.class_names.clear();
    for (std::size_t c = 0; c < classes; ++c) out.class_names.push_back("class" + std::to_string(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

namespace {

double uniform01(std::mt19937_64& gen) { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }

double gaussian(std::mt19937_64& gen) {
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = uniform01(gen);
  const double u2 = uniform01(gen);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void shuffle_indices(std::vector<std::size_t>& v, std::mt19937_64& gen) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[gen() % i]);
}

}  // namespace

SyntheticKind parse_synthetic_kind(std::string_view name) {
  if (name == "gaussian-blobs") return SyntheticKind::kGaussianBlobs;
  if (name == "striped") return SyntheticKind::kStriped;
  throw ConfigError("unknown synthetic kind `" + std::string(name) +
                    "`; choose gaussian-blobs or striped");
}

Dataset synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.count < spec.classes) {
    throw ConfigError("synthetic dataset needs count >= classes >= 1");
  }
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic noise must be non-negative");
  const Shape4 shape(1, spec.channels, spec.height, spec.width);
  Dataset out(shape, spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) out.class_names.push_back("class" + std::to_string(c));
  std::mt19937_64 gen(spec.seed);

  // Class colours on a lattice with spacing 4 sigma, centred on zero.
  std::size_t side = 2;
  while (std::pow(static_cast<double>(side), static_cast<double>(spec.channels)) <
         static_cast<double>(spec.classes)) {
    ++side;
  }
  std::size_t points = 1;
  for (std::size_t i = 0; i < spec.channels; ++i) points *= side;
  std::vector<std::size_t> order(points);
  for (std::size_t i = 0; i < points; ++i) order[i] = i;
  shuffle_indices(order, gen);
  const double spacing = 4.0 * std::max(spec.noise, 0.05);
  std::vector<std::vector<double>> colour(spec.classes, std::vector<double>(spec.channels));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::size_t code = order[c];
    for (std::size_t ch = 0; ch < spec.channels; ++ch) {
      colour[c][ch] = (static_cast<double>(code % side) - 0.5 * static_cast<double>(side - 1)) * spacing;
      code /= side;
    }
  }

  gen.seed(spec.seed ^ (0xD1B54A32D192ED03ULL * (spec.stream + 1)));
  std::vector<float> px(shape.count());
  const std::size_t plane = shape.plane_size();
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t label = i % spec.classes;
    if (spec.kind == SyntheticKind::kGaussianBlobs) {
      for (std::size_t ch = 0; ch < spec.channels; ++ch) {
        for (std::size_t k = 0; k < plane; ++k) {
          px[ch * plane + k] = static_cast<float>(colour[label][ch] + spec.noise * gaussian(gen));
        }
      }
    } else {
      const double angle = std::numbers::pi * static_cast<double>(label) / static_cast<double>(spec.classes);
      const double freq = 2.0 + static_cast<double>(label % 3);
      const double phase = 2.0 * std::numbers::pi * uniform01(gen);
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          const double t = (std::cos(angle) * static_cast<double>(x) / static_cast<double>(spec.width) +
                            std::sin(angle) * static_cast<double>(y) / static_cast<double>(spec.height));
          const double v = std::sin(2.0 * std::numbers::pi * freq * t + phase);
          for (std::size_t ch = 0; ch < spec.channels; ++ch) {
            px[ch * plane + y * spec.width + x] = static_cast<float>(v + spec.noise * gaussian(gen));
          }
        }
      }
    }
    out.add(px, label);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

AugmentDraw draw_augment(std::mt19937_64& rng, std::size_t pad) {
  AugmentDraw d;
  d.offset_y = static_cast<std::size_t>(rng() % (2 * pad + 1));
  d.offset_x = static_cast<std::size_t>(rng() % (2 * pad + 1));
  d.flip = (rng() >> 63) != 0;
  return d;
}

Tensor4 augment(const Tensor4& image, const AugmentDraw& draw, std::size_t pad) {
  const Shape4& s = image.shape();
  if (draw.offset_y > 2 * pad || draw.offset_x > 2 * pad) {
    throw UsageError("crop offset exceeds the padding");
  }
  std::vector<float> out(s.count(), 0.0F);
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < s.h(); ++y) {
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y + draw.offset_y) -
                                  static_cast<std::ptrdiff_t>(pad);
        if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(s.h())) continue;
        for (std::size_t x = 0; x < s.w(); ++x) {
          const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(x + draw.offset_x) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(s.w())) continue;
          const std::size_t dx = draw.flip ? s.w() - 1 - x : x;
          out[image.index(n, c, y, dx)] =
              image[image.index(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))];
        }
      }
    }
  }
  return Tensor4(s, std::move(out));
}

Tensor4 augment(const Tensor4& image, std::mt19937_64& rng, std::size_t pad) {
  return augment(image, draw_augment(rng, pad), pad);
}

Tensor4 hflip(const Tensor4& image) { return augment(image, AugmentDraw{0, 0, true}, 0); }

// ---------------------------------------------------------------------------
// Images and label files

namespace {

class PpmCursor {
 public:
  PpmCursor(std::span<const std::uint8_t> bytes, std::string_view origin)
      : bytes_(bytes), origin_(origin) {}

  void skip_space() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t number() {
    skip_space();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_]) && digits < 9) {
      v = v * 10 + (bytes_[pos_++] - '0');
      ++digits;
    }
    if (digits == 0) throw FormatError(origin_ + ": malformed PPM header");
    return v;
  }

  std::size_t pos_ = 0;
  std::span<const std::uint8_t> bytes_;
  std::string origin_;
};

}  // namespace

Tensor4 parse_ppm(std::span<const std::uint8_t> bytes, std::string_view origin) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw BadMagicError(std::string(origin) + ": not a binary PPM (P6) image");
  }
  PpmCursor cur(bytes, origin);
  cur.pos_ = 2;
  const std::size_t w = cur.number();
  const std::size_t h = cur.number();
  const std::size_t maxval = cur.number();
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) {
    throw FormatError(std::string(origin) + ": unsupported PPM dimensions or maxval");
  }
  if (cur.pos_ >= bytes.size() || !std::isspace(bytes[cur.pos_])) {
    throw FormatError(std::string(origin) + ": malformed PPM header");
  }
  const std::size_t start = cur.pos_ + 1;
  const std::size_t need = w * h * 3;
  if (bytes.size() - start < need) {
    throw TruncatedError(std::string(origin) + ": pixel data truncated at byte offset " +
                             std::to_string(bytes.size()),
                         bytes.size());
  }
  std::vector<float> out(need);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        out[(c * h + y) * w + x] =
            static_cast<float>(bytes[start + (y * w + x) * 3 + c]) / static_cast<float>(maxval);
      }
    }
  }
  return Tensor4(Shape4(1, 3, h, w), std::move(out));
}

Tensor4 read_ppm(const std::filesystem::path& path) {
  return parse_ppm(read_file(path), path.string());
}

void write_ppm(const std::filesystem::path& path, const Tensor4& image) {
  const Shape4& s = image.shape();
  if (s.n() != 1 || s.c() != 3) throw ShapeError("PPM output needs a (1, 3, h, w) image");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << s.w() << " " << s.h() << "\n255\n";
  for (std::size_t y = 0; y < s.h(); ++y) {
    for (std::size_t x = 0; x < s.w(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(image[image.index(0, c, y, x)], 0.0F, 1.0F);
        out.put(static_cast<char>(std::lround(v * 255.0F)));
      }
    }
  }
}

Tensor4 resize_nearest(const Tensor4& image, std::size_t height, std::size_t width) {
  const Shape4& s = image.shape();
  if (s.h() == height && s.w() == width) return image;
  const Shape4 out_shape(s.n(), s.c(), height, width);
  std::vector<float> out(out_shape.count());
  for (std::size_t n = 0; n < s.n(); ++n) {
    for (std::size_t c = 0; c < s.c(); ++c) {
      for (std::size_t y = 0; y < height; ++y) {
        const std::size_t sy = y * s.h() / height;
        for (std::size_t x = 0; x < width; ++x) {
          out[((n * s.c() + c) * height + y) * width + x] = image[image.index(n, c, sy, x * s.w() / width)];
        }
      }
    }
  }
  return Tensor4(out_shape, std::move(out));
}

Tensor4 standardize(const Tensor4& image, const ChannelStats& stats) {
  const Shape4& s = image.shape();
  if (s.c() != 3) throw ShapeError("standardization expects 3 channels, got " + s.str());
  std::vector<float> out = image.to_vector();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t c = image.coords(i).c;
    out[i] = static_cast<float>((out[i] - stats.mean[c]) / stats.stddev[c]);
  }
  return Tensor4(s, std::move(out));
}

std::vector<std::string> read_label_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open label file " + path.string());
  std::vector<std::pair<std::size_t, std::string>> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::size_t index = 0;
    try {
      if (tab == std::string::npos || tab == 0) throw std::invalid_argument("tab");
      std::size_t used = 0;
      index = std::stoul(line.substr(0, tab), &used);
      if (used != tab) throw std::invalid_argument("index");
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected `class_index<TAB>class_name`");
    }
    entries.emplace_back(index, line.substr(tab + 1));
  }
  std::sort(entries.begin(), entries.end());
  std::vector<std::string> names;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].first != i) {
      throw FormatError(path.string() + ": class indices must be 0..n-1 without gaps");
    }
    names.push_back(entries[i].second);
  }
  return names;
}

void write_label_file(const std::filesystem::path& path, std::span<const std::string> names) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::size_t i = 0; i < names.size(); ++i) out << i << "\t" << names[i] << "\n";
}

Dataset load_folder(const std::filesystem::path& dir, std::size_t height, std::size_t width,
                    const ChannelStats* stats) {
  const auto names = read_label_file(dir / "labels.txt");
  if (names.empty()) throw FormatError((dir / "labels.txt").string() + ": no classes");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset out(Shape4(1, 3, height, width), names.size());
  out.class_names = names;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const auto us = stem.rfind('_');
    const std::string cls = us == std::string::npos ? stem : stem.substr(0, us);
    const auto it = std::find(names.begin(), names.end(), cls);
    if (it == names.end()) {
      throw FormatError(f.string() + ": class `" + cls + "` is not listed in labels.txt");
    }
    Tensor4 img = resize_nearest(read_ppm(f), height, width);
    if (stats) img = standardize(img, *stats);
    out.add(img.values(), static_cast<std::size_t>(it - names.begin()));
  }
  if (out.empty()) out.warnings.push_back(dir.string() + ": no .ppm images");
  return out;
}

}  // namespace cnxt
