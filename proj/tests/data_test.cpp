// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cstdlib>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cnxt/data.hpp"
#include "test_support.hpp"

namespace cnxt {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cnxt_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> cifar_record(std::uint8_t label, std::uint8_t pixel) {
  std::vector<std::uint8_t> r(3073, pixel);
  r[0] = label;
  return r;
}

TEST(Cifar, SingleRecordFixture) {
  const auto bytes = cifar_record(3, 128);
  const Dataset d = parse_cifar(bytes, CifarVariant::kCifar10, nullptr);
  ASSERT_EQ(d.size(), 1U);
  EXPECT_EQ(d.label(0), 3U);
  for (float v : d.pixels(0)) EXPECT_FLOAT_EQ(v, 128.0F / 255.0F);

  const ChannelStats s = cifar10_stats();
  const Dataset z = parse_cifar(bytes, CifarVariant::kCifar10, &s);
  EXPECT_NEAR(z.pixels(0)[0], (128.0 / 255.0 - s.mean[0]) / s.stddev[0], 1e-6);
  EXPECT_NEAR(z.pixels(0)[2048], (128.0 / 255.0 - s.mean[2]) / s.stddev[2], 1e-6);
}

TEST(Cifar, ChannelMajorLayout) {
  auto bytes = cifar_record(0, 0);
  bytes[1 + 1024 + 5] = 255;  // green plane, row 0, column 5
  const Dataset d = parse_cifar(bytes, CifarVariant::kCifar10, nullptr);
  const Tensor4 img = d.batch(std::vector<std::size_t>{0});
  EXPECT_EQ(img.at(0, 1, 0, 5), 1.0F);
  EXPECT_EQ(img.at(0, 0, 0, 5), 0.0F);
}

TEST(Cifar, EmptyTruncatedCorrupt) {
  const Dataset e = parse_cifar({}, CifarVariant::kCifar10, nullptr);
  EXPECT_EQ(e.size(), 0U);
  ASSERT_EQ(e.warnings.size(), 1U);
  EXPECT_NE(e.warnings[0].find("empty"), std::string::npos);

  auto two = cifar_record(1, 9);
  const auto second = cifar_record(2, 9);
  two.insert(two.end(), second.begin(), second.end() - 10);
  try {
    parse_cifar(two, CifarVariant::kCifar10, nullptr);
    FAIL();
  } catch (const TruncatedError& err) {
    EXPECT_EQ(err.offset(), 3073U);
  }
  EXPECT_THROW(parse_cifar(cifar_record(10, 0), CifarVariant::kCifar10, nullptr), CorruptRecordError);

  std::vector<std::uint8_t> c100(3074, 7);
  c100[0] = 3;    // coarse
  c100[1] = 99;   // fine
  const Dataset d = parse_cifar(c100, CifarVariant::kCifar100, nullptr);
  EXPECT_EQ(d.label(0), 99U);
  c100[1] = 100;
  EXPECT_THROW(parse_cifar(c100, CifarVariant::kCifar100, nullptr), CorruptRecordError);
}

TEST(Cifar, LoadFromDirectory) {
  const fs::path dir = scratch_dir("cifar");
  for (int i = 1; i <= 5; ++i) {
    std::ofstream out(dir / ("data_batch_" + std::to_string(i) + ".bin"), std::ios::binary);
    for (int r = 0; r < 2; ++r) {
      const auto rec = cifar_record(static_cast<std::uint8_t>(r + i), 50);
      out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
    }
  }
  EXPECT_FALSE(cifar_present(dir, CifarVariant::kCifar10));
  { std::ofstream(dir / "test_batch.bin", std::ios::binary); }
  EXPECT_TRUE(cifar_present(dir, CifarVariant::kCifar10));
  const Dataset train = load_cifar(dir, Split::kTrain, CifarVariant::kCifar10);
  EXPECT_EQ(train.size(), 10U);
  EXPECT_EQ(train.class_names.size(), 10U);
  EXPECT_EQ(train.class_names[0], "airplane");
  const Dataset test = load_cifar(dir, Split::kTest, CifarVariant::kCifar10);
  EXPECT_EQ(test.size(), 0U);
  EXPECT_FALSE(test.warnings.empty());
  EXPECT_THROW(load_cifar(dir / "missing", Split::kTest, CifarVariant::kCifar10), IoError);
}

// Runs only when the real dataset is available under CNXT_CIFAR10_DIR.
TEST(Cifar, RealSplitsAndStandardization) {
  const char* env = std::getenv("CNXT_CIFAR10_DIR");
  if (!env || !cifar_present(env, CifarVariant::kCifar10)) GTEST_SKIP() << "CIFAR-10 files not present";
  const Dataset train = load_cifar(env, Split::kTrain, CifarVariant::kCifar10);
  EXPECT_EQ(train.size(), 50000U);
  EXPECT_EQ(load_cifar(env, Split::kTest, CifarVariant::kCifar10).size(), 10000U);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, sq = 0;
    for (std::size_t i = 0; i < train.size(); ++i) {
      for (float v : train.pixels(i).subspan(c * 1024, 1024)) {
        s += v;
        sq += static_cast<double>(v) * v;
      }
    }
    const double n = 1024.0 * static_cast<double>(train.size());
    EXPECT_NEAR(s / n, 0.0, 0.02);
    EXPECT_NEAR(std::sqrt(sq / n - (s / n) * (s / n)), 1.0, 0.05);
  }
}

TEST(Synthetic, RoundRobinAndDeterminism) {
  SyntheticSpec s;
  s.count = 100;
  s.classes = 10;
  const Dataset a = synthetic_dataset(s);
  EXPECT_EQ(a.class_counts(), std::vector<std::size_t>(10, 10));
  const Dataset b = synthetic_dataset(s);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_TRUE(std::ranges::equal(a.pixels(i), b.pixels(i)));
  }
  s.stream = 1;
  const Dataset held = synthetic_dataset(s);
  EXPECT_FALSE(std::ranges::equal(a.pixels(0), held.pixels(0)));
  s.count = 5;
  EXPECT_THROW(synthetic_dataset(s), ConfigError);
  EXPECT_EQ(parse_synthetic_kind("striped"), SyntheticKind::kStriped);
  EXPECT_THROW(parse_synthetic_kind("noise"), ConfigError);
}

TEST(Synthetic, BlobCentresAreFourSigmaApart) {
  SyntheticSpec s;
  s.count = 1000;
  s.classes = 10;
  s.height = s.width = 8;
  const Dataset d = synthetic_dataset(s);
  std::vector<std::vector<double>> centre(10, std::vector<double>(3, 0.0));
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto plane = d.pixels(i).subspan(c * 64, 64);
      for (float v : plane) centre[d.label(i)][c] += v / (64.0 * 100.0);
    }
  }
  for (std::size_t a = 0; a < 10; ++a)
    for (std::size_t b = a + 1; b < 10; ++b) {
      double dist = 0;
      for (std::size_t c = 0; c < 3; ++c) dist += std::pow(centre[a][c] - centre[b][c], 2);
      EXPECT_GE(std::sqrt(dist), 4.0 * s.noise * 0.95);
    }
}

// Softmax regression on raw pixels trained by full-batch gradient descent.
TEST(Synthetic, LinearProbeSeparatesBlobs) {
  SyntheticSpec s;
  s.count = 200;
  s.classes = 10;
  s.height = s.width = 4;
  const Dataset d = synthetic_dataset(s);
  const std::size_t f = 3 * 16, k = 10;
  std::vector<double> w(k * f, 0.0), b(k, 0.0);
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(k * f, 0.0), gb(k, 0.0);
    for (std::size_t i = 0; i < d.size(); ++i) {
      const auto x = d.pixels(i);
      std::vector<double> z(k);
      for (std::size_t o = 0; o < k; ++o) {
        z[o] = b[o];
        for (std::size_t j = 0; j < f; ++j) z[o] += w[o * f + j] * x[j];
      }
      auto p = testing::softmax_row(z);
      p[d.label(i)] -= 1.0;
      for (std::size_t o = 0; o < k; ++o) {
        gb[o] += p[o];
        for (std::size_t j = 0; j < f; ++j) gw[o * f + j] += p[o] * x[j];
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= 0.05 * gw[i] / d.size();
    for (std::size_t o = 0; o < k; ++o) b[o] -= 0.05 * gb[o] / d.size();
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto x = d.pixels(i);
    std::size_t best = 0;
    double best_z = -1e300;
    for (std::size_t o = 0; o < k; ++o) {
      double z = b[o];
      for (std::size_t j = 0; j < f; ++j) z += w[o * f + j] * x[j];
      if (z > best_z) best_z = z, best = o;
    }
    correct += best == d.label(i);
  }
  EXPECT_EQ(correct, d.size());
}

TEST(Augment, Properties) {
  std::mt19937_64 rng(1);
  const Tensor4 img = testing::random_tensorf({1, 3, 32, 32}, rng);
  EXPECT_EQ(augment(img, AugmentDraw{4, 4, false}), img);
  EXPECT_EQ(hflip(hflip(img)), img);
  EXPECT_EQ(augment(augment(img, AugmentDraw{4, 4, true}), AugmentDraw{4, 4, true}), img);

  const Tensor4 f = hflip(img);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y) {
      std::vector<float> a, b;
      for (std::size_t x = 0; x < 32; ++x) {
        a.push_back(img.at(0, c, y, x));
        b.push_back(f.at(0, c, y, x));
      }
      std::ranges::sort(a);
      std::ranges::sort(b);
      ASSERT_EQ(a, b);
    }

  const auto [lo, hi] = std::ranges::minmax(img.values());
  std::mt19937_64 r1(7), r2(7);
  for (int i = 0; i < 100; ++i) {
    const Tensor4 out = augment(img, r1);
    ASSERT_EQ(out.shape(), img.shape());
    ASSERT_EQ(out, augment(img, r2));
    for (float v : out.values()) {
      ASSERT_GE(v, std::min(lo, 0.0F));
      ASSERT_LE(v, std::max(hi, 0.0F));
    }
  }
  EXPECT_THROW(augment(img, AugmentDraw{9, 0, false}), UsageError);
}

TEST(Ppm, RoundTripAndErrors) {
  const fs::path dir = scratch_dir("ppm");
  std::vector<float> v(3 * 2 * 3);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i * 13 % 256) / 255.0F;
  const Tensor4 img({1, 3, 2, 3}, v);
  write_ppm(dir / "a.ppm", img);
  EXPECT_LE(testing::max_abs_diff(read_ppm(dir / "a.ppm"), img), 1e-6);

  const std::string hdr = "P6\n# comment\n2 1\n255\n";
  std::vector<std::uint8_t> bytes(hdr.begin(), hdr.end());
  for (std::uint8_t b : {255, 0, 0, 0, 0, 255}) bytes.push_back(b);
  const Tensor4 p = parse_ppm(bytes);
  EXPECT_EQ(p.at(0, 0, 0, 0), 1.0F);
  EXPECT_EQ(p.at(0, 2, 0, 1), 1.0F);
  bytes.pop_back();
  EXPECT_THROW(parse_ppm(bytes), TruncatedError);
  const std::string p3 = "P3\n1 1\n255\n0 0 0\n";
  EXPECT_THROW(parse_ppm(std::vector<std::uint8_t>(p3.begin(), p3.end())), BadMagicError);
  const std::string junk = "P6\nx 1\n255\n";
  EXPECT_THROW(parse_ppm(std::vector<std::uint8_t>(junk.begin(), junk.end())), FormatError);
}

TEST(Labels, FileAndFolder) {
  const fs::path dir = scratch_dir("folder");
  const std::vector<std::string> names{"cat", "dog"};
  write_label_file(dir / "labels.txt", names);
  EXPECT_EQ(read_label_file(dir / "labels.txt"), names);
  write_ppm(dir / "dog_1.ppm", Tensor4::filled({1, 3, 4, 4}, 0.5F));
  write_ppm(dir / "cat_1.ppm", Tensor4::filled({1, 3, 2, 2}, 1.0F));
  const Dataset d = load_folder(dir, 8, 8, nullptr);
  ASSERT_EQ(d.size(), 2U);
  EXPECT_EQ(d.label(0), 0U);
  EXPECT_EQ(d.label(1), 1U);
  EXPECT_EQ(d.sample_shape(), Shape4(1, 3, 8, 8));

  { std::ofstream(dir / "labels.txt") << "0\tcat\n2\tdog\n"; }
  EXPECT_THROW(read_label_file(dir / "labels.txt"), FormatError);
  { std::ofstream(dir / "labels.txt") << "zero cat\n"; }
  EXPECT_THROW(read_label_file(dir / "labels.txt"), FormatError);
  { std::ofstream(dir / "labels.txt") << "0\tcat\n"; }
  EXPECT_THROW(load_folder(dir, 8, 8, nullptr), FormatError);
}

TEST(Dataset, Validation) {
  Dataset d(Shape4(1, 1, 1, 2), 3);
  const std::vector<float> ok{0.0F, 1.0F};
  d.add(ok, 2);
  EXPECT_THROW(d.add(ok, 3), CorruptRecordError);
  EXPECT_THROW(d.add(std::vector<float>{NAN, 0.0F}, 0), NumericError);
  EXPECT_THROW(d.add(std::vector<float>{0.0F}, 0), ShapeError);
  EXPECT_EQ(d.subset(0, 1).size(), 1U);
  EXPECT_THROW(d.subset(1, 1), UsageError);
}

}  // namespace
}  // namespace cnxt
