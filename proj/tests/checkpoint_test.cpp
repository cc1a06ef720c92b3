// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "cnxt/analysis.hpp"
#include "cnxt/checkpoint.hpp"
#include "cnxt/data.hpp"
#include "test_support.hpp"

namespace cnxt {
namespace {

using testing::pick;

ArchConfig small_arch() {
  ArchConfig a;
  a.stages = {{2, 8}, {1, 16}};
  a.height = a.width = 8;
  a.num_classes = 5;
  return a;
}

Checkpoint random_checkpoint(std::mt19937_64& rng) {
  const auto names = ArchConfig::preset_names();
  Checkpoint c;
  c.arch = ArchConfig::preset(names[pick(rng, 0, names.size() - 1)]);
  c.meta = {pick(rng, 0, 300), rng(), pick(rng, 0, 1) == 1};
  const std::size_t params = pick(rng, 0, 6);
  for (std::size_t i = 0; i < params; ++i) {
    const Shape4 s(pick(rng, 1, 4), pick(rng, 1, 4), pick(rng, 1, 3), pick(rng, 1, 3));
    c.params.push_back({"p" + std::to_string(i), testing::random_tensorf(s, rng)});
  }
  const std::size_t masks = pick(rng, 0, 4);
  for (std::size_t i = 0; i < masks; ++i) {
    const std::size_t g = pick(rng, 1, 4), cols = pick(rng, 1, 9);
    std::vector<std::uint8_t> flags(g * cols);
    for (auto& f : flags) f = static_cast<std::uint8_t>(pick(rng, 0, 1));
    c.masks.push_back({"m" + std::to_string(i), PruneMask::from_flags(g, cols, flags)});
  }
  return c;
}

TEST(Checkpoint, RandomRoundTrips) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const Checkpoint c = random_checkpoint(rng);
    const auto bytes = encode(c);
    ASSERT_EQ(decode(bytes), c) << trial;
    ASSERT_EQ(encode(decode(bytes)), bytes);
  }
}

TEST(Checkpoint, HeaderAndChecksumErrors) {
  std::mt19937_64 rng(2);
  const auto bytes = encode(random_checkpoint(rng));
  auto bad = bytes;
  bad.back() ^= 0x01;
  EXPECT_THROW(decode(bad), ChecksumError);
  bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode(bad), BadMagicError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(decode(bad), VersionError);
  bad = bytes;
  bad[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(decode(bad), FormatError);
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(decode(bad), CorruptRecordError);
}

TEST(Checkpoint, EveryTruncationIsTyped) {
  NetworkGraph g = build(small_arch());
  init_params(g, 3);
  g.set_masks(final_masks(g));
  const auto bytes = encode(make_checkpoint(g, {1, 2, false}));
  for (std::size_t len = 0; len < bytes.size(); ++len) {
    try {
      decode(std::span(bytes).first(len));
      FAIL() << "prefix " << len << " decoded";
    } catch (const TruncatedError& e) {
      ASSERT_LE(e.offset(), len);
    } catch (const BadMagicError&) {
      ASSERT_LT(len, 4U);
    }
  }
}

TEST(Checkpoint, PayloadMatchesParameterCount) {
  for (const char* name : {"cifar10", "cifar10-baseline"}) {
    NetworkGraph g = build(ArchConfig::preset(name));
    const Checkpoint c = make_checkpoint(g, {});
    EXPECT_EQ(weight_payload_bytes(c), 4 * count_graph(g).total_params) << name;
  }
  NetworkGraph g = build(small_arch());
  init_params(g, 4);
  g.set_masks(final_masks(g));
  const NetworkGraph compacted = compact_graph(g);
  EXPECT_EQ(weight_payload_bytes(make_checkpoint(compacted, {})), 4 * count_graph(compacted).total_params);
}

TEST(Checkpoint, RestoreReproducesOutputs) {
  NetworkGraph g = build(small_arch());
  init_params(g, 5);
  g.set_masks(final_masks(g));
  std::mt19937_64 rng(6);
  const Tensor4 x = testing::random_tensorf({2, 3, 8, 8}, rng);
  for (const NetworkGraph& net : {g, compact_graph(g)}) {
    const Checkpoint c = make_checkpoint(net, {7, 8, false});
    const NetworkGraph back = restore(decode(encode(c)));
    EXPECT_EQ(back.compacted, net.compacted);
    EXPECT_EQ(forward(back, x), forward(net, x));
    EXPECT_EQ(back.masks(), net.masks());
  }
  Checkpoint broken = make_checkpoint(g, {});
  broken.params.pop_back();
  EXPECT_THROW(restore(broken), CorruptRecordError);
}

TEST(Checkpoint, FileRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "cnxt_ckpt_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  NetworkGraph g = build(small_arch());
  init_params(g, 9);
  const Checkpoint c = make_checkpoint(g, {3, 9, false});
  save_checkpoint(c, dir / "a.cnxt");
  EXPECT_EQ(read_file(dir / "a.cnxt"), encode(c));
  EXPECT_EQ(load_checkpoint(dir / "a.cnxt"), c);
  EXPECT_FALSE(std::filesystem::exists(dir / "a.cnxt.tmp"));
  EXPECT_THROW(load_checkpoint(dir / "missing.cnxt"), IoError);
  EXPECT_THROW(save_checkpoint(c, dir / "no" / "such" / "dir.cnxt"), IoError);
}

}  // namespace
}  // namespace cnxt
