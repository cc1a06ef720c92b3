// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format, all integers little-endian:
//
//   "CNXT"  u16 version
//   u32 length, config text ([arch] keys and a [meta] section)
//   u32 count, then per parameter:
//       u32 length, name; u32 n, c, h, w; n*c*h*w f32 values
//   u32 count, then per mask:
//       u32 length, name; u32 groups, columns; one keep byte per slot
//   u32 CRC-32 of every preceding byte
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cnxt/arch.hpp"

namespace cnxt {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t epoch = 0;
  std::uint64_t seed = 0;
  bool compacted = false;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct NamedTensor {
  std::string name;
  Tensor4 value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct NamedMask {
  std::string name;
  PruneMask mask;
  friend bool operator==(const NamedMask&, const NamedMask&) = default;
};

struct Checkpoint {
  ArchConfig arch;
  CheckpointMeta meta;
  std::vector<NamedTensor> params;  // registry order, buffers included
  std::vector<NamedMask> masks;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

Checkpoint make_checkpoint(const NetworkGraph& graph, const CheckpointMeta& meta);
/// Rebuilds the network, installing masks before compaction and then every
/// parameter by name.
NetworkGraph restore(const Checkpoint& ckpt);

std::vector<std::uint8_t> encode(const Checkpoint& ckpt);
/// Throws BadMagicError, VersionError, ChecksumError, TruncatedError (with
/// the offset of the read that ran short) or CorruptRecordError.
Checkpoint decode(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Bytes of f32 values in parameter records, excluding running statistics.
std::size_t weight_payload_bytes(const Checkpoint& ckpt);

}  // namespace cnxt
