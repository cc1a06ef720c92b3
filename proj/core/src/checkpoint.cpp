// SPDX-License-Identifier: Apache-2.0
#include "cnxt/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <fstream>
#include <limits>

#include "cnxt/data.hpp"
#include "cnxt/error.hpp"

namespace cnxt {

Checkpoint make_checkpoint(const NetworkGraph& graph, const CheckpointMeta& meta) {
  Checkpoint c;
  c.arch = graph.config;
  c.meta = meta;
  c.meta.compacted = graph.compacted;
  for (const auto& p : graph.params) c.params.push_back({p.name, p.value});
  for (const auto& [id, mask] : graph.masks()) c.masks.push_back({id, mask});
  return c;
}

NetworkGraph restore(const Checkpoint& ckpt) {
  NetworkGraph g = build(ckpt.arch);
  MaskSet masks;
  for (const auto& m : ckpt.masks) {
    if (!g.find_node(m.name)) {
      throw CorruptRecordError("checkpoint mask for unknown layer " + m.name);
    }
    masks.emplace(m.name, m.mask);
  }
  try {
    g.set_masks(masks);
  } catch (const Error& e) {
    throw CorruptRecordError(std::string("checkpoint mask rejected: ") + e.what());
  }
  if (ckpt.meta.compacted) g = compact_graph(g);
  if (ckpt.params.size() != g.params.size()) {
    throw CorruptRecordError("checkpoint has " + std::to_string(ckpt.params.size()) +
                             " parameter records, network needs " +
                             std::to_string(g.params.size()));
  }
  for (const auto& p : ckpt.params) {
    const auto i = g.params.find(p.name);
    if (!i) throw CorruptRecordError("checkpoint parameter " + p.name + " is not in the network");
    try {
      g.params.set(*i, p.value);
    } catch (const ShapeError& e) {
      throw CorruptRecordError(e.what());
    }
  }
  return g;
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void count(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      throw FormatError(std::string(what) + " too large for the checkpoint format");
    }
    u32(static_cast<std::uint32_t>(v));
  }
  void text(const std::string& s) {
    count(s.size(), "string");
    out.insert(out.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw TruncatedError("checkpoint truncated reading " + std::string(what) + " at byte offset " +
                               std::to_string(pos_),
                           pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return bytes_[pos_++];
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    const std::uint16_t v = static_cast<std::uint16_t>(bytes_[pos_] | (bytes_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string text(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> raw(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - pos, 1U << 30);
    crc = crc32(crc, bytes.data() + pos, static_cast<uInt>(chunk));
    pos += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string config_text(const Checkpoint& ckpt) {
  ConfigFile cfg;
  ckpt.arch.write(cfg);
  cfg.set("meta.epoch", std::to_string(ckpt.meta.epoch));
  cfg.set("meta.seed", std::to_string(ckpt.meta.seed));
  cfg.set("meta.compacted", ckpt.meta.compacted ? "true" : "false");
  return cfg.to_text();
}

}  // namespace

std::vector<std::uint8_t> encode(const Checkpoint& ckpt) {
  Writer w;
  for (char ch : std::string_view("CNXT")) w.u8(static_cast<std::uint8_t>(ch));
  w.u16(kCheckpointVersion);
  w.text(config_text(ckpt));
  w.count(ckpt.params.size(), "parameter count");
  for (const auto& p : ckpt.params) {
    w.text(p.name);
    const auto& d = p.value.shape().dims();
    for (auto dim : d) w.count(dim, "dimension");
    for (float v : p.value.values()) w.u32(std::bit_cast<std::uint32_t>(v));
  }
  w.count(ckpt.masks.size(), "mask count");
  for (const auto& m : ckpt.masks) {
    w.text(m.name);
    w.count(m.mask.groups(), "mask groups");
    w.count(m.mask.columns(), "mask columns");
    for (auto f : m.mask.flags()) w.u8(f);
  }
  w.u32(crc32_of(w.out));
  return std::move(w.out);
}

Checkpoint decode(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  const auto magic = r.raw(4, "magic");
  if (std::string_view(reinterpret_cast<const char*>(magic.data()), 4) != "CNXT") {
    throw BadMagicError("not a checkpoint: bad magic tag");
  }
  const std::uint16_t version = r.u16("version");
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t config_offset = r.offset();
  const std::string text = r.text("config text");

  Checkpoint c;
  const std::uint32_t param_count = r.u32("parameter count");
  for (std::uint32_t i = 0; i < param_count; ++i) {
    NamedTensor p;
    p.name = r.text("parameter name");
    std::array<std::size_t, 4> d{};
    std::size_t count = 1;
    for (auto& dim : d) {
      dim = r.u32("parameter dims");
      if (dim == 0) throw CorruptRecordError("parameter " + p.name + " has a zero dimension");
      if (count > std::numeric_limits<std::size_t>::max() / 4 / dim) {
        throw CorruptRecordError("parameter " + p.name + " dimensions overflow");
      }
      count *= dim;
    }
    const auto raw = r.raw(count * 4, "parameter values");
    std::vector<float> values(count);
    for (std::size_t k = 0; k < count; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(raw[k * 4 + b]) << (8 * b);
      values[k] = std::bit_cast<float>(bits);
    }
    p.value = Tensor4(Shape4(d[0], d[1], d[2], d[3]), std::move(values));
    c.params.push_back(std::move(p));
  }
  const std::uint32_t mask_count = r.u32("mask count");
  for (std::uint32_t i = 0; i < mask_count; ++i) {
    NamedMask m;
    m.name = r.text("mask name");
    const std::size_t groups = r.u32("mask groups");
    const std::size_t columns = r.u32("mask columns");
    if (groups != 0 && columns > std::numeric_limits<std::size_t>::max() / groups) {
      throw CorruptRecordError("mask " + m.name + " dimensions overflow");
    }
    const auto flags = r.raw(groups * columns, "mask flags");
    for (auto f : flags) {
      if (f > 1) throw CorruptRecordError("mask " + m.name + " has a flag byte other than 0/1");
    }
    m.mask = PruneMask::from_flags(groups, columns, {flags.begin(), flags.end()});
    c.masks.push_back(std::move(m));
  }
  const std::size_t body = r.offset();
  const std::uint32_t stored = r.u32("checksum");
  if (r.remaining() != 0) {
    throw CorruptRecordError("checkpoint has " + std::to_string(r.remaining()) +
                             " trailing bytes after the checksum");
  }
  if (crc32_of(bytes.first(body)) != stored) throw ChecksumError("checkpoint checksum mismatch");

  try {
    const ConfigFile cfg = ConfigFile::parse(text, "checkpoint config");
    c.arch = ArchConfig::from_config(cfg);
    c.meta.epoch = cfg.count("meta.epoch", 0);
    c.meta.seed = cfg.count("meta.seed", 0);
    c.meta.compacted = cfg.flag("meta.compacted", false);
  } catch (const ConfigError& e) {
    throw CorruptRecordError("checkpoint config at byte offset " + std::to_string(config_offset) +
                             ": " + e.what());
  }
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode(ckpt);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode(read_file(path)); }

std::size_t weight_payload_bytes(const Checkpoint& ckpt) {
  std::size_t total = 0;
  for (const auto& p : ckpt.params) {
    const bool buffer = p.name.ends_with(".running_mean") || p.name.ends_with(".running_var");
    if (!buffer) total += 4 * p.value.size();
  }
  return total;
}

}  // namespace cnxt
