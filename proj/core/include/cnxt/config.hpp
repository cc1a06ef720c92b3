// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cnxt {

/// Plain-text configuration: `[section]` headers followed by `key = value`
/// lines, `#` starting a comment. Keys are addressed as "section.key".
/// Later assignments to the same key replace earlier ones.
class ConfigFile {
 public:
  static ConfigFile parse(std::string_view text, std::string_view origin = "<config>");
  static ConfigFile load(const std::filesystem::path& path);

  void set(const std::string& key, std::string value);
  /// Parses "section.key=value".
  void apply_override(std::string_view assignment);
  void merge(const ConfigFile& other);

  bool has(const std::string& key) const;
  std::optional<std::string> get(const std::string& key) const;

  std::string text(const std::string& key, const std::string& fallback) const;
  std::size_t count(const std::string& key, std::size_t fallback) const;
  double real(const std::string& key, double fallback) const;
  bool flag(const std::string& key, bool fallback) const;

  std::vector<std::string> keys() const;
  /// Throws ConfigError naming the first unknown key and listing every
  /// known one.
  void require_known(std::span<const std::string_view> known) const;

  std::string to_text() const;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

}  // namespace cnxt
