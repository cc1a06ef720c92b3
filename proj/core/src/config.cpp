// SPDX-License-Identifier: Apache-2.0
#include "cnxt/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "cnxt/error.hpp"

namespace cnxt {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

ConfigFile ConfigFile::parse(std::string_view text, std::string_view origin) {
  ConfigFile cfg;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    std::string_view line = text.substr(pos, end == std::string_view::npos ? text.npos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                          ": malformed section header");
      }
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) +
                        ": expected `key = value`");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) {
      throw ConfigError(std::string(origin) + ":" + std::to_string(line_no) + ": empty key");
    }
    const std::string full = section.empty() ? std::string(key) : section + "." + std::string(key);
    cfg.set(full, std::string(trim(line.substr(eq + 1))));
  }
  return cfg;
}

ConfigFile ConfigFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path.string());
}

void ConfigFile::set(const std::string& key, std::string value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = std::move(value);
      return;
    }
  }
  entries_.emplace_back(key, std::move(value));
}

void ConfigFile::apply_override(std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw ConfigError("override `" + std::string(assignment) + "` is not of the form key=value");
  }
  set(std::string(trim(assignment.substr(0, eq))), std::string(trim(assignment.substr(eq + 1))));
}

void ConfigFile::merge(const ConfigFile& other) {
  for (const auto& [k, v] : other.entries_) set(k, v);
}

bool ConfigFile::has(const std::string& key) const { return get(key).has_value(); }

std::optional<std::string> ConfigFile::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  return std::nullopt;
}

std::string ConfigFile::text(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

std::size_t ConfigFile::count(const std::string& key, std::size_t fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  std::size_t out = 0;
  const auto* first = v->data();
  const auto* last = v->data() + v->size();
  const auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc{} || ptr != last) {
    throw ConfigError("key " + key + " expects a non-negative integer, got `" + *v + "`");
  }
  return out;
}

double ConfigFile::real(const std::string& key, double fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  try {
    std::size_t used = 0;
    const double out = std::stod(*v, &used);
    if (used != v->size()) throw std::invalid_argument("trailing");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + " expects a number, got `" + *v + "`");
  }
}

bool ConfigFile::flag(const std::string& key, bool fallback) const {
  const auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") return true;
  if (*v == "false" || *v == "0" || *v == "no" || *v == "off") return false;
  throw ConfigError("key " + key + " expects true/false, got `" + *v + "`");
}

std::vector<std::string> ConfigFile::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

void ConfigFile::require_known(std::span<const std::string_view> known) const {
  for (const auto& [k, v] : entries_) {
    if (std::find(known.begin(), known.end(), k) != known.end()) continue;
    std::string msg = "unknown config key `" + k + "`; known keys:";
    for (auto name : known) msg += " " + std::string(name);
    throw ConfigError(msg);
  }
}

std::string ConfigFile::to_text() const {
  std::vector<std::string> sections;
  for (const auto& [k, v] : entries_) {
    const auto dot = k.find('.');
    const std::string sec = dot == std::string::npos ? "" : k.substr(0, dot);
    if (std::find(sections.begin(), sections.end(), sec) == sections.end()) sections.push_back(sec);
  }
  std::ostringstream out;
  for (const auto& sec : sections) {
    if (!sec.empty()) out << "[" << sec << "]\n";
    for (const auto& [k, v] : entries_) {
      const auto dot = k.find('.');
      const std::string ks = dot == std::string::npos ? "" : k.substr(0, dot);
      if (ks != sec) continue;
      out << (dot == std::string::npos ? k : k.substr(dot + 1)) << " = " << v << "\n";
    }
  }
  return out.str();
}

}  // namespace cnxt
