// SPDX-License-Identifier: Apache-2.0
//
// Flat `key = value` configuration text. '#' starts a comment.
#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace m3c2 {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}
}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      }
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
      if (kv.values_.count(key)) throw ConfigError("config: duplicate key '" + key + "'");
      kv.values_[key] = value;
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const { return values_; }

  /// Rejects keys outside `known`.
  void require_known(const std::vector<std::string>& known) const {
    for (const auto& [k, v] : values_) {
      bool ok = false;
      for (const auto& n : known) ok = ok || n == k;
      if (!ok) throw ConfigError("config: unknown key '" + k + "'");
    }
  }

  void read(const std::string& key, double& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = to_double(key, it->second);
  }
  void read(const std::string& key, std::size_t& out) const {
    if (auto it = values_.find(key); it != values_.end()) out = to_size(key, it->second);
  }
  void read(const std::string& key, bool& out) const {
    if (auto it = values_.find(key); it != values_.end()) {
      const std::string& v = it->second;
      if (v == "1" || v == "true") out = true;
      else if (v == "0" || v == "false") out = false;
      else throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
    }
  }
  void read(const std::string& key, std::vector<double>& out) const {
    if (auto it = values_.find(key); it != values_.end()) {
      out.clear();
      std::istringstream in(it->second);
      std::string item;
      while (std::getline(in, item, ',')) out.push_back(to_double(key, detail::trim(item)));
    }
  }

  static double to_double(const std::string& key, const std::string& v) {
    double d = 0.0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, d);
    if (r.ec != std::errc() || r.ptr != end) {
      throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
    return d;
  }

  static std::uint64_t to_size(const std::string& key, const std::string& v) {
    std::uint64_t n = 0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, n);
    if (r.ec != std::errc() || r.ptr != end) {
      throw ConfigError("config: key '" + key + "' expects a non-negative integer, got '" + v +
                        "'");
    }
    return n;
  }

 private:
  std::map<std::string, std::string> values_;
};

/// Shortest round-trip decimal text for a double.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

}  // namespace m3c2
