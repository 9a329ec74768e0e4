#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "act/errors.hpp"

namespace act {

namespace detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline uint64_t fnv1a64(const std::string& data) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : data) {
    h ^= static_cast<uint64_t>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Flat sectioned key=value text. '#' starts a comment, sections are
// [name] headers, duplicate keys are rejected.
class ConfigFile {
 public:
  static ConfigFile parse_text(const std::string& text) {
    ConfigFile cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']' || line.size() < 3) {
          throw ConfigError("malformed section header at line " + std::to_string(lineno));
        }
        section = detail::trim(line.substr(1, line.size() - 2));
        continue;
      }
      const size_t eq = line.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("expected key=value at line " + std::to_string(lineno));
      }
      const std::string key = detail::trim(line.substr(0, eq));
      const std::string value = detail::trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError("empty key at line " + std::to_string(lineno));
      const std::string full = section.empty() ? key : section + "." + key;
      if (!cfg.values_.emplace(full, value).second) {
        throw ConfigError("duplicate key " + full);
      }
    }
    return cfg;
  }

  static ConfigFile parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_text(buf.str());
  }

  bool has(const std::string& full_key) const { return values_.count(full_key) != 0; }

  std::string get_str(const std::string& key, const std::string& fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    return it->second;
  }

  int64_t get_i64(const std::string& key, int64_t fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    size_t pos = 0;
    int64_t v = 0;
    try {
      v = std::stoll(it->second, &pos);
    } catch (const std::exception&) {
      throw ConfigError("key " + key + " wants an integer, got '" + it->second + "'");
    }
    if (pos != it->second.size()) {
      throw ConfigError("key " + key + " wants an integer, got '" + it->second + "'");
    }
    return v;
  }

  double get_f64(const std::string& key, double fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(it->second, &pos);
    } catch (const std::exception&) {
      throw ConfigError("key " + key + " wants a number, got '" + it->second + "'");
    }
    if (pos != it->second.size()) {
      throw ConfigError("key " + key + " wants a number, got '" + it->second + "'");
    }
    return v;
  }

  bool get_bool(const std::string& key, bool fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    if (it->second == "true") return true;
    if (it->second == "false") return false;
    throw ConfigError("key " + key + " wants true or false, got '" + it->second + "'");
  }

  // Every present key must have been consumed by a typed getter; catches
  // typos and keys from the wrong section.
  void reject_unknown_keys() const {
    std::vector<std::string> unknown;
    for (const auto& [k, v] : values_) {
      if (!consumed_.count(k)) unknown.push_back(k);
    }
    if (unknown.empty()) return;
    std::string msg = "unknown config keys:";
    for (const auto& k : unknown) msg += " " + k;
    throw ConfigError(msg);
  }

 private:
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

}  // namespace act
