#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "act/errors.hpp"
#include "act/tensor.hpp"

namespace act {

// Matches '*' (any run) and '?' (any single char) against a name.
inline bool glob_match(const std::string& pattern, const std::string& name) {
  size_t p = 0, n = 0, star = std::string::npos, star_n = 0;
  while (n < name.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == name[n])) {
      ++p;
      ++n;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      star_n = n;
    } else if (star != std::string::npos) {
      p = star + 1;
      n = ++star_n;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

// Ordered registry of named parameters. Registration order is the canonical
// order for optimizer walks and checkpoint serialization. Trainability and
// requires_grad are kept in lockstep.
template <typename T>
class ParamStoreT {
 public:
  using Tensor = TensorT<T>;

  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable;
  };

  Tensor add(const std::string& name, Tensor t, bool trainable = true) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter name: " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back(Entry{name, t, trainable});
    return t;
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter: " + name);
    return entries_[it->second].tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  size_t size() const { return entries_.size(); }

  void freeze(const std::string& pattern) { set_trainable(pattern, false); }
  void thaw(const std::string& pattern) { set_trainable(pattern, true); }

  void set_trainable(const std::string& pattern, bool trainable) {
    bool matched = false;
    for (auto& e : entries_) {
      if (glob_match(pattern, e.name)) {
        e.trainable = trainable;
        e.tensor.set_requires_grad(trainable);
        matched = true;
      }
    }
    if (!matched) throw ConfigError("pattern matches no parameters: " + pattern);
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

  int64_t num_values() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  int64_t num_trainable_values() const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;

}  // namespace act
