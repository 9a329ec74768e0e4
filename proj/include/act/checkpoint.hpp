#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "act/errors.hpp"
#include "act/param_store.hpp"
#include "act/tensor.hpp"

namespace act {

inline constexpr char kCheckpointMagic[8] = {'A', 'C', 'T', 'C', 'K', 'P', 'T', '1'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  uint64_t step = 0;
  uint64_t config_digest = 0;
  uint64_t rng_state = 0;
};

struct OptimizerMoments {
  uint64_t adam_step = 0;
  std::vector<std::string> names;
  std::vector<std::vector<float>> m;
  std::vector<std::vector<float>> v;
};

namespace detail {

// Values are stored as little-endian f32 regardless of the model's working
// precision; this keeps artifacts interchangeable between check modes.
template <typename Word>
inline void put(std::string& out, Word w) {
  unsigned char b[sizeof(Word)];
  std::memcpy(b, &w, sizeof(Word));
  out.append(reinterpret_cast<char*>(b), sizeof(Word));
}

inline void put_string(std::string& out, const std::string& s) {
  put<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out += s;
}

class ByteReader {
 public:
  ByteReader(const std::string& data, const std::string& path)
      : data_(data), path_(path) {}

  template <typename Word>
  Word get() {
    if (pos_ + sizeof(Word) > data_.size()) {
      throw CheckpointTruncatedError("checkpoint " + path_ + " ends early at byte " +
                                     std::to_string(pos_));
    }
    Word w;
    std::memcpy(&w, data_.data() + pos_, sizeof(Word));
    pos_ += sizeof(Word);
    return w;
  }

  std::string get_string() {
    const uint32_t len = get<uint32_t>();
    if (pos_ + len > data_.size()) {
      throw CheckpointTruncatedError("checkpoint " + path_ + " ends early in a name");
    }
    std::string s = data_.substr(pos_, len);
    pos_ += len;
    return s;
  }

  std::vector<float> get_floats(uint64_t count) {
    if (count > (data_.size() - pos_) / sizeof(float)) {
      throw CheckpointTruncatedError("checkpoint " + path_ + " ends early in tensor data");
    }
    std::vector<float> out(count);
    std::memcpy(out.data(), data_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
    return out;
  }

  bool at_end() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace detail

template <typename T>
inline void save_checkpoint(const std::string& path, const ParamStoreT<T>& store,
                            const CheckpointMeta& meta,
                            const OptimizerMoments* moments = nullptr) {
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<uint32_t>(out, kCheckpointVersion);
  detail::put<uint64_t>(out, meta.step);
  detail::put<uint64_t>(out, meta.config_digest);
  detail::put<uint64_t>(out, meta.rng_state);
  detail::put<uint32_t>(out, static_cast<uint32_t>(store.entries().size()));
  for (const auto& e : store.entries()) {
    detail::put_string(out, e.name);
    detail::put<uint32_t>(out, static_cast<uint32_t>(e.tensor.rank()));
    for (int64_t d = 0; d < e.tensor.rank(); ++d) detail::put<int64_t>(out, e.tensor.dim(d));
    for (T v : e.tensor.v()) detail::put<float>(out, static_cast<float>(v));
  }
  detail::put<uint8_t>(out, moments ? 1 : 0);
  if (moments) {
    detail::put<uint64_t>(out, moments->adam_step);
    detail::put<uint32_t>(out, static_cast<uint32_t>(moments->names.size()));
    for (size_t i = 0; i < moments->names.size(); ++i) {
      detail::put_string(out, moments->names[i]);
      detail::put<uint64_t>(out, moments->m[i].size());
      for (float v : moments->m[i]) detail::put<float>(out, v);
      for (float v : moments->v[i]) detail::put<float>(out, v);
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed writing checkpoint " + path);
}

// Loads parameter values into an existing model store. Every tensor must
// match by name and shape in both directions; the error names the first
// few offenders so cross-model loads fail with a usable message.
template <typename T>
inline CheckpointMeta load_checkpoint(const std::string& path, ParamStoreT<T>& store,
                                      OptimizerMoments* moments_out = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (data.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(data.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointFormatError("file " + path + " is not a checkpoint (bad magic)");
  }
  detail::ByteReader r(data, path);
  for (size_t i = 0; i < sizeof(kCheckpointMagic); ++i) (void)r.template get<char>();
  const uint32_t version = r.template get<uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointFormatError("checkpoint version " + std::to_string(version) +
                                " unsupported (want " + std::to_string(kCheckpointVersion) +
                                ")");
  }
  CheckpointMeta meta;
  meta.step = r.template get<uint64_t>();
  meta.config_digest = r.template get<uint64_t>();
  meta.rng_state = r.template get<uint64_t>();

  struct FileEntry {
    std::string name;
    Shape shape;
    std::vector<float> data;
  };
  const uint32_t n_entries = r.template get<uint32_t>();
  std::vector<FileEntry> file_entries;
  file_entries.reserve(n_entries);
  for (uint32_t i = 0; i < n_entries; ++i) {
    FileEntry fe;
    fe.name = r.get_string();
    const uint32_t rank = r.template get<uint32_t>();
    uint64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      const int64_t dim = r.template get<int64_t>();
      if (dim <= 0 || dim > (1 << 28)) {
        throw CheckpointFormatError("checkpoint " + path + " has an implausible dim " +
                                    std::to_string(dim));
      }
      fe.shape.push_back(dim);
      numel *= static_cast<uint64_t>(dim);
    }
    fe.data = r.get_floats(numel);
    file_entries.push_back(std::move(fe));
  }

  std::vector<std::string> offenders;
  std::map<std::string, const FileEntry*> by_name;
  for (const auto& fe : file_entries) by_name[fe.name] = &fe;
  for (const auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) {
      offenders.push_back("model tensor " + e.name + " missing from file");
    } else if (it->second->shape != e.tensor.shape()) {
      offenders.push_back("shape mismatch for " + e.name + ": file " +
                          shape_str(it->second->shape) + " vs model " +
                          shape_str(e.tensor.shape()));
    }
  }
  std::map<std::string, bool> model_names;
  for (const auto& e : store.entries()) model_names[e.name] = true;
  for (const auto& fe : file_entries) {
    if (!model_names.count(fe.name)) {
      offenders.push_back("file tensor " + fe.name + " unknown to the model");
    }
  }
  if (!offenders.empty()) {
    std::string msg = "checkpoint " + path + " does not fit the model (" +
                      std::to_string(offenders.size()) + " problems):";
    for (size_t i = 0; i < offenders.size() && i < 5; ++i) msg += "\n  " + offenders[i];
    throw CheckpointMismatchError(msg);
  }

  const uint8_t has_moments = r.template get<uint8_t>();
  OptimizerMoments moments;
  if (has_moments) {
    moments.adam_step = r.template get<uint64_t>();
    const uint32_t n_slots = r.template get<uint32_t>();
    for (uint32_t i = 0; i < n_slots; ++i) {
      moments.names.push_back(r.get_string());
      const uint64_t numel = r.template get<uint64_t>();
      moments.m.push_back(r.get_floats(numel));
      moments.v.push_back(r.get_floats(numel));
    }
  }
  if (!r.at_end()) {
    throw CheckpointFormatError("checkpoint " + path + " has trailing bytes");
  }

  // all validated; now copy values in
  for (auto& e : store.entries()) {
    const FileEntry* fe = by_name.at(e.name);
    auto& dst = e.tensor.v();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(fe->data[i]);
  }
  if (moments_out) *moments_out = std::move(moments);
  return meta;
}

}  // namespace act
