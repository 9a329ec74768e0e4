#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "act/errors.hpp"
#include "act/geometry.hpp"
#include "act/rng.hpp"

namespace act {

// One cloud per text file: an optional "# label <id>" header followed by
// one "x y z" line per point. %.9g keeps float coordinates bit-exact.
template <typename T>
inline void save_cloud(const std::string& path, const CloudT<T>& cloud, int64_t label) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  std::string text;
  if (label >= 0) text += "# label " + std::to_string(label) + "\n";
  char buf[96];
  for (const auto& p : cloud) {
    std::snprintf(buf, sizeof(buf), "%.9g %.9g %.9g\n", static_cast<double>(p[0]),
                  static_cast<double>(p[1]), static_cast<double>(p[2]));
    text += buf;
  }
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

template <typename T>
inline CloudT<T> load_cloud(const std::string& path, int64_t* label_out = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  CloudT<T> cloud;
  if (label_out) *label_out = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line.front() == '#') {
      std::istringstream hdr(line.substr(1));
      std::string word;
      hdr >> word;
      if (word == "label" && label_out) {
        int64_t l;
        if (hdr >> l) *label_out = l;
      }
      continue;
    }
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) {
      throw IoError("bad point line " + std::to_string(lineno) + " in " + path);
    }
    cloud.push_back({static_cast<T>(x), static_cast<T>(y), static_cast<T>(z)});
  }
  if (cloud.empty()) throw IoError("no points in " + path);
  return cloud;
}

struct ManifestEntry {
  std::string path;  // relative to the manifest's directory
  int64_t label = -1;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& items) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& e : items) out << e.path << "\t" << e.label << "\n";
  if (!out) throw IoError("failed writing " + path);
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read manifest " + path);
  std::vector<ManifestEntry> items;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) {
      throw IoError("manifest line " + std::to_string(lineno) + " lacks a tab separator");
    }
    ManifestEntry e;
    e.path = line.substr(0, tab);
    try {
      e.label = std::stoll(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw IoError("manifest line " + std::to_string(lineno) + " has a bad label");
    }
    items.push_back(std::move(e));
  }
  return items;
}

// Clouds are normalized at load time so every stage sees centered,
// unit-scale inputs no matter how the files were produced.
template <typename T>
struct LoadedDatasetT {
  std::vector<CloudT<T>> clouds;
  std::vector<int64_t> labels;

  int64_t size() const { return static_cast<int64_t>(clouds.size()); }
};

template <typename T>
inline LoadedDatasetT<T> load_split(const std::string& manifest_path) {
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  LoadedDatasetT<T> ds;
  for (const auto& e : read_manifest(manifest_path)) {
    int64_t file_label = -1;
    auto cloud = load_cloud<T>((dir / e.path).string(), &file_label);
    normalize(cloud);
    ds.clouds.push_back(std::move(cloud));
    ds.labels.push_back(e.label >= 0 ? e.label : file_label);
  }
  if (ds.clouds.empty()) throw IoError("empty dataset from " + manifest_path);
  return ds;
}

struct GenDataResult {
  int64_t files = 0;
  std::vector<std::string> manifests;
};

// Synthetic 8-class corpus: per-sample rng streams keyed by (class, index)
// make every file independent of generation order. Split sizes follow the
// 70/15/15 floor rule per class.
inline GenDataResult gen_dataset(const std::string& out_dir, int64_t n_per_class,
                                 int64_t points, uint64_t seed) {
  if (n_per_class < 1 || points < 8) throw ConfigError("dataset dimensions too small");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  AugmentOptions aug;
  aug.rotation = RotationMode::kZOnly;
  aug.scale_lo = 0.8;
  aug.scale_hi = 1.25;
  aug.translate = 0.0;
  aug.stretch = 0.15;
  aug.jitter = 0.005;

  const int64_t n_train = (n_per_class * 70) / 100;
  const int64_t n_val = (n_per_class * 15) / 100;

  GenDataResult res;
  std::vector<ManifestEntry> train, val, test;
  char name[64];
  for (int c = 0; c < kNumShapeKinds; ++c) {
    const auto kind = static_cast<ShapeKind>(c);
    for (int64_t i = 0; i < n_per_class; ++i) {
      Rng rng = derive_rng(seed, {static_cast<uint64_t>(c), static_cast<uint64_t>(i)});
      auto cloud = gen_shape<float>(kind, points, rng);
      cloud = augment(cloud, rng, aug);
      std::snprintf(name, sizeof(name), "%s_%03lld.txt", shape_kind_name(kind),
                    static_cast<long long>(i));
      save_cloud((std::filesystem::path(out_dir) / name).string(), cloud,
                 static_cast<int64_t>(c));
      ++res.files;
      ManifestEntry e{name, c};
      if (i < n_train) {
        train.push_back(e);
      } else if (i < n_train + n_val) {
        val.push_back(e);
      } else {
        test.push_back(e);
      }
    }
  }
  auto emit = [&](const char* fname, const std::vector<ManifestEntry>& items) {
    const auto p = (std::filesystem::path(out_dir) / fname).string();
    write_manifest(p, items);
    res.manifests.push_back(p);
  };
  emit("train.txt", train);
  emit("val.txt", val);
  emit("test.txt", test);
  return res;
}

}  // namespace act
