#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "act/errors.hpp"
#include "act/geometry.hpp"
#include "act/nn.hpp"
#include "act/optim.hpp"
#include "act/param_store.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

// Shared per-point MLP (3 -> C/2 -> C) followed by a max-pool over each
// neighborhood, giving one permutation-invariant token per patch.
template <typename T>
struct PatchEmbedT {
  Mlp2T<T> mlp;
  int64_t width = 0;

  static PatchEmbedT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t width,
                            Rng& rng) {
    PatchEmbedT e;
    e.width = width;
    e.mlp = Mlp2T<T>::create(ps, prefix + ".point_mlp", 3, width / 2, width, rng);
    return e;
  }

  // rel: flat neighborhood coordinates, n_groups*k*3, centroid-relative
  TensorT<T> forward(TapeT<T>& tape, const std::vector<T>& rel, int64_t n_groups,
                     int64_t k) const {
    auto pts = TensorT<T>::from({n_groups * k, 3}, rel);
    auto feats = mlp.forward(tape, pts);                       // [n*k, C]
    auto grouped = tape.reshape(feats, {n_groups, k, width});  // [n, k, C]
    return tape.max_over_axis(grouped, 1);                     // [n, C]
  }

  TensorT<T> forward(TapeT<T>& tape, const PatchSetT<T>& patches) const {
    return forward(tape, patches.rel, patches.n_groups, patches.k);
  }
};

// One edge-feature refinement pass over the token-KNN graph: per edge (i,j)
// the feature [x_i ; x_j - x_i] runs through an MLP and is max-pooled back
// onto node i.
template <typename T>
struct EdgeRefineT {
  Mlp2T<T> mlp;
  int64_t width = 0;

  static EdgeRefineT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t width,
                            Rng& rng) {
    EdgeRefineT e;
    e.width = width;
    e.mlp = Mlp2T<T>::create(ps, prefix + ".edge_mlp", 2 * width, width, width, rng);
    return e;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> tokens,
                     const std::vector<std::vector<int64_t>>& graph) const {
    const int64_t n = tokens.dim(0);
    if (static_cast<int64_t>(graph.size()) != n) {
      throw ShapeError("edge refine: graph size does not match token count");
    }
    const int64_t k = static_cast<int64_t>(graph[0].size());
    std::vector<int64_t> idx_i, idx_j;
    idx_i.reserve(static_cast<size_t>(n * k));
    idx_j.reserve(static_cast<size_t>(n * k));
    for (int64_t i = 0; i < n; ++i) {
      if (static_cast<int64_t>(graph[static_cast<size_t>(i)].size()) != k) {
        throw ShapeError("edge refine: ragged neighbor graph");
      }
      for (int64_t j = 0; j < k; ++j) {
        idx_i.push_back(i);
        idx_j.push_back(graph[static_cast<size_t>(i)][static_cast<size_t>(j)]);
      }
    }
    auto xi = tape.gather_rows(tokens, idx_i);
    auto xj = tape.gather_rows(tokens, idx_j);
    auto edge = tape.concat({xi, tape.sub(xj, xi)}, 1);        // [n*k, 2C]
    auto feats = mlp.forward(tape, edge);                      // [n*k, C]
    return tape.max_over_axis(tape.reshape(feats, {n, k, width}), 1);
  }
};

// KNN graph among the centroids themselves, used by the refinement passes.
template <typename T>
inline std::vector<std::vector<int64_t>> token_graph(const CloudT<T>& centroids, int64_t k) {
  return knn(centroids, centroids, k);
}

enum class PosMode { kNone, k2dXy, k3d };

inline PosMode parse_pos_mode(const std::string& s) {
  if (s == "none") return PosMode::kNone;
  if (s == "2d-xy") return PosMode::k2dXy;
  if (s == "3d") return PosMode::k3d;
  throw ConfigError("unknown positional mode: " + s);
}

inline const char* pos_mode_name(PosMode m) {
  switch (m) {
    case PosMode::kNone: return "none";
    case PosMode::k2dXy: return "2d-xy";
    default: return "3d";
  }
}

// Two-layer MLP (3 -> C -> C) mapping centroid coordinates to positional
// embeddings, plus a learnable CLS position.
template <typename T>
struct PosEmbedT {
  Mlp2T<T> mlp;
  TensorT<T> cls_pos;  // [1, C]
  PosMode mode = PosMode::k3d;
  int64_t width = 0;

  static PosEmbedT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t width,
                          PosMode mode, Rng& rng) {
    PosEmbedT p;
    p.width = width;
    p.mode = mode;
    p.mlp = Mlp2T<T>::create(ps, prefix + ".mlp", 3, width, width, rng);
    auto cls = TensorT<T>::zeros({1, width});
    fill_normal(cls, rng, 0.02);
    p.cls_pos = ps.add(prefix + ".cls_pos", cls);
    return p;
  }

  TensorT<T> forward(TapeT<T>& tape, const CloudT<T>& centroids) const {
    const int64_t n = static_cast<int64_t>(centroids.size());
    if (mode == PosMode::kNone) return TensorT<T>::zeros({n, width});
    std::vector<T> xyz;
    xyz.reserve(static_cast<size_t>(n * 3));
    for (const auto& c : centroids) {
      xyz.push_back(c[0]);
      xyz.push_back(c[1]);
      xyz.push_back(mode == PosMode::k2dXy ? T(0) : c[2]);
    }
    return mlp.forward(tape, TensorT<T>::from({n, 3}, xyz));
  }
};

enum class PromptType { kDeep, kShallow };

inline PromptType parse_prompt_type(const std::string& s) {
  if (s == "deep") return PromptType::kDeep;
  if (s == "shallow") return PromptType::kShallow;
  throw ConfigError("unknown prompt type: " + s);
}

inline const char* prompt_type_name(PromptType t) {
  return t == PromptType::kDeep ? "deep" : "shallow";
}

// Learnable prompt embeddings. Deep mode owns a fresh bank of m prompts per
// layer whose outputs are discarded after that layer; shallow mode owns one
// bank injected before the first layer and carried through.
template <typename T>
struct PromptBankT {
  std::vector<TensorT<T>> layers;  // deep: one [m, C] per block; shallow: single entry
  PromptType type = PromptType::kDeep;
  int64_t m = 0;

  static PromptBankT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t depth,
                            int64_t m, int64_t width, PromptType type, Rng& rng) {
    PromptBankT b;
    b.type = type;
    b.m = m;
    if (m == 0) return b;
    const int64_t banks = type == PromptType::kDeep ? depth : 1;
    for (int64_t l = 0; l < banks; ++l) {
      auto t = TensorT<T>::zeros({m, width});
      fill_normal(t, rng, 0.02);
      b.layers.push_back(ps.add(prefix + ".layer" + std::to_string(l), t));
    }
    return b;
  }

  bool active() const { return m > 0; }
};

// Pre-norm transformer stack with a learnable CLS token. Drop-path rates
// rise linearly from 0 to drop_path_max across the blocks.
template <typename T>
struct TransformerStackT {
  std::vector<BlockT<T>> blocks;
  TensorT<T> cls_token;  // [1, C]
  int64_t width = 0;
  int64_t heads = 0;

  static TransformerStackT create(ParamStoreT<T>& ps, const std::string& prefix,
                                  int64_t width, int64_t depth, int64_t heads,
                                  double drop_path_max, Rng& rng) {
    TransformerStackT s;
    s.width = width;
    s.heads = heads;
    auto cls = TensorT<T>::zeros({1, width});
    fill_normal(cls, rng, 0.02);
    s.cls_token = ps.add(prefix + ".cls", cls);
    for (int64_t l = 0; l < depth; ++l) {
      const double rate =
          depth > 1 ? drop_path_max * static_cast<double>(l) / static_cast<double>(depth - 1)
                    : 0.0;
      s.blocks.push_back(BlockT<T>::create(ps, prefix + ".block" + std::to_string(l), width,
                                           heads, 4, rate, rng));
    }
    return s;
  }

  int64_t depth() const { return static_cast<int64_t>(blocks.size()); }

  // Runs the blocks over an already-formed hidden state. pos rows must align
  // with h rows; prompt slots always receive zero positional terms.
  TensorT<T> run(TapeT<T>& tape, TensorT<T> h, TensorT<T> pos,
                 const PromptBankT<T>* prompts, bool training = false,
                 Rng* rng = nullptr) const {
    const bool prompted = prompts && prompts->active();
    const int64_t base_rows = h.dim(0);
    if (prompted && prompts->type == PromptType::kShallow) {
      h = tape.concat({h, prompts->layers[0]}, 0);
      pos = tape.concat({pos, TensorT<T>::zeros({prompts->m, width})}, 0);
    }
    for (size_t l = 0; l < blocks.size(); ++l) {
      if (prompted && prompts->type == PromptType::kDeep) {
        auto x = tape.concat({h, prompts->layers[l]}, 0);
        auto px = tape.concat({pos, TensorT<T>::zeros({prompts->m, width})}, 0);
        auto out = blocks[l].forward(tape, x, px, training, rng);
        h = tape.slice(out, 0, 0, base_rows);
      } else {
        h = blocks[l].forward(tape, h, pos, training, rng);
      }
    }
    return h;
  }

  // Forms h0 = [CLS; tokens] + [cls_pos; pos_tokens] and runs the stack.
  // Output row 0 is the CLS state; shallow prompt rows, if any, trail the
  // token rows.
  TensorT<T> encode(TapeT<T>& tape, TensorT<T> tokens, TensorT<T> pos_tokens,
                    TensorT<T> cls_pos, const PromptBankT<T>* prompts = nullptr,
                    bool training = false, Rng* rng = nullptr) const {
    if (tokens.dim(1) != width) {
      throw ShapeError("encode: token width " + std::to_string(tokens.dim(1)) +
                       " does not match stack width " + std::to_string(width));
    }
    auto pos = tape.concat({cls_pos, pos_tokens}, 0);
    auto h0 = tape.add(tape.concat({cls_token, tokens}, 0), pos);
    return run(tape, h0, pos, prompts, training, rng);
  }
};

// Pooled global descriptor: CLS state concatenated with the max over patch
// token states, yielding a [1, 2C] row.
template <typename T>
inline TensorT<T> global_feature(TapeT<T>& tape, TensorT<T> hidden, int64_t n_tokens) {
  auto cls = tape.slice(hidden, 0, 0, 1);
  auto tok = tape.slice(hidden, 0, 1, n_tokens);
  auto pooled = tape.max_over_axis(tok, 0);  // [C]
  return tape.concat({cls, tape.reshape(pooled, {1, pooled.dim(0)})}, 1);
}

}  // namespace act
