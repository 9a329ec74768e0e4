#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "act/errors.hpp"
#include "act/param_store.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

template <typename T>
struct LinearT {
  TensorT<T> w;  // [in, out]
  TensorT<T> b;  // [out]

  static LinearT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t in,
                        int64_t out, Rng& rng) {
    LinearT l;
    auto w = TensorT<T>::zeros({in, out});
    fill_xavier(w, rng);
    l.w = ps.add(prefix + ".w", w);
    l.b = ps.add(prefix + ".b", TensorT<T>::zeros({out}));
    return l;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> x) const {
    return tape.add_bias(tape.matmul(x, w), b);
  }
};

template <typename T>
struct LayerNormT {
  TensorT<T> gain;
  TensorT<T> bias;

  static LayerNormT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t dim) {
    LayerNormT n;
    n.gain = ps.add(prefix + ".gain", TensorT<T>::filled({dim}, T(1)));
    n.bias = ps.add(prefix + ".bias", TensorT<T>::zeros({dim}));
    return n;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> x) const {
    return tape.layer_norm(x, gain, bias);
  }
};

// Two-layer MLP with GELU in the middle.
template <typename T>
struct Mlp2T {
  LinearT<T> fc1, fc2;

  static Mlp2T create(ParamStoreT<T>& ps, const std::string& prefix, int64_t in,
                      int64_t hidden, int64_t out, Rng& rng) {
    Mlp2T m;
    m.fc1 = LinearT<T>::create(ps, prefix + ".fc1", in, hidden, rng);
    m.fc2 = LinearT<T>::create(ps, prefix + ".fc2", hidden, out, rng);
    return m;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> x) const {
    return fc2.forward(tape, tape.gelu(fc1.forward(tape, x)));
  }
};

// Multi-head self-attention over a [S, C] sequence, full bidirectional.
template <typename T>
struct AttentionT {
  LinearT<T> qkv;   // C -> 3C
  LinearT<T> proj;  // C -> C
  int64_t width = 0;
  int64_t heads = 0;

  static AttentionT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t width,
                           int64_t heads, Rng& rng) {
    if (width % heads != 0) {
      throw ArgumentError("attention width " + std::to_string(width) +
                          " not divisible by heads " + std::to_string(heads));
    }
    AttentionT a;
    a.width = width;
    a.heads = heads;
    a.qkv = LinearT<T>::create(ps, prefix + ".qkv", width, 3 * width, rng);
    a.proj = LinearT<T>::create(ps, prefix + ".proj", width, width, rng);
    return a;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> x) const {
    const int64_t d = width / heads;
    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
    TensorT<T> fused = qkv.forward(tape, x);  // [S, 3C]
    std::vector<TensorT<T>> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int64_t h = 0; h < heads; ++h) {
      auto q = tape.slice(fused, 1, h * d, d);
      auto k = tape.slice(fused, 1, width + h * d, d);
      auto v = tape.slice(fused, 1, 2 * width + h * d, d);
      auto scores = tape.scale(tape.matmul(q, tape.transpose(k)), inv_sqrt_d);
      auto att = tape.softmax(scores, 1);
      head_outs.push_back(tape.matmul(att, v));
    }
    return proj.forward(tape, tape.concat(head_outs, 1));
  }
};

// Pre-norm transformer block. Positional embeddings are re-injected into the
// attention branch only, never into the residual stream:
//   h' = MSA(LN(h + pos)) + h
//   out = MLP(LN(h')) + h'
// Stochastic depth drops a residual branch entirely during training, scaling
// the kept branches by 1/(1-rate).
template <typename T>
struct BlockT {
  LayerNormT<T> ln1, ln2;
  AttentionT<T> attn;
  Mlp2T<T> mlp;
  double drop_path = 0.0;

  static BlockT create(ParamStoreT<T>& ps, const std::string& prefix, int64_t width,
                       int64_t heads, int64_t mlp_ratio, double drop_path, Rng& rng) {
    BlockT b;
    b.ln1 = LayerNormT<T>::create(ps, prefix + ".ln1", width);
    b.ln2 = LayerNormT<T>::create(ps, prefix + ".ln2", width);
    b.attn = AttentionT<T>::create(ps, prefix + ".attn", width, heads, rng);
    b.mlp = Mlp2T<T>::create(ps, prefix + ".mlp", width, width * mlp_ratio, width, rng);
    b.drop_path = drop_path;
    return b;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> h, TensorT<T> pos, bool training,
                     Rng* rng) const {
    auto branch_scale = [&](TensorT<T> branch) {
      if (!training || drop_path <= 0.0) return branch;
      const bool keep = rng->uniform() >= drop_path;
      return tape.scale(branch, keep ? static_cast<T>(1.0 / (1.0 - drop_path)) : T(0));
    };
    auto attn_in = ln1.forward(tape, tape.add(h, pos));
    auto h2 = tape.add(branch_scale(attn.forward(tape, attn_in)), h);
    auto mlp_in = ln2.forward(tape, h2);
    return tape.add(branch_scale(mlp.forward(tape, mlp_in)), h2);
  }
};

}  // namespace act
