#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "act/backbone.hpp"
#include "act/nn.hpp"
#include "act/optim.hpp"
#include "act/param_store.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

// The frozen "foundation" transformer is stood up at desk scale by masked
// autoencoding over procedurally generated 16x16 grayscale textures split
// into 4x4 patches (16 patch tokens + CLS). Only the transformer blocks and
// the CLS token survive into the downstream teacher; the pixel embedder,
// learned position table, mask embedding, and reconstruction head are
// scaffolding discarded after pretraining.

constexpr int64_t kImageSide = 16;
constexpr int64_t kImagePatch = 4;
constexpr int64_t kImageTokens = (kImageSide / kImagePatch) * (kImageSide / kImagePatch);
constexpr int64_t kPatchPixels = kImagePatch * kImagePatch;

// One flat 16x16 image with values in [-1, 1].
template <typename T>
inline std::vector<T> gen_texture(Rng& rng) {
  std::vector<T> img(static_cast<size_t>(kImageSide * kImageSide));
  const uint64_t family = rng.below(3);
  const T lo = static_cast<T>(rng.uniform(-1.0, -0.2));
  const T hi = static_cast<T>(rng.uniform(0.2, 1.0));
  switch (family) {
    case 0: {  // checkerboard
      const int cell = 1 << (1 + static_cast<int>(rng.below(3)));  // 2, 4, or 8
      const int px = static_cast<int>(rng.below(static_cast<uint64_t>(cell)));
      const int py = static_cast<int>(rng.below(static_cast<uint64_t>(cell)));
      for (int64_t y = 0; y < kImageSide; ++y)
        for (int64_t x = 0; x < kImageSide; ++x) {
          const bool on = (((x + px) / cell) + ((y + py) / cell)) % 2 == 0;
          img[static_cast<size_t>(y * kImageSide + x)] = on ? hi : lo;
        }
      break;
    }
    case 1: {  // stripes
      const int orient = static_cast<int>(rng.below(3));  // 0 horiz, 1 vert, 2 diagonal
      const int period = 1 << (1 + static_cast<int>(rng.below(3)));
      const int phase = static_cast<int>(rng.below(static_cast<uint64_t>(period)));
      for (int64_t y = 0; y < kImageSide; ++y)
        for (int64_t x = 0; x < kImageSide; ++x) {
          const int64_t t = orient == 0 ? y : orient == 1 ? x : x + y;
          const bool on = ((t + phase) / (period / 2)) % 2 == 0;
          img[static_cast<size_t>(y * kImageSide + x)] = on ? hi : lo;
        }
      break;
    }
    default: {  // gaussian blobs on a flat background
      const int k = 1 + static_cast<int>(rng.below(3));
      for (auto& v : img) v = lo;
      for (int b = 0; b < k; ++b) {
        const double cx = rng.uniform(2.0, 13.0);
        const double cy = rng.uniform(2.0, 13.0);
        const double s2 = rng.uniform(1.5, 12.0);
        for (int64_t y = 0; y < kImageSide; ++y)
          for (int64_t x = 0; x < kImageSide; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            auto& v = img[static_cast<size_t>(y * kImageSide + x)];
            v = std::min<T>(T(1), v + (hi - lo) * static_cast<T>(std::exp(-d2 / (2.0 * s2))));
          }
      }
      break;
    }
  }
  return img;
}

// Image split into kImageTokens rows of kPatchPixels raster-ordered pixels.
template <typename T>
inline std::vector<T> patchify_image(const std::vector<T>& img) {
  const int64_t side = kImageSide / kImagePatch;
  std::vector<T> out(static_cast<size_t>(kImageTokens * kPatchPixels));
  for (int64_t ty = 0; ty < side; ++ty)
    for (int64_t tx = 0; tx < side; ++tx)
      for (int64_t y = 0; y < kImagePatch; ++y)
        for (int64_t x = 0; x < kImagePatch; ++x) {
          out[static_cast<size_t>((ty * side + tx) * kPatchPixels + y * kImagePatch + x)] =
              img[static_cast<size_t>((ty * kImagePatch + y) * kImageSide + tx * kImagePatch + x)];
        }
  return out;
}

struct FoundationConfig {
  int64_t width = 96;
  int64_t depth = 6;
  int64_t heads = 4;
  int64_t steps = 400;
  int64_t batch = 8;
  double lr = 1e-3;
  double mask_ratio = 0.5;
  uint64_t seed = 0;
};

template <typename T>
struct SurrogateResultT {
  ParamStoreT<T> params;  // foundation.cls and foundation.block* only
  double loss_first = 0.0;
  double loss_last = 0.0;
};

// Copies values of every src entry whose name matches the destination store;
// missing names or shape mismatches are errors.
template <typename T>
inline void copy_matching_params(const ParamStoreT<T>& src, ParamStoreT<T>& dst) {
  for (const auto& e : src.entries()) {
    if (!dst.has(e.name)) throw ArgumentError("no destination tensor named " + e.name);
    auto d = dst.get(e.name);
    if (d.shape() != e.tensor.shape()) {
      throw ShapeError("shape mismatch copying " + e.name);
    }
    d.v() = e.tensor.v();
  }
}

template <typename T>
inline SurrogateResultT<T> make_surrogate_foundation(const FoundationConfig& cfg) {
  if (cfg.width <= 0 || cfg.depth <= 0 || cfg.heads <= 0 || cfg.width % 2 != 0) {
    throw ConfigError("surrogate foundation dims must be positive (even width)");
  }
  Rng init_rng = derive_rng(cfg.seed, {0x914du});
  ParamStoreT<T> ps;
  auto stack = TransformerStackT<T>::create(ps, "foundation", cfg.width, cfg.depth,
                                            cfg.heads, 0.0, init_rng);
  auto pixel_embed =
      LinearT<T>::create(ps, "surrogate.pixel_embed", kPatchPixels, cfg.width, init_rng);
  auto pos_table = TensorT<T>::zeros({kImageTokens + 1, cfg.width});
  fill_normal(pos_table, init_rng, 0.02);
  pos_table = ps.add("surrogate.pos_table", pos_table);
  auto mask_embed = TensorT<T>::zeros({1, cfg.width});
  fill_normal(mask_embed, init_rng, 0.02);
  mask_embed = ps.add("surrogate.mask_embed", mask_embed);
  auto head = LinearT<T>::create(ps, "surrogate.head", cfg.width, kPatchPixels, init_rng);

  typename AdamWT<T>::Options opt;
  opt.lr = cfg.lr;
  AdamWT<T> adam(ps, opt);

  const int64_t n_masked =
      std::max<int64_t>(1, std::llround(cfg.mask_ratio * static_cast<double>(kImageTokens)));
  SurrogateResultT<T> result;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    TapeT<T> tape;
    TensorT<T> loss;
    for (int64_t b = 0; b < cfg.batch; ++b) {
      Rng srng = derive_rng(cfg.seed, {0xda7au, static_cast<uint64_t>(step),
                                       static_cast<uint64_t>(b)});
      const auto img = gen_texture<T>(srng);
      const auto patches = patchify_image(img);

      // BERT-style corruption: masked patch tokens swap in the mask embedding
      std::vector<int64_t> order(kImageTokens);
      for (int64_t i = 0; i < kImageTokens; ++i) order[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < n_masked; ++i) {
        const int64_t j = i + static_cast<int64_t>(
                                  srng.below(static_cast<uint64_t>(kImageTokens - i)));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
      }
      std::vector<bool> masked(kImageTokens, false);
      for (int64_t i = 0; i < n_masked; ++i) masked[static_cast<size_t>(order[static_cast<size_t>(i)])] = true;

      auto tokens = pixel_embed.forward(
          tape, TensorT<T>::from({kImageTokens, kPatchPixels}, patches));
      std::vector<int64_t> pick(kImageTokens);
      for (int64_t i = 0; i < kImageTokens; ++i)
        pick[static_cast<size_t>(i)] = masked[static_cast<size_t>(i)] ? kImageTokens : i;
      auto corrupted = tape.gather_rows(tape.concat({tokens, mask_embed}, 0), pick);

      auto pos_tok = tape.slice(pos_table, 0, 1, kImageTokens);
      auto pos_cls = tape.slice(pos_table, 0, 0, 1);
      auto hidden = stack.encode(tape, corrupted, pos_tok, pos_cls);
      auto recon = head.forward(tape, tape.slice(hidden, 0, 1, kImageTokens));

      // MSE over the masked patches' pixels only
      std::vector<int64_t> mrows;
      for (int64_t i = 0; i < kImageTokens; ++i)
        if (masked[static_cast<size_t>(i)]) mrows.push_back(i);
      auto pred = tape.gather_rows(recon, mrows);
      auto target = tape.gather_rows(TensorT<T>::from({kImageTokens, kPatchPixels}, patches),
                                     mrows);
      auto diff = tape.sub(pred, target);
      auto mse = tape.mean_all(tape.mul(diff, diff));
      auto contrib = tape.scale(mse, static_cast<T>(1.0 / static_cast<double>(cfg.batch)));
      loss = b == 0 ? contrib : tape.add(loss, contrib);
    }
    if (step == 0) result.loss_first = static_cast<double>(loss.item());
    if (step == cfg.steps - 1) result.loss_last = static_cast<double>(loss.item());
    adam.zero_grad();
    tape.backward(loss);
    adam.step();
  }

  // keep only the reusable pieces
  for (const auto& e : ps.entries()) {
    if (glob_match("foundation.*", e.name)) result.params.add(e.name, e.tensor, e.trainable);
  }
  return result;
}

}  // namespace act
