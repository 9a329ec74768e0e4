#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "act/backbone.hpp"
#include "act/dvae.hpp"
#include "act/errors.hpp"
#include "act/geometry.hpp"
#include "act/losses.hpp"
#include "act/nn.hpp"
#include "act/param_store.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

enum class MaskStrategy { kRandom, kBlock };

inline MaskStrategy parse_mask_strategy(const std::string& s) {
  if (s == "random") return MaskStrategy::kRandom;
  if (s == "block") return MaskStrategy::kBlock;
  throw ConfigError("unknown mask strategy: " + s);
}

inline const char* mask_strategy_name(MaskStrategy s) {
  return s == MaskStrategy::kRandom ? "random" : "block";
}

struct MaskSpec {
  std::vector<uint8_t> mask;  // 1 = masked
  MaskStrategy strategy = MaskStrategy::kRandom;
  double ratio = 0.0;

  int64_t popcount() const {
    int64_t c = 0;
    for (uint8_t m : mask) c += m ? 1 : 0;
    return c;
  }
};

// Masks exactly round(ratio * n_s) slots. Random strategy draws a uniform
// subset; block masks the nearest centroids to a uniformly chosen anchor.
template <typename T>
inline MaskSpec gen_mask(int64_t n_s, MaskStrategy strategy, double ratio,
                         const CloudT<T>* centroids, Rng& rng) {
  if (n_s <= 0) throw ArgumentError("gen_mask: token count must be positive");
  if (ratio < 0.0 || ratio > 1.0) throw ArgumentError("mask ratio outside [0,1]");
  MaskSpec spec;
  spec.strategy = strategy;
  spec.ratio = ratio;
  spec.mask.assign(static_cast<size_t>(n_s), 0);
  const int64_t want = std::llround(ratio * static_cast<double>(n_s));
  if (want == 0) return spec;

  if (strategy == MaskStrategy::kRandom) {
    std::vector<int64_t> idx(static_cast<size_t>(n_s));
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = 0; i < want; ++i) {
      const int64_t j = i + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n_s - i)));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
      spec.mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
    }
    return spec;
  }

  if (!centroids || static_cast<int64_t>(centroids->size()) != n_s) {
    throw ArgumentError("block masking needs one centroid per token");
  }
  const int64_t anchor = static_cast<int64_t>(rng.below(static_cast<uint64_t>(n_s)));
  std::vector<std::pair<T, int64_t>> order(static_cast<size_t>(n_s));
  for (int64_t i = 0; i < n_s; ++i) {
    order[static_cast<size_t>(i)] = {
        dist2((*centroids)[static_cast<size_t>(anchor)], (*centroids)[static_cast<size_t>(i)]), i};
  }
  std::sort(order.begin(), order.end());
  for (int64_t r = 0; r < want; ++r) spec.mask[static_cast<size_t>(order[static_cast<size_t>(r)].second)] = 1;
  return spec;
}

// Scatters encoded visible rows back to their slots and fills masked slots
// with the shared mask embedding. Row order follows the original token
// order. visible_tokens may be null only when every slot is masked.
template <typename T>
inline TensorT<T> corrupt_scatter(TapeT<T>& tape, const TensorT<T>* visible_tokens,
                                  const MaskSpec& spec, TensorT<T> mask_token) {
  const int64_t n = static_cast<int64_t>(spec.mask.size());
  const int64_t n_vis = n - spec.popcount();
  if (mask_token.rank() != 2 || mask_token.dim(0) != 1) {
    throw ShapeError("corrupt: mask token must be a single row");
  }
  if (n_vis == 0) {
    return tape.gather_rows(mask_token, std::vector<int64_t>(static_cast<size_t>(n), 0));
  }
  if (!visible_tokens || visible_tokens->dim(0) != n_vis) {
    throw ShapeError("corrupt: expected " + std::to_string(n_vis) + " visible rows, got " +
                     std::to_string(visible_tokens ? visible_tokens->dim(0) : 0));
  }
  if (mask_token.dim(1) != visible_tokens->dim(1)) {
    throw ShapeError("corrupt: mask token width mismatch");
  }
  auto full = tape.concat({*visible_tokens, mask_token}, 0);
  std::vector<int64_t> pick(static_cast<size_t>(n));
  int64_t run = 0;
  for (int64_t i = 0; i < n; ++i) {
    pick[static_cast<size_t>(i)] = spec.mask[static_cast<size_t>(i)] ? n_vis : run++;
  }
  return tape.gather_rows(full, pick);
}

// Full decoder input: scattered content plus the positional term on every
// slot, masked and visible alike.
template <typename T>
inline TensorT<T> corrupt(TapeT<T>& tape, const TensorT<T>* visible_tokens,
                          const MaskSpec& spec, TensorT<T> mask_token, TensorT<T> pos_terms) {
  auto scattered = corrupt_scatter(tape, visible_tokens, spec, mask_token);
  if (pos_terms.dim(0) != scattered.dim(0) || pos_terms.dim(1) != scattered.dim(1)) {
    throw ShapeError("corrupt: positional term shape mismatch");
  }
  return tape.add(scattered, pos_terms);
}

enum class TargetKind { kTeacherFeature, kDiscreteToken, kCoordinates };
enum class MetricKind { kCosine, kCrossEntropy, kChamferL1 };

inline TargetKind parse_target_kind(const std::string& s) {
  if (s == "teacher-feature") return TargetKind::kTeacherFeature;
  if (s == "discrete-token") return TargetKind::kDiscreteToken;
  if (s == "coordinates") return TargetKind::kCoordinates;
  throw ConfigError("unknown distillation target: " + s);
}

inline MetricKind parse_metric_kind(const std::string& s) {
  if (s == "cosine") return MetricKind::kCosine;
  if (s == "cross-entropy") return MetricKind::kCrossEntropy;
  if (s == "chamfer_l1") return MetricKind::kChamferL1;
  throw ConfigError("unknown distillation metric: " + s);
}

inline const char* target_kind_name(TargetKind t) {
  switch (t) {
    case TargetKind::kTeacherFeature: return "teacher-feature";
    case TargetKind::kDiscreteToken: return "discrete-token";
    default: return "coordinates";
  }
}

inline const char* metric_kind_name(MetricKind m) {
  switch (m) {
    case MetricKind::kCosine: return "cosine";
    case MetricKind::kCrossEntropy: return "cross-entropy";
    default: return "chamfer_l1";
  }
}

inline void validate_pairing(TargetKind target, MetricKind metric) {
  const bool ok = (target == TargetKind::kTeacherFeature && metric == MetricKind::kCosine) ||
                  (target == TargetKind::kDiscreteToken && metric == MetricKind::kCrossEntropy) ||
                  (target == TargetKind::kCoordinates && metric == MetricKind::kChamferL1);
  if (!ok) throw ConfigError("incompatible distillation target/metric pairing");
}

struct MaskConfig {
  MaskStrategy strategy = MaskStrategy::kRandom;
  double ratio = 0.75;
};

struct StudentConfig {
  int64_t width = 96;
  int64_t depth = 6;
  int64_t dec_depth = 2;
  int64_t heads = 4;
  int64_t n_groups = 16;
  int64_t group_k = 16;
  double drop_path = 0.1;
  PosMode pos_mode = PosMode::k3d;
  TargetKind target = TargetKind::kTeacherFeature;
  MetricKind metric = MetricKind::kCosine;
  bool normalize_targets = true;
  bool aux_kd = false;  // adds the feature projection next to the coords head
  int64_t teacher_width = 96;
  int64_t teacher_vocab = 512;
};

// MAE-style student: the encoder sees CLS plus visible tokens only, the
// decoder runs over the full slot count with mask embeddings scattered in.
template <typename T>
struct StudentModelT {
  StudentConfig cfg;
  PatchEmbedT<T> embed;
  PosEmbedT<T> pos;
  TransformerStackT<T> encoder;
  TransformerStackT<T> decoder;
  TensorT<T> mask_token;  // [1, C]
  LinearT<T> head;        // target-dependent output projection
  bool identity_head = false;
  LinearT<T> kd_head;  // feature projection for the auxiliary mode
  bool identity_kd_head = false;

  static StudentModelT create(ParamStoreT<T>& ps, const StudentConfig& cfg, Rng& rng) {
    if (cfg.dec_depth < 1) throw ConfigError("decoder depth must be at least 1");
    validate_pairing(cfg.target, cfg.metric);
    StudentModelT s;
    s.cfg = cfg;
    s.embed = PatchEmbedT<T>::create(ps, "embed", cfg.width, rng);
    s.pos = PosEmbedT<T>::create(ps, "pos", cfg.width, cfg.pos_mode, rng);
    s.encoder = TransformerStackT<T>::create(ps, "encoder", cfg.width, cfg.depth, cfg.heads,
                                             cfg.drop_path, rng);
    s.decoder = TransformerStackT<T>::create(ps, "decoder", cfg.width, cfg.dec_depth,
                                             cfg.heads, 0.0, rng);
    auto mt = TensorT<T>::zeros({1, cfg.width});
    fill_normal(mt, rng, 0.02);
    s.mask_token = ps.add("mask_token", mt);

    switch (cfg.target) {
      case TargetKind::kTeacherFeature:
        if (cfg.width == cfg.teacher_width) {
          s.identity_head = true;
        } else {
          s.head = LinearT<T>::create(ps, "head", cfg.width, cfg.teacher_width, rng);
        }
        break;
      case TargetKind::kDiscreteToken:
        s.head = LinearT<T>::create(ps, "head", cfg.width, cfg.teacher_vocab, rng);
        break;
      case TargetKind::kCoordinates:
        s.head = LinearT<T>::create(ps, "head", cfg.width, cfg.group_k * 3, rng);
        break;
    }
    if (cfg.aux_kd) {
      if (cfg.target != TargetKind::kCoordinates) {
        throw ConfigError("auxiliary distillation runs on the coordinates baseline");
      }
      if (cfg.width == cfg.teacher_width) {
        s.identity_kd_head = true;
      } else {
        s.kd_head = LinearT<T>::create(ps, "kd_head", cfg.width, cfg.teacher_width, rng);
      }
    }
    return s;
  }

  struct VisibleEncoding {
    TensorT<T> hidden;                // [1 + n_vis, C]
    TensorT<T> tokens;                // [n_vis, C]
    TensorT<T> pos_all;               // [N_s, C]
    std::vector<int64_t> visible_idx;
  };

  // Encoder pass over the visible subset; masked token content never enters.
  VisibleEncoding encode_visible(TapeT<T>& tape, const PatchSetT<T>& patches,
                                 const MaskSpec& spec, bool training = false,
                                 Rng* rng = nullptr) const {
    VisibleEncoding out;
    auto all_tokens = embed.forward(tape, patches);
    out.pos_all = pos.forward(tape, patches.centroids);
    for (int64_t i = 0; i < static_cast<int64_t>(spec.mask.size()); ++i) {
      if (!spec.mask[static_cast<size_t>(i)]) out.visible_idx.push_back(i);
    }
    if (out.visible_idx.empty()) {
      throw ArgumentError("student encoder needs at least one visible token");
    }
    auto vis_tokens = tape.gather_rows(all_tokens, out.visible_idx);
    auto vis_pos = tape.gather_rows(out.pos_all, out.visible_idx);
    out.hidden =
        encoder.encode(tape, vis_tokens, vis_pos, pos.cls_pos, nullptr, training, rng);
    out.tokens = tape.slice(out.hidden, 0, 1,
                            static_cast<int64_t>(out.visible_idx.size()));
    return out;
  }

  // Decoder pass over all slots: encoder outputs at visible positions, the
  // mask embedding elsewhere, positions re-added throughout.
  TensorT<T> decode_full(TapeT<T>& tape, const VisibleEncoding& enc, const MaskSpec& spec,
                         bool training = false, Rng* rng = nullptr) const {
    auto scattered = corrupt_scatter(tape, &enc.tokens, spec, mask_token);
    auto hidden = decoder.encode(tape, scattered, enc.pos_all, pos.cls_pos, nullptr,
                                 training, rng);
    return tape.slice(hidden, 0, 1, static_cast<int64_t>(spec.mask.size()));
  }

  TensorT<T> project(TapeT<T>& tape, TensorT<T> features) const {
    return identity_head ? features : head.forward(tape, features);
  }

  TensorT<T> project_kd(TapeT<T>& tape, TensorT<T> features) const {
    return identity_kd_head ? features : kd_head.forward(tape, features);
  }
};

template <typename T>
struct MpmParts {
  TensorT<T> loss;
  double loss_cos = 0.0;  // feature/token style part
  double loss_cd = 0.0;   // coordinates part
  int64_t n_masked = 0;
};

namespace detail {

// Teacher features as constants: the teacher runs on its own tape, so no
// gradient or tape node ever reaches its parameters.
template <typename T>
inline TensorT<T> teacher_feature_targets(const DvaeModelT<T>& teacher,
                                          const PatchSetT<T>& patches, bool normalize) {
  TapeT<T> teacher_tape;
  auto enc = teacher.encode_on_patches(teacher_tape, patches);
  auto feats = TensorT<T>::from(enc.features.shape(), enc.features.v());
  return normalize ? layer_norm_values(feats) : feats;
}

template <typename T>
inline std::vector<int64_t> teacher_token_labels(const DvaeModelT<T>& teacher,
                                                 const PatchSetT<T>& patches) {
  TapeT<T> teacher_tape;
  auto enc = teacher.encode_on_patches(teacher_tape, patches);
  const int64_t n = enc.logits.dim(0), v = enc.logits.dim(1);
  std::vector<int64_t> labels(static_cast<size_t>(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    int64_t best = 0;
    for (int64_t j = 1; j < v; ++j) {
      if (enc.logits.v()[static_cast<size_t>(i * v + j)] >
          enc.logits.v()[static_cast<size_t>(i * v + best)]) {
        best = j;
      }
    }
    labels[static_cast<size_t>(i)] = best;
  }
  return labels;
}

// Per-patch chamfer between predicted local points and the patch's stored
// centroid-relative coordinates, aggregated like every other masked loss.
template <typename T>
inline TensorT<T> masked_coordinate_loss(TapeT<T>& tape, TensorT<T> pred_flat,
                                         const PatchSetT<T>& patches,
                                         const std::vector<uint8_t>& mask) {
  const int64_t n = patches.n_groups, k = patches.k;
  if (pred_flat.dim(0) != n || pred_flat.dim(1) != k * 3) {
    throw ShapeError("coordinate head output must be [n_groups, k*3]");
  }
  int64_t selected = 0;
  for (uint8_t m : mask) selected += m ? 1 : 0;
  std::vector<TensorT<T>> per_patch;
  per_patch.reserve(static_cast<size_t>(n));
  for (int64_t g = 0; g < n; ++g) {
    auto pred = tape.reshape(tape.slice(pred_flat, 0, g, 1), {k, 3});
    CloudT<T> gt(static_cast<size_t>(k));
    for (int64_t j = 0; j < k; ++j)
      for (int d = 0; d < 3; ++d)
        gt[static_cast<size_t>(j)][static_cast<size_t>(d)] =
            patches.rel[static_cast<size_t>((g * k + j) * 3 + d)];
    per_patch.push_back(tape.reshape(chamfer_l1_loss(tape, pred, gt), {1}));
  }
  std::vector<T> w(static_cast<size_t>(n));
  for (int64_t g = 0; g < n; ++g) {
    if (selected == 0) {
      w[static_cast<size_t>(g)] = T(1) / static_cast<T>(n);
    } else {
      w[static_cast<size_t>(g)] = mask[static_cast<size_t>(g)] ? T(1) / static_cast<T>(selected) : T(0);
    }
  }
  return weighted_row_mean(tape, tape.concat(per_patch, 0), w);
}

}  // namespace detail

// Unified masked-modeling objective over a target/metric pairing. The
// teacher encodes the uncorrupted cloud; both sides share one patch set so
// the masked positions line up.
template <typename T>
inline MpmParts<T> mpm_loss_generic(TapeT<T>& tape, const StudentModelT<T>& student,
                                    const DvaeModelT<T>& teacher, const CloudT<T>& cloud,
                                    const MaskConfig& mask_cfg, TargetKind target,
                                    MetricKind metric, Rng& rng, bool training = true) {
  validate_pairing(target, metric);
  Rng fps_rng(rng.next_u64());
  auto patches =
      training ? make_patches(cloud, student.cfg.n_groups, student.cfg.group_k, &fps_rng)
               : make_patches_from(cloud, student.cfg.n_groups, student.cfg.group_k,
                                   canonical_start(cloud));
  auto spec = gen_mask(student.cfg.n_groups, mask_cfg.strategy, mask_cfg.ratio,
                       &patches.centroids, rng);

  auto enc = student.encode_visible(tape, patches, spec, training, &rng);
  auto dec_tokens = student.decode_full(tape, enc, spec, training, &rng);
  auto out = student.project(tape, dec_tokens);

  MpmParts<T> parts;
  parts.n_masked = spec.popcount();
  switch (target) {
    case TargetKind::kTeacherFeature: {
      auto targets = detail::teacher_feature_targets(teacher, patches,
                                                     student.cfg.normalize_targets);
      if (out.dim(1) != targets.dim(1)) {
        throw ShapeError("student features project to width " + std::to_string(out.dim(1)) +
                         " but teacher width is " + std::to_string(targets.dim(1)));
      }
      parts.loss = cosine_mimic_loss(tape, out, targets, spec.mask);
      parts.loss_cos = static_cast<double>(parts.loss.item());
      break;
    }
    case TargetKind::kDiscreteToken: {
      auto labels = detail::teacher_token_labels(teacher, patches);
      auto per_row = cross_entropy_rows(tape, out, labels);
      int64_t selected = parts.n_masked;
      const int64_t n = per_row.dim(0);
      std::vector<T> w(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) {
        if (selected == 0) {
          w[static_cast<size_t>(i)] = T(1) / static_cast<T>(n);
        } else {
          w[static_cast<size_t>(i)] =
              spec.mask[static_cast<size_t>(i)] ? T(1) / static_cast<T>(selected) : T(0);
        }
      }
      parts.loss = weighted_row_mean(tape, per_row, w);
      parts.loss_cos = static_cast<double>(parts.loss.item());
      break;
    }
    case TargetKind::kCoordinates: {
      parts.loss = detail::masked_coordinate_loss(tape, out, patches, spec.mask);
      parts.loss_cd = static_cast<double>(parts.loss.item());
      break;
    }
  }
  return parts;
}

// The default stage-II objective: masked cosine mimicry of teacher latent
// features.
template <typename T>
inline MpmParts<T> mpm_loss(TapeT<T>& tape, const StudentModelT<T>& student,
                            const DvaeModelT<T>& teacher, const CloudT<T>& cloud,
                            const MaskConfig& mask_cfg, Rng& rng, bool training = true) {
  return mpm_loss_generic(tape, student, teacher, cloud, mask_cfg,
                          TargetKind::kTeacherFeature, MetricKind::kCosine, rng, training);
}

// Coordinates reconstruction baseline plus lambda-weighted feature mimicry
// of the final encoder states at visible positions. lambda = 0 leaves the
// baseline untouched.
template <typename T>
inline MpmParts<T> aux_kd_loss(TapeT<T>& tape, const StudentModelT<T>& student,
                               const DvaeModelT<T>& teacher, const CloudT<T>& cloud,
                               const MaskConfig& mask_cfg, double lambda_kd, Rng& rng,
                               bool training = true) {
  if (lambda_kd < 0.0) throw ArgumentError("lambda_kd must be non-negative");
  if (student.cfg.target != TargetKind::kCoordinates || !student.cfg.aux_kd) {
    throw ConfigError("auxiliary distillation needs a coordinates student with kd head");
  }
  Rng fps_rng(rng.next_u64());
  auto patches =
      training ? make_patches(cloud, student.cfg.n_groups, student.cfg.group_k, &fps_rng)
               : make_patches_from(cloud, student.cfg.n_groups, student.cfg.group_k,
                                   canonical_start(cloud));
  auto spec = gen_mask(student.cfg.n_groups, mask_cfg.strategy, mask_cfg.ratio,
                       &patches.centroids, rng);

  auto enc = student.encode_visible(tape, patches, spec, training, &rng);
  auto dec_tokens = student.decode_full(tape, enc, spec, training, &rng);
  auto coords = student.project(tape, dec_tokens);

  MpmParts<T> parts;
  parts.n_masked = spec.popcount();
  parts.loss = detail::masked_coordinate_loss(tape, coords, patches, spec.mask);
  parts.loss_cd = static_cast<double>(parts.loss.item());
  if (lambda_kd > 0.0) {
    auto targets = detail::teacher_feature_targets(teacher, patches,
                                                   student.cfg.normalize_targets);
    const int64_t tw = targets.dim(1);
    std::vector<T> rows;
    rows.reserve(enc.visible_idx.size() * static_cast<size_t>(tw));
    for (int64_t i : enc.visible_idx) {
      for (int64_t j = 0; j < tw; ++j) {
        rows.push_back(targets.v()[static_cast<size_t>(i * tw + j)]);
      }
    }
    auto vis_targets =
        TensorT<T>::from({static_cast<int64_t>(enc.visible_idx.size()), tw}, rows);
    auto s_feats = student.project_kd(tape, enc.tokens);
    if (s_feats.dim(1) != vis_targets.dim(1)) {
      throw ShapeError("kd projection width does not match teacher width");
    }
    std::vector<uint8_t> all(static_cast<size_t>(enc.visible_idx.size()), 0);
    auto kd = tape.scale(cosine_mimic_loss(tape, s_feats, vis_targets, all),
                         static_cast<T>(lambda_kd));
    parts.loss_cos = static_cast<double>(kd.item());
    parts.loss = tape.add(parts.loss, kd);
  }
  return parts;
}

}  // namespace act
