#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "act/backbone.hpp"
#include "act/errors.hpp"
#include "act/foundation.hpp"
#include "act/geometry.hpp"
#include "act/losses.hpp"
#include "act/nn.hpp"
#include "act/param_store.hpp"
#include "act/rng.hpp"
#include "act/tensor.hpp"

namespace act {

// Log-linear temperature decay from tau_start to tau_end over decay_steps,
// clamped to tau_end afterwards. Endpoints are exact by construction.
struct GumbelSchedule {
  double tau_start = 1.0;
  double tau_end = 0.0625;
  int64_t decay_steps = 1;

  double at(int64_t step) const {
    if (step <= 0) return tau_start;
    if (step >= decay_steps) return tau_end;
    const double t = static_cast<double>(step) / static_cast<double>(decay_steps);
    return std::exp(std::log(tau_start) + t * (std::log(tau_end) - std::log(tau_start)));
  }
};

// Zero for zero_steps, then a linear ramp to beta_max across ramp_steps.
struct BetaSchedule {
  int64_t zero_steps = 0;
  int64_t ramp_steps = 1;
  double beta_max = 0.1;

  double at(int64_t step) const {
    if (step < zero_steps) return 0.0;
    if (step >= zero_steps + ramp_steps) return beta_max;
    return beta_max * static_cast<double>(step - zero_steps) /
           static_cast<double>(ramp_steps);
  }
};

// Reference schedule shape for a 150K-step run: temperature decays over the
// first 100K steps, the KL weight sleeps for 10K then ramps to 0.1 by the
// end. Desk-scale totals shrink every knot by the same ratio.
struct DvaeSchedules {
  GumbelSchedule tau;
  BetaSchedule beta;

  static DvaeSchedules for_total_steps(int64_t total) {
    if (total <= 0) throw ConfigError("schedule total must be positive");
    auto knot = [total](int64_t reference) {
      const double scaled =
          static_cast<double>(reference) * static_cast<double>(total) / 150000.0;
      return std::max<int64_t>(1, static_cast<int64_t>(std::llround(scaled)));
    };
    DvaeSchedules s;
    s.tau.decay_steps = knot(100000);
    s.beta.zero_steps = std::min(knot(10000), total);
    s.beta.ramp_steps = std::max<int64_t>(1, total - s.beta.zero_steps);
    return s;
  }
};

enum class TuningMode { kFrozenPrompt, kFrozenNoPrompt, kFullTune };

inline TuningMode parse_tuning_mode(const std::string& s) {
  if (s == "frozen-prompt") return TuningMode::kFrozenPrompt;
  if (s == "frozen-noprompt") return TuningMode::kFrozenNoPrompt;
  if (s == "full-tune") return TuningMode::kFullTune;
  throw ConfigError("unknown tuning mode: " + s);
}

inline const char* tuning_mode_name(TuningMode m) {
  switch (m) {
    case TuningMode::kFrozenPrompt: return "frozen-prompt";
    case TuningMode::kFrozenNoPrompt: return "frozen-noprompt";
    default: return "full-tune";
  }
}

struct DvaeConfig {
  int64_t width = 96;
  int64_t depth = 6;
  int64_t heads = 4;
  int64_t n_groups = 16;  // patches per cloud
  int64_t group_k = 16;   // points per patch
  int64_t token_k = 4;    // token graph degree for the refinement passes
  int64_t vocab = 512;
  int64_t grid = 4;  // folding grid side
  int64_t prompt_len = 16;
  PromptType prompt_type = PromptType::kDeep;
  PosMode pos_mode = PosMode::k3d;
  TuningMode tuning = TuningMode::kFrozenPrompt;
  double hard_sample_below_tau = 0.25;
};

// Relaxed categorical sample: softmax((logits + gumbel)/tau) per row, with
// optional straight-through hard one-hot output.
template <typename T>
inline TensorT<T> gumbel_softmax_sample(TapeT<T>& tape, TensorT<T> logits, double tau,
                                        Rng& rng, bool hard) {
  if (tau <= 0.0) throw ArgumentError("gumbel temperature must be positive");
  auto noise = TensorT<T>::zeros(logits.shape());
  for (auto& v : noise.v()) v = static_cast<T>(rng.gumbel());
  auto y = tape.softmax(
      tape.scale(tape.add(logits, noise), static_cast<T>(1.0 / tau)), logits.rank() - 1);
  return hard ? tape.straight_through_onehot(y) : y;
}

template <typename T>
struct TeacherEncodingT {
  TensorT<T> features;  // [N_s, C] stage-II distillation targets
  TensorT<T> logits;    // [N_s, V]
  TensorT<T> cls;       // [1, C]
  TensorT<T> pooled;    // [1, 2C]
};

// Stage-I model: a frozen (or tuned) transformer wrapped into a point-cloud
// autoencoder with a discrete tokenizer head and a folding decoder.
template <typename T>
struct DvaeModelT {
  DvaeConfig cfg;
  PatchEmbedT<T> embed;
  EdgeRefineT<T> pre_refine;
  PosEmbedT<T> pos;
  TransformerStackT<T> stack;
  PromptBankT<T> prompts;
  EdgeRefineT<T> post_refine;
  LinearT<T> tokenizer;
  TensorT<T> codebook;  // [V, C]
  Mlp2T<T> fold1;       // C+2 -> C -> 3
  Mlp2T<T> fold2;       // C+3 -> C -> 3
  Mlp2T<T> coarse;      // 2C -> 2C -> N_s*3
  std::vector<T> grid;  // G^2 x 2 folding grid, row-major

  static DvaeModelT create(ParamStoreT<T>& ps, const DvaeConfig& cfg, Rng& rng) {
    if (cfg.n_groups < 1 || cfg.group_k < 1 || cfg.vocab < 2 || cfg.grid < 2) {
      throw ConfigError("dvae dims out of range");
    }
    if (cfg.token_k > cfg.n_groups) {
      throw ConfigError("token graph degree exceeds patch count");
    }
    DvaeModelT m;
    m.cfg = cfg;
    m.embed = PatchEmbedT<T>::create(ps, "embed", cfg.width, rng);
    m.pre_refine = EdgeRefineT<T>::create(ps, "pre", cfg.width, rng);
    m.pos = PosEmbedT<T>::create(ps, "pos", cfg.width, cfg.pos_mode, rng);
    m.stack = TransformerStackT<T>::create(ps, "foundation", cfg.width, cfg.depth, cfg.heads,
                                           0.0, rng);
    const int64_t m_prompts =
        cfg.tuning == TuningMode::kFrozenNoPrompt ? 0 : cfg.prompt_len;
    m.prompts = PromptBankT<T>::create(ps, "prompts", cfg.depth, m_prompts, cfg.width,
                                       cfg.prompt_type, rng);
    m.post_refine = EdgeRefineT<T>::create(ps, "post", cfg.width, rng);
    m.tokenizer = LinearT<T>::create(ps, "tokenizer", cfg.width, cfg.vocab, rng);
    auto cb = TensorT<T>::zeros({cfg.vocab, cfg.width});
    fill_normal(cb, rng, 0.02);
    m.codebook = ps.add("codebook", cb);
    m.fold1 = Mlp2T<T>::create(ps, "decoder.fold1", cfg.width + 2, cfg.width, 3, rng);
    m.fold2 = Mlp2T<T>::create(ps, "decoder.fold2", cfg.width + 3, cfg.width, 3, rng);
    m.coarse = Mlp2T<T>::create(ps, "coarse", 2 * cfg.width, 2 * cfg.width,
                                cfg.n_groups * 3, rng);

    const int64_t g = cfg.grid;
    m.grid.reserve(static_cast<size_t>(g * g * 2));
    for (int64_t i = 0; i < g; ++i)
      for (int64_t j = 0; j < g; ++j) {
        m.grid.push_back(static_cast<T>(-1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(g - 1)));
        m.grid.push_back(static_cast<T>(-1.0 + 2.0 * static_cast<double>(j) / static_cast<double>(g - 1)));
      }
    return m;
  }

  // Applies the tuning mode's freeze pattern to the owning store.
  void apply_tuning(ParamStoreT<T>& ps) const {
    if (cfg.tuning == TuningMode::kFullTune) return;
    ps.freeze("foundation.*");
  }

  TeacherEncodingT<T> encode_on_patches(TapeT<T>& tape, const PatchSetT<T>& patches,
                                        bool training = false, Rng* rng = nullptr) const {
    auto tokens = embed.forward(tape, patches);
    auto graph = token_graph(patches.centroids, cfg.token_k);
    auto refined = pre_refine.forward(tape, tokens, graph);
    auto pos_t = pos.forward(tape, patches.centroids);
    auto hidden =
        stack.encode(tape, refined, pos_t, pos.cls_pos, &prompts, training, rng);
    TeacherEncodingT<T> out;
    out.cls = tape.slice(hidden, 0, 0, 1);
    auto token_states = tape.slice(hidden, 0, 1, cfg.n_groups);
    out.features = post_refine.forward(tape, token_states, graph);
    out.logits = tokenizer.forward(tape, out.features);
    auto pooledc = tape.max_over_axis(out.features, 0);
    out.pooled = tape.concat({out.cls, tape.reshape(pooledc, {1, cfg.width})}, 1);
    return out;
  }

  // Deterministic teacher path: canonical FPS start, no sampling. Stable
  // under input reordering for tie-free clouds.
  TeacherEncodingT<T> encode_teacher(TapeT<T>& tape, const CloudT<T>& cloud) const {
    return encode_on_patches(
        tape, make_patches_from(cloud, cfg.n_groups, cfg.group_k, canonical_start(cloud)));
  }

  // Folds the fixed grid around each code vector and translates by the
  // centroids: two MLP stages, the second refining the first's 3D output.
  TensorT<T> decode_fold(TapeT<T>& tape, TensorT<T> codes, const CloudT<T>& centroids) const {
    const int64_t g2 = cfg.grid * cfg.grid;
    const int64_t n = codes.dim(0);
    std::vector<int64_t> rep;
    rep.reserve(static_cast<size_t>(n * g2));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < g2; ++j) rep.push_back(i);
    auto codes_rep = tape.gather_rows(codes, rep);  // [n*g2, C]

    std::vector<T> grid_tiled;
    grid_tiled.reserve(static_cast<size_t>(n * g2 * 2));
    for (int64_t i = 0; i < n; ++i)
      grid_tiled.insert(grid_tiled.end(), grid.begin(), grid.end());
    auto grid_t = TensorT<T>::from({n * g2, 2}, grid_tiled);

    auto xyz1 = fold1.forward(tape, tape.concat({codes_rep, grid_t}, 1));
    auto xyz2 = fold2.forward(tape, tape.concat({codes_rep, xyz1}, 1));

    std::vector<T> cent_rep;
    cent_rep.reserve(static_cast<size_t>(n * g2 * 3));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < g2; ++j)
        for (int d = 0; d < 3; ++d) cent_rep.push_back(centroids[static_cast<size_t>(i)][static_cast<size_t>(d)]);
    return tape.add(xyz2, TensorT<T>::from({n * g2, 3}, cent_rep));
  }

  TensorT<T> coarse_points(TapeT<T>& tape, TensorT<T> pooled) const {
    return tape.reshape(coarse.forward(tape, pooled), {cfg.n_groups, 3});
  }
};

template <typename T>
struct DvaeLossParts {
  TensorT<T> loss;
  double cd_coarse = 0.0;
  double cd_fine = 0.0;
  double kl = 0.0;  // clamped metric value
};

// ELBO surrogate: coarse + fine chamfer reconstruction plus the weighted KL
// of the tokenizer posterior against the uniform prior. beta = 0 omits the
// KL term from the graph entirely.
template <typename T>
inline DvaeLossParts<T> dvae_loss(TapeT<T>& tape, const DvaeModelT<T>& model,
                                  const CloudT<T>& cloud, double tau, double beta, Rng& rng,
                                  bool training = true) {
  Rng fps_rng(rng.next_u64());
  auto patches =
      training ? make_patches(cloud, model.cfg.n_groups, model.cfg.group_k, &fps_rng)
               : make_patches_from(cloud, model.cfg.n_groups, model.cfg.group_k,
                                   canonical_start(cloud));
  auto enc = model.encode_on_patches(tape, patches, training, &rng);
  const bool hard = tau <= model.cfg.hard_sample_below_tau;
  auto y = gumbel_softmax_sample(tape, enc.logits, tau, rng, hard);
  auto codes = tape.matmul(y, model.codebook);
  auto fine = model.decode_fold(tape, codes, patches.centroids);
  auto coarse = model.coarse_points(tape, enc.pooled);

  DvaeLossParts<T> parts;
  auto cd_coarse = chamfer_l1_loss(tape, coarse, cloud);
  auto cd_fine = chamfer_l1_loss(tape, fine, cloud);
  parts.cd_coarse = static_cast<double>(cd_coarse.item());
  parts.cd_fine = static_cast<double>(cd_fine.item());
  parts.kl = kl_to_uniform_metric(enc.logits);
  // reconstruction counts once per patch, so the prior weight keeps its
  // reference-scale meaning; a plain mean lets beta*KL drown the codes and
  // the posterior collapses to uniform
  parts.loss = tape.scale(tape.add(cd_coarse, cd_fine), static_cast<T>(model.cfg.n_groups));
  if (beta != 0.0) {
    parts.loss = tape.add(
        parts.loss, tape.scale(kl_to_uniform_loss(tape, enc.logits), static_cast<T>(beta)));
  }
  return parts;
}

// Deterministic reconstruction for evaluation: argmax codes, no noise.
template <typename T>
inline CloudT<T> reconstruct(const DvaeModelT<T>& model, const CloudT<T>& cloud) {
  TapeT<T> tape;
  auto patches = make_patches_from(cloud, model.cfg.n_groups, model.cfg.group_k,
                                   canonical_start(cloud));
  auto enc = model.encode_on_patches(tape, patches);
  auto y = tape.straight_through_onehot(enc.logits);
  auto fine = model.decode_fold(tape, tape.matmul(y, model.codebook), patches.centroids);
  return detail::tensor_to_cloud(fine);
}

}  // namespace act
