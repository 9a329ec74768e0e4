#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "act/dataset.hpp"
#include "act/distill.hpp"
#include "act/errors.hpp"
#include "act/losses.hpp"
#include "act/nn.hpp"
#include "act/optim.hpp"

namespace act {

enum class ProbeKind { kFull, kMlpLinear, kMlp3 };

inline ProbeKind parse_probe_kind(const std::string& s) {
  if (s == "full") return ProbeKind::kFull;
  if (s == "mlp-linear") return ProbeKind::kMlpLinear;
  if (s == "mlp-3") return ProbeKind::kMlp3;
  throw ConfigError("unknown probe protocol: " + s);
}

inline const char* probe_kind_name(ProbeKind k) {
  switch (k) {
    case ProbeKind::kFull: return "full";
    case ProbeKind::kMlpLinear: return "mlp-linear";
    default: return "mlp-3";
  }
}

struct ProbeProtocol {
  ProbeKind kind = ProbeKind::kMlpLinear;
  int64_t epochs = 40;
  int64_t batch = 16;
  double lr = 1e-2;
  int64_t classes = 8;
  double dropout = 0.5;  // deep head only
};

// Global classification feature: CLS concatenated with the max-pool over
// patch tokens from an all-visible encoder pass.
template <typename T>
inline TensorT<T> student_global_feature(TapeT<T>& tape, const StudentModelT<T>& student,
                                         const CloudT<T>& cloud) {
  auto patches = make_patches_from(cloud, student.cfg.n_groups, student.cfg.group_k,
                                   canonical_start(cloud));
  MaskSpec none;
  none.mask.assign(static_cast<size_t>(student.cfg.n_groups), 0);
  auto enc = student.encode_visible(tape, patches, none);
  auto cls = tape.slice(enc.hidden, 0, 0, 1);
  auto pooled = tape.max_over_axis(enc.tokens, 0);
  return tape.concat({cls, tape.reshape(pooled, {1, student.cfg.width})}, 1);
}

// Classification head. The linear protocol is a single projection; the deep
// protocol stacks three linears with dropout between them. The full protocol
// uses the deep head and additionally unfreezes the backbone.
template <typename T>
struct ProbeHeadT {
  ProbeKind kind = ProbeKind::kMlpLinear;
  double dropout = 0.5;
  LinearT<T> lin;             // feat -> classes
  LinearT<T> fc1, fc2, fc3;   // feat -> 256 -> 128 -> classes

  static ProbeHeadT create(ParamStoreT<T>& ps, ProbeKind kind, int64_t feat_dim,
                           int64_t classes, double dropout, Rng& rng) {
    if (feat_dim < 1 || classes < 2) throw ConfigError("probe head dims out of range");
    ProbeHeadT h;
    h.kind = kind;
    h.dropout = dropout;
    if (kind == ProbeKind::kMlpLinear) {
      h.lin = LinearT<T>::create(ps, "probe.lin", feat_dim, classes, rng);
    } else {
      h.fc1 = LinearT<T>::create(ps, "probe.fc1", feat_dim, 256, rng);
      h.fc2 = LinearT<T>::create(ps, "probe.fc2", 256, 128, rng);
      h.fc3 = LinearT<T>::create(ps, "probe.fc3", 128, classes, rng);
    }
    return h;
  }

  TensorT<T> forward(TapeT<T>& tape, TensorT<T> feats, bool training, Rng* rng) const {
    if (kind == ProbeKind::kMlpLinear) return lin.forward(tape, feats);
    auto h1 = tape.gelu(fc1.forward(tape, feats));
    if (training) h1 = tape.dropout(h1, dropout, *rng, true);
    auto h2 = tape.gelu(fc2.forward(tape, h1));
    if (training) h2 = tape.dropout(h2, dropout, *rng, true);
    return fc3.forward(tape, h2);
  }
};

struct ProbeResult {
  double accuracy = 0.0;
  double loss_first = 0.0;
  double loss_last = 0.0;
};

namespace detail {

// Frozen-backbone features computed once per sample, packed as a constant.
template <typename T>
inline TensorT<T> cache_features(const StudentModelT<T>& student,
                                 const LoadedDatasetT<T>& ds) {
  const int64_t c2 = 2 * student.cfg.width;
  auto out = TensorT<T>::zeros({ds.size(), c2});
  for (int64_t i = 0; i < ds.size(); ++i) {
    TapeT<T> tape;
    auto f = student_global_feature(tape, student, ds.clouds[static_cast<size_t>(i)]);
    for (int64_t j = 0; j < c2; ++j) {
      out.v()[static_cast<size_t>(i * c2 + j)] = f.v()[static_cast<size_t>(j)];
    }
  }
  return out;
}

inline std::vector<int64_t> shuffled_indices(int64_t n, Rng& rng) {
  std::vector<int64_t> idx(static_cast<size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

}  // namespace detail

// Trains the protocol's head (and, for the full protocol, the backbone) on
// the train split and reports accuracy on the test split.
template <typename T>
inline ProbeResult run_probe(ParamStoreT<T>& student_ps, const StudentModelT<T>& student,
                             const LoadedDatasetT<T>& train, const LoadedDatasetT<T>& test,
                             const ProbeProtocol& proto, uint64_t seed) {
  for (int64_t l : train.labels) {
    if (l < 0 || l >= proto.classes) {
      throw IoError("dataset label " + std::to_string(l) + " outside the configured " +
                    std::to_string(proto.classes) + " classes");
    }
  }
  Rng head_rng = derive_rng(seed, {0x9e0bu});
  ParamStoreT<T> head_ps;
  auto head = ProbeHeadT<T>::create(head_ps, proto.kind, 2 * student.cfg.width,
                                    proto.classes, proto.dropout, head_rng);

  typename AdamWT<T>::Options opt;
  opt.lr = proto.lr;
  opt.weight_decay = 0.0;
  AdamWT<T> head_adam(head_ps, opt);

  const bool frozen = proto.kind != ProbeKind::kFull;
  std::unique_ptr<AdamWT<T>> backbone_adam;
  if (!frozen) {
    typename AdamWT<T>::Options bopt;
    bopt.lr = proto.lr * 0.1;  // gentler on the pretrained trunk
    bopt.weight_decay = 5e-2;
    backbone_adam = std::make_unique<AdamWT<T>>(student_ps, bopt);
  }

  TensorT<T> train_feats, test_feats;
  if (frozen) {
    train_feats = detail::cache_features(student, train);
    test_feats = detail::cache_features(student, test);
  }

  Rng loop_rng = derive_rng(seed, {0x10adu});
  const int64_t n = train.size();
  ProbeResult res;
  bool first_logged = false;
  for (int64_t epoch = 0; epoch < proto.epochs; ++epoch) {
    auto order = detail::shuffled_indices(n, loop_rng);
    for (int64_t at = 0; at < n; at += proto.batch) {
      const int64_t take = std::min(proto.batch, n - at);
      std::vector<int64_t> pick(order.begin() + at, order.begin() + at + take);
      std::vector<int64_t> labels;
      labels.reserve(pick.size());
      for (int64_t p : pick) labels.push_back(train.labels[static_cast<size_t>(p)]);

      TapeT<T> tape;
      TensorT<T> feats;
      if (frozen) {
        feats = tape.gather_rows(train_feats, pick);
      } else {
        std::vector<TensorT<T>> rows;
        rows.reserve(pick.size());
        for (int64_t p : pick) {
          rows.push_back(
              student_global_feature(tape, student, train.clouds[static_cast<size_t>(p)]));
        }
        feats = tape.concat(rows, 0);
      }
      auto logits = head.forward(tape, feats, true, &loop_rng);
      auto loss = tape.mean_all(cross_entropy_rows(tape, logits, labels));
      if (!first_logged) {
        res.loss_first = static_cast<double>(loss.item());
        first_logged = true;
      }
      res.loss_last = static_cast<double>(loss.item());

      head_ps.zero_grad();
      if (!frozen) student_ps.zero_grad();
      tape.backward(loss);
      head_adam.step();
      if (backbone_adam) backbone_adam->step();
    }
  }

  int64_t correct = 0;
  for (int64_t i = 0; i < test.size(); ++i) {
    TapeT<T> tape;
    TensorT<T> feats;
    if (frozen) {
      feats = tape.gather_rows(test_feats, {i});
    } else {
      feats = student_global_feature(tape, student, test.clouds[static_cast<size_t>(i)]);
    }
    auto logits = head.forward(tape, feats, false, nullptr);
    int64_t arg = 0;
    for (int64_t j = 1; j < proto.classes; ++j) {
      if (logits.v()[static_cast<size_t>(j)] > logits.v()[static_cast<size_t>(arg)]) arg = j;
    }
    if (arg == test.labels[static_cast<size_t>(i)]) ++correct;
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
  return res;
}

}  // namespace act
