#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "act/errors.hpp"
#include "act/geometry.hpp"
#include "act/tensor.hpp"

namespace act {

namespace detail {

template <typename T>
inline CloudT<T> tensor_to_cloud(const TensorT<T>& t) {
  if (t.rank() != 2 || t.dim(1) != 3) {
    throw ShapeError("expected an [N,3] tensor, got " + shape_str(t.shape()));
  }
  CloudT<T> out(static_cast<size_t>(t.dim(0)));
  for (int64_t i = 0; i < t.dim(0); ++i)
    for (int d = 0; d < 3; ++d)
      out[static_cast<size_t>(i)][static_cast<size_t>(d)] = t.v()[static_cast<size_t>(i * 3 + d)];
  return out;
}

template <typename T>
inline TensorT<T> cloud_to_tensor(const CloudT<T>& c) {
  std::vector<T> flat;
  flat.reserve(c.size() * 3);
  for (const auto& p : c) {
    flat.push_back(p[0]);
    flat.push_back(p[1]);
    flat.push_back(p[2]);
  }
  return TensorT<T>::from({static_cast<int64_t>(c.size()), 3}, flat);
}

// Mean euclidean row norm of pred minus a constant row-aligned target.
template <typename T>
inline TensorT<T> mean_row_distance(TapeT<T>& tape, TensorT<T> pred, TensorT<T> target,
                                    bool squared) {
  auto diff = tape.sub(pred, target);
  auto d2 = tape.sum_over_axis(tape.mul(diff, diff), 1);
  if (squared) return tape.mean_all(d2);
  return tape.mean_all(tape.sqrt(tape.add_scalar(d2, static_cast<T>(1e-12))));
}

}  // namespace detail

// Differentiable symmetric chamfer between a predicted [M,3] tensor and a
// fixed reference cloud. Nearest-neighbor assignments are computed from the
// current forward values and held fixed, which reproduces the exact chamfer
// subgradient away from assignment ties.
template <typename T>
inline TensorT<T> chamfer_loss(TapeT<T>& tape, TensorT<T> pred, const CloudT<T>& gt,
                               bool squared) {
  const auto pred_cloud = detail::tensor_to_cloud(pred);
  if (gt.empty()) throw ArgumentError("chamfer against empty cloud");
  const int64_t m = static_cast<int64_t>(pred_cloud.size());
  const int64_t n = static_cast<int64_t>(gt.size());

  CloudT<T> fwd_target(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    T best = std::numeric_limits<T>::max();
    int64_t bj = 0;
    for (int64_t j = 0; j < n; ++j) {
      const T d = dist2(pred_cloud[static_cast<size_t>(i)], gt[static_cast<size_t>(j)]);
      if (d < best) {
        best = d;
        bj = j;
      }
    }
    fwd_target[static_cast<size_t>(i)] = gt[static_cast<size_t>(bj)];
  }
  std::vector<int64_t> bwd_pick(static_cast<size_t>(n));
  std::vector<T> bwd_d2(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) {
    T best = std::numeric_limits<T>::max();
    int64_t bi = 0;
    for (int64_t i = 0; i < m; ++i) {
      const T d = dist2(gt[static_cast<size_t>(j)], pred_cloud[static_cast<size_t>(i)]);
      if (d < best) {
        best = d;
        bi = i;
      }
    }
    bwd_pick[static_cast<size_t>(j)] = bi;
    bwd_d2[static_cast<size_t>(j)] = best;
  }

  // The reference direction accumulates in sorted-distance order so the loss
  // value never depends on how the reference points happen to be ordered.
  std::vector<int64_t> order(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j) order[static_cast<size_t>(j)] = j;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const T da = bwd_d2[static_cast<size_t>(a)], db = bwd_d2[static_cast<size_t>(b)];
    if (da != db) return da < db;
    return a < b;
  });
  CloudT<T> gt_sorted(static_cast<size_t>(n));
  std::vector<int64_t> pick_sorted(static_cast<size_t>(n));
  for (int64_t r = 0; r < n; ++r) {
    gt_sorted[static_cast<size_t>(r)] = gt[static_cast<size_t>(order[static_cast<size_t>(r)])];
    pick_sorted[static_cast<size_t>(r)] = bwd_pick[static_cast<size_t>(order[static_cast<size_t>(r)])];
  }

  auto fwd = detail::mean_row_distance(tape, pred, detail::cloud_to_tensor(fwd_target), squared);
  auto bwd = detail::mean_row_distance(tape, tape.gather_rows(pred, pick_sorted),
                                       detail::cloud_to_tensor(gt_sorted), squared);
  return tape.add(fwd, bwd);
}

template <typename T>
inline TensorT<T> chamfer_l1_loss(TapeT<T>& tape, TensorT<T> pred, const CloudT<T>& gt) {
  return chamfer_loss(tape, pred, gt, false);
}

template <typename T>
inline TensorT<T> chamfer_l2_loss(TapeT<T>& tape, TensorT<T> pred, const CloudT<T>& gt) {
  return chamfer_loss(tape, pred, gt, true);
}

// weights are fixed non-negative row weights summing to 1.
template <typename T>
inline TensorT<T> weighted_row_mean(TapeT<T>& tape, TensorT<T> rows,
                                    const std::vector<T>& weights) {
  if (rows.rank() != 1 || rows.dim(0) != static_cast<int64_t>(weights.size())) {
    throw ShapeError("weighted_row_mean: weight count mismatch");
  }
  auto w = TensorT<T>::from({rows.dim(0)}, weights);
  return tape.sum_all(tape.mul(rows, w));
}

// Masked feature-mimicry objective: mean over selected rows of
// 1 - cos(s_row, t_row). An empty selection averages over all rows.
template <typename T>
inline TensorT<T> cosine_mimic_loss(TapeT<T>& tape, TensorT<T> student, TensorT<T> targets,
                                    const std::vector<uint8_t>& mask) {
  const int64_t n = student.dim(0);
  if (static_cast<int64_t>(mask.size()) != n) {
    throw ShapeError("cosine_mimic_loss: mask length mismatch");
  }
  int64_t selected = 0;
  for (uint8_t m : mask) selected += m ? 1 : 0;
  std::vector<T> w(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    if (selected == 0) {
      w[static_cast<size_t>(i)] = T(1) / static_cast<T>(n);
    } else {
      w[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)] ? T(1) / static_cast<T>(selected) : T(0);
    }
  }
  auto cos = tape.cosine_rows(student, targets);
  auto one_minus = tape.sub(TensorT<T>::filled({n}, T(1)), cos);
  return weighted_row_mean(tape, one_minus, w);
}

// Per-row cross entropy of logits against integer labels.
template <typename T>
inline TensorT<T> cross_entropy_rows(TapeT<T>& tape, TensorT<T> logits,
                                     const std::vector<int64_t>& labels) {
  const int64_t n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n) {
    throw ShapeError("cross_entropy_rows: label count mismatch");
  }
  auto onehot = TensorT<T>::zeros({n, v});
  for (int64_t i = 0; i < n; ++i) {
    const int64_t l = labels[static_cast<size_t>(i)];
    if (l < 0 || l >= v) throw ArgumentError("label out of range");
    onehot.v()[static_cast<size_t>(i * v + l)] = T(1);
  }
  auto lp = tape.log_softmax(logits, 1);
  return tape.scale(tape.sum_over_axis(tape.mul(lp, onehot), 1), T(-1));
}

// Mean over tokens of KL(softmax(logits_row) || uniform) = log V - H(row),
// as a differentiable tape value.
template <typename T>
inline TensorT<T> kl_to_uniform_loss(TapeT<T>& tape, TensorT<T> logits) {
  const int64_t v = logits.dim(1);
  auto p = tape.softmax(logits, 1);
  auto lp = tape.log_softmax(logits, 1);
  auto neg_ent = tape.sum_over_axis(tape.mul(p, lp), 1);  // [N]
  return tape.add_scalar(tape.mean_all(neg_ent), static_cast<T>(std::log(static_cast<double>(v))));
}

// Metric-side KL, clamped into its closed-form range [0, log V].
template <typename T>
inline double kl_to_uniform_metric(const TensorT<T>& logits) {
  const int64_t n = logits.dim(0), v = logits.dim(1);
  const double logv = std::log(static_cast<double>(v));
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::max();
    for (int64_t j = 0; j < v; ++j)
      mx = std::max(mx, static_cast<double>(logits.v()[static_cast<size_t>(i * v + j)]));
    double z = 0.0;
    for (int64_t j = 0; j < v; ++j)
      z += std::exp(static_cast<double>(logits.v()[static_cast<size_t>(i * v + j)]) - mx);
    const double lz = std::log(z) + mx;
    double neg_ent = 0.0;
    for (int64_t j = 0; j < v; ++j) {
      const double lpij = static_cast<double>(logits.v()[static_cast<size_t>(i * v + j)]) - lz;
      neg_ent += std::exp(lpij) * lpij;
    }
    acc += logv + neg_ent;
  }
  return std::clamp(acc / static_cast<double>(n), 0.0, logv);
}

// Row-wise normalization without affine parameters, used to stabilize
// distillation targets. Plain value transform, no gradient involvement.
template <typename T>
inline TensorT<T> layer_norm_values(const TensorT<T>& x, T eps = static_cast<T>(1e-5)) {
  const int64_t n = x.dim(0), c = x.dim(1);
  auto out = TensorT<T>::zeros(x.shape());
  for (int64_t r = 0; r < n; ++r) {
    double mean = 0;
    for (int64_t j = 0; j < c; ++j) mean += static_cast<double>(x.v()[static_cast<size_t>(r * c + j)]);
    mean /= static_cast<double>(c);
    double var = 0;
    for (int64_t j = 0; j < c; ++j) {
      const double d = static_cast<double>(x.v()[static_cast<size_t>(r * c + j)]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(var + static_cast<double>(eps));
    for (int64_t j = 0; j < c; ++j) {
      out.v()[static_cast<size_t>(r * c + j)] =
          static_cast<T>((static_cast<double>(x.v()[static_cast<size_t>(r * c + j)]) - mean) * istd);
    }
  }
  return out;
}

}  // namespace act
