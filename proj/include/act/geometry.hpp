#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <tuple>
#include <vector>

#include "act/errors.hpp"
#include "act/rng.hpp"

namespace act {

template <typename T>
using Point3 = std::array<T, 3>;

template <typename T>
using CloudT = std::vector<Point3<T>>;

using Cloud = CloudT<float>;

template <typename T>
inline T dist2(const Point3<T>& a, const Point3<T>& b) {
  const T dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

template <typename T>
inline T bbox_diag(const CloudT<T>& pts) {
  if (pts.empty()) throw ArgumentError("bbox_diag of empty cloud");
  Point3<T> lo = pts[0], hi = pts[0];
  for (const auto& p : pts)
    for (int d = 0; d < 3; ++d) {
      lo[d] = std::min(lo[d], p[d]);
      hi[d] = std::max(hi[d], p[d]);
    }
  return std::sqrt(dist2(lo, hi));
}

// Recenters on the centroid and rescales so the farthest point sits on the
// unit sphere.
template <typename T>
inline void normalize(CloudT<T>& pts) {
  if (pts.empty()) throw ArgumentError("normalize of empty cloud");
  Point3<T> c{0, 0, 0};
  for (const auto& p : pts)
    for (int d = 0; d < 3; ++d) c[d] += p[d];
  for (int d = 0; d < 3; ++d) c[d] /= static_cast<T>(pts.size());
  T max2 = T(0);
  for (auto& p : pts) {
    for (int d = 0; d < 3; ++d) p[d] -= c[d];
    max2 = std::max(max2, p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
  }
  if (max2 > T(0)) {
    const T inv = T(1) / std::sqrt(max2);
    for (auto& p : pts)
      for (int d = 0; d < 3; ++d) p[d] *= inv;
  }
}

// Farthest point sampling, greedy max-min from an explicit first pick.
// Distance ties resolve to the lowest index.
template <typename T>
inline std::vector<int64_t> fps_from(const CloudT<T>& pts, int64_t m, int64_t first) {
  const int64_t n = static_cast<int64_t>(pts.size());
  if (m <= 0 || m > n) {
    throw ArgumentError("fps: cannot pick " + std::to_string(m) + " of " +
                        std::to_string(n) + " points");
  }
  if (first < 0 || first >= n) throw ArgumentError("fps: start index out of range");
  std::vector<int64_t> picks;
  picks.reserve(static_cast<size_t>(m));
  picks.push_back(first);
  std::vector<T> best(static_cast<size_t>(n), std::numeric_limits<T>::max());
  for (int64_t step = 1; step < m; ++step) {
    const Point3<T>& last = pts[static_cast<size_t>(picks.back())];
    int64_t far_i = 0;
    T far_d = -std::numeric_limits<T>::max();
    for (int64_t i = 0; i < n; ++i) {
      const T d = std::min(best[static_cast<size_t>(i)], dist2(pts[static_cast<size_t>(i)], last));
      best[static_cast<size_t>(i)] = d;
      if (d > far_d) {
        far_d = d;
        far_i = i;
      }
    }
    picks.push_back(far_i);
  }
  return picks;
}

// Default seed rule: index 0 without an rng, uniform start with one.
template <typename T>
inline std::vector<int64_t> fps(const CloudT<T>& pts, int64_t m, Rng* rng = nullptr) {
  int64_t first = 0;
  if (rng) {
    if (pts.empty()) throw ArgumentError("fps of empty cloud");
    first = static_cast<int64_t>(rng->below(static_cast<uint64_t>(pts.size())));
  }
  return fps_from(pts, m, first);
}

// Permutation-stable seed rule: the lexicographically smallest coordinate
// triple. Reordering a duplicate-free cloud never changes the chosen point.
template <typename T>
inline int64_t canonical_start(const CloudT<T>& pts) {
  if (pts.empty()) throw ArgumentError("canonical start of empty cloud");
  int64_t best = 0;
  for (int64_t i = 1; i < static_cast<int64_t>(pts.size()); ++i) {
    const Point3<T>& a = pts[static_cast<size_t>(i)];
    const Point3<T>& b = pts[static_cast<size_t>(best)];
    if (std::tie(a[0], a[1], a[2]) < std::tie(b[0], b[1], b[2])) best = i;
  }
  return best;
}

// k nearest neighbors of each query among pts, self included when the query
// coincides with a stored point. Ordered by (distance, index) ascending.
template <typename T>
inline std::vector<std::vector<int64_t>> knn(const CloudT<T>& pts, const CloudT<T>& queries,
                                             int64_t k) {
  const int64_t n = static_cast<int64_t>(pts.size());
  if (k <= 0 || k > n) {
    throw ArgumentError("knn: k " + std::to_string(k) + " outside [1," + std::to_string(n) +
                        "]");
  }
  std::vector<std::vector<int64_t>> out(queries.size());
  std::vector<std::pair<T, int64_t>> d(static_cast<size_t>(n));
  for (size_t q = 0; q < queries.size(); ++q) {
    for (int64_t i = 0; i < n; ++i)
      d[static_cast<size_t>(i)] = {dist2(queries[q], pts[static_cast<size_t>(i)]), i};
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    out[q].resize(static_cast<size_t>(k));
    for (int64_t j = 0; j < k; ++j) out[q][static_cast<size_t>(j)] = d[static_cast<size_t>(j)].second;
  }
  return out;
}

// Symmetric chamfer with plain euclidean distances: the two directional
// means are summed, so identical singleton clouds one unit apart score 2.
// Each directional mean accumulates its nearest distances in sorted order,
// making the metric bit-exactly invariant to point order on either side.
template <typename T>
inline T chamfer_l1(const CloudT<T>& a, const CloudT<T>& b) {
  if (a.empty() || b.empty()) throw ArgumentError("chamfer of empty cloud");
  auto dir = [](const CloudT<T>& from, const CloudT<T>& to) {
    std::vector<T> dists;
    dists.reserve(from.size());
    for (const auto& p : from) {
      T best = std::numeric_limits<T>::max();
      for (const auto& q : to) best = std::min(best, dist2(p, q));
      dists.push_back(std::sqrt(best));
    }
    std::sort(dists.begin(), dists.end());
    T acc = T(0);
    for (T d : dists) acc += d;
    return acc / static_cast<T>(from.size());
  };
  return dir(a, b) + dir(b, a);
}

template <typename T>
inline T chamfer_l2(const CloudT<T>& a, const CloudT<T>& b) {
  if (a.empty() || b.empty()) throw ArgumentError("chamfer of empty cloud");
  auto dir = [](const CloudT<T>& from, const CloudT<T>& to) {
    std::vector<T> dists;
    dists.reserve(from.size());
    for (const auto& p : from) {
      T best = std::numeric_limits<T>::max();
      for (const auto& q : to) best = std::min(best, dist2(p, q));
      dists.push_back(best);
    }
    std::sort(dists.begin(), dists.end());
    T acc = T(0);
    for (T d : dists) acc += d;
    return acc / static_cast<T>(from.size());
  };
  return dir(a, b) + dir(b, a);
}

// Conventional default threshold: 1% of the reference bounding-box diagonal.
template <typename T>
inline T default_f_score_tau(const CloudT<T>& gt) {
  return static_cast<T>(0.01) * bbox_diag(gt);
}

// Harmonic mean of precision and recall at threshold tau.
template <typename T>
inline T f_score(const CloudT<T>& pred, const CloudT<T>& gt, T tau) {
  if (pred.empty() || gt.empty()) throw ArgumentError("f_score of empty cloud");
  if (tau <= T(0)) throw ArgumentError("f_score threshold must be positive");
  const T tau2 = tau * tau;
  auto frac_within = [tau2](const CloudT<T>& from, const CloudT<T>& to) {
    int64_t hit = 0;
    for (const auto& p : from) {
      T best = std::numeric_limits<T>::max();
      for (const auto& q : to) best = std::min(best, dist2(p, q));
      if (best <= tau2) ++hit;
    }
    return static_cast<T>(hit) / static_cast<T>(from.size());
  };
  const T precision = frac_within(pred, gt);
  const T recall = frac_within(gt, pred);
  if (precision + recall == T(0)) return T(0);
  return T(2) * precision * recall / (precision + recall);
}

template <typename T>
inline T f_score(const CloudT<T>& pred, const CloudT<T>& gt) {
  return f_score(pred, gt, default_f_score_tau(gt));
}

// ---- patch grouping ----

template <typename T>
struct PatchSetT {
  std::vector<int64_t> centroid_idx;               // [n_groups]
  CloudT<T> centroids;                             // [n_groups]
  std::vector<std::vector<int64_t>> neighbor_idx;  // [n_groups][k]
  std::vector<T> rel;                              // n_groups*k*3, centroid-relative
  int64_t n_groups = 0;
  int64_t k = 0;
};

using PatchSet = PatchSetT<float>;

namespace detail {

template <typename T>
inline PatchSetT<T> build_patches(const CloudT<T>& pts, int64_t n_groups, int64_t k,
                                  std::vector<int64_t> centroid_idx) {
  PatchSetT<T> ps;
  ps.n_groups = n_groups;
  ps.k = k;
  ps.centroid_idx = std::move(centroid_idx);
  ps.centroids.reserve(static_cast<size_t>(n_groups));
  for (int64_t i : ps.centroid_idx) ps.centroids.push_back(pts[static_cast<size_t>(i)]);
  ps.neighbor_idx = knn(pts, ps.centroids, k);
  ps.rel.resize(static_cast<size_t>(n_groups * k * 3));
  for (int64_t g = 0; g < n_groups; ++g) {
    const Point3<T>& c = ps.centroids[static_cast<size_t>(g)];
    for (int64_t j = 0; j < k; ++j) {
      const Point3<T>& p = pts[static_cast<size_t>(ps.neighbor_idx[static_cast<size_t>(g)][static_cast<size_t>(j)])];
      for (int d = 0; d < 3; ++d)
        ps.rel[static_cast<size_t>((g * k + j) * 3 + d)] = p[d] - c[d];
    }
  }
  return ps;
}

}  // namespace detail

template <typename T>
inline PatchSetT<T> make_patches(const CloudT<T>& pts, int64_t n_groups, int64_t k,
                                 Rng* rng = nullptr) {
  return detail::build_patches(pts, n_groups, k, fps(pts, n_groups, rng));
}

// Patches seeded from an explicit start index; combined with canonical_start
// this gives a grouping that is stable under input reordering.
template <typename T>
inline PatchSetT<T> make_patches_from(const CloudT<T>& pts, int64_t n_groups, int64_t k,
                                      int64_t first) {
  return detail::build_patches(pts, n_groups, k, fps_from(pts, n_groups, first));
}

// ---- procedural shapes ----

enum class ShapeKind : int {
  kSphere = 0,
  kCube = 1,
  kTorus = 2,
  kCylinder = 3,
  kCone = 4,
  kPyramid = 5,
  kPlane = 6,
  kHelix = 7,
};

constexpr int kNumShapeKinds = 8;

inline const char* shape_kind_name(ShapeKind k) {
  switch (k) {
    case ShapeKind::kSphere: return "sphere";
    case ShapeKind::kCube: return "cube";
    case ShapeKind::kTorus: return "torus";
    case ShapeKind::kCylinder: return "cylinder";
    case ShapeKind::kCone: return "cone";
    case ShapeKind::kPyramid: return "pyramid";
    case ShapeKind::kPlane: return "plane";
    case ShapeKind::kHelix: return "helix";
  }
  throw ArgumentError("unknown shape kind");
}

namespace detail {

template <typename T>
inline Point3<T> sample_triangle(const Point3<T>& a, const Point3<T>& b, const Point3<T>& c,
                                 Rng& rng) {
  T u = static_cast<T>(rng.uniform());
  T v = static_cast<T>(rng.uniform());
  if (u + v > T(1)) {
    u = T(1) - u;
    v = T(1) - v;
  }
  Point3<T> p;
  for (int d = 0; d < 3; ++d) p[d] = a[d] + u * (b[d] - a[d]) + v * (c[d] - a[d]);
  return p;
}

}  // namespace detail

// Canonical shape surfaces sampled with n points, normalized to the unit
// sphere unless asked otherwise. Deterministic given the rng state.
template <typename T>
inline CloudT<T> gen_shape(ShapeKind kind, int64_t n, Rng& rng, bool normalized = true) {
  if (n < 8) throw ArgumentError("gen_shape: need at least 8 points");
  CloudT<T> pts;
  pts.reserve(static_cast<size_t>(n));
  const T pi = std::numbers::pi_v<T>;
  switch (kind) {
    case ShapeKind::kSphere: {
      // antipodal pairs keep the centroid pinned at the origin
      for (int64_t i = 0; i < n; i += 2) {
        T x = static_cast<T>(rng.normal()), y = static_cast<T>(rng.normal()),
          z = static_cast<T>(rng.normal());
        T r = std::sqrt(x * x + y * y + z * z);
        if (r < T(1e-9)) {
          x = T(1);
          r = T(1);
        }
        pts.push_back({x / r, y / r, z / r});
        if (i + 1 < n) pts.push_back({-x / r, -y / r, -z / r});
      }
      break;
    }
    case ShapeKind::kCube: {
      for (int64_t i = 0; i < n; ++i) {
        const int face = static_cast<int>(rng.below(6));
        const T u = static_cast<T>(rng.uniform(-1.0, 1.0));
        const T v = static_cast<T>(rng.uniform(-1.0, 1.0));
        const T s = face % 2 == 0 ? T(-1) : T(1);
        switch (face / 2) {
          case 0: pts.push_back({s, u, v}); break;
          case 1: pts.push_back({u, s, v}); break;
          default: pts.push_back({u, v, s}); break;
        }
      }
      break;
    }
    case ShapeKind::kTorus: {
      const T R = T(0.75), r = T(0.3);
      for (int64_t i = 0; i < n; ++i) {
        const T u = static_cast<T>(rng.uniform(0.0, 2.0 * std::numbers::pi));
        T v;
        // area-uniform minor angle via rejection
        for (;;) {
          v = static_cast<T>(rng.uniform(0.0, 2.0 * std::numbers::pi));
          const T accept = (R + r * std::cos(v)) / (R + r);
          if (static_cast<T>(rng.uniform()) <= accept) break;
        }
        pts.push_back({(R + r * std::cos(v)) * std::cos(u),
                       (R + r * std::cos(v)) * std::sin(u), r * std::sin(v)});
      }
      break;
    }
    case ShapeKind::kCylinder: {
      const T rad = T(0.6), h = T(1.0);
      const T side_area = 2 * pi * rad * (2 * h);
      const T cap_area = pi * rad * rad;
      const T total = side_area + 2 * cap_area;
      for (int64_t i = 0; i < n; ++i) {
        const T pick = static_cast<T>(rng.uniform()) * total;
        const T ang = static_cast<T>(rng.uniform(0.0, 2.0 * std::numbers::pi));
        if (pick < side_area) {
          const T z = static_cast<T>(rng.uniform(-1.0, 1.0)) * h;
          pts.push_back({rad * std::cos(ang), rad * std::sin(ang), z});
        } else {
          const T rr = rad * std::sqrt(static_cast<T>(rng.uniform()));
          const T z = pick < side_area + cap_area ? -h : h;
          pts.push_back({rr * std::cos(ang), rr * std::sin(ang), z});
        }
      }
      break;
    }
    case ShapeKind::kCone: {
      const T rad = T(0.8), zb = T(-0.7), zt = T(0.8);
      const T slant = std::sqrt(rad * rad + (zt - zb) * (zt - zb));
      const T side_area = pi * rad * slant;
      const T base_area = pi * rad * rad;
      for (int64_t i = 0; i < n; ++i) {
        const T pick = static_cast<T>(rng.uniform()) * (side_area + base_area);
        const T ang = static_cast<T>(rng.uniform(0.0, 2.0 * std::numbers::pi));
        if (pick < side_area) {
          const T t = std::sqrt(static_cast<T>(rng.uniform()));  // area-uniform along slant
          const T rr = rad * t;
          const T z = zt + (zb - zt) * t;
          pts.push_back({rr * std::cos(ang), rr * std::sin(ang), z});
        } else {
          const T rr = rad * std::sqrt(static_cast<T>(rng.uniform()));
          pts.push_back({rr * std::cos(ang), rr * std::sin(ang), zb});
        }
      }
      break;
    }
    case ShapeKind::kPyramid: {
      const T half = T(0.8), zb = T(-0.6), zt = T(0.9);
      const Point3<T> apex{0, 0, zt};
      const Point3<T> c0{-half, -half, zb}, c1{half, -half, zb}, c2{half, half, zb},
          c3{-half, half, zb};
      const T slant_h = std::sqrt((zt - zb) * (zt - zb) + half * half);
      const T face_area = half * slant_h;  // half base (2*half) times height, halved
      const T base_area = 4 * half * half;
      const T total = 4 * face_area + base_area;
      const std::array<std::array<Point3<T>, 2>, 4> edges{{{c0, c1}, {c1, c2}, {c2, c3}, {c3, c0}}};
      for (int64_t i = 0; i < n; ++i) {
        const T pick = static_cast<T>(rng.uniform()) * total;
        if (pick < 4 * face_area) {
          const int f = std::min<int>(3, static_cast<int>(pick / face_area));
          pts.push_back(detail::sample_triangle(edges[static_cast<size_t>(f)][0],
                                                edges[static_cast<size_t>(f)][1], apex, rng));
        } else {
          pts.push_back({static_cast<T>(rng.uniform(-1.0, 1.0)) * half,
                         static_cast<T>(rng.uniform(-1.0, 1.0)) * half, zb});
        }
      }
      break;
    }
    case ShapeKind::kPlane: {
      for (int64_t i = 0; i < n; ++i) {
        pts.push_back({static_cast<T>(rng.uniform(-1.0, 1.0)),
                       static_cast<T>(rng.uniform(-1.0, 1.0)), T(0)});
      }
      break;
    }
    case ShapeKind::kHelix: {
      const T rad = T(0.7), turns = T(2.5), tube = T(0.04);
      for (int64_t i = 0; i < n; ++i) {
        const T t = static_cast<T>(rng.uniform());
        const T ang = turns * 2 * pi * t;
        pts.push_back({rad * std::cos(ang) + tube * static_cast<T>(rng.normal()),
                       rad * std::sin(ang) + tube * static_cast<T>(rng.normal()),
                       T(2) * t - T(1) + tube * static_cast<T>(rng.normal())});
      }
      break;
    }
    default:
      throw ArgumentError("unknown shape kind");
  }
  if (normalized) normalize(pts);
  return pts;
}

// ---- augmentation ----

enum class RotationMode { kNone, kZOnly, kFull };

struct AugmentOptions {
  RotationMode rotation = RotationMode::kFull;
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double translate = 0.1;
  double stretch = 0.0;  // per-axis anisotropic scale in [1-stretch, 1+stretch]
  double jitter = 0.0;   // per-point gaussian noise stddev
};

template <typename T>
inline std::array<std::array<T, 3>, 3> rotation_from_quaternion(T w, T x, T y, T z) {
  const T n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
           {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
           {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

template <typename T>
inline std::array<std::array<T, 3>, 3> random_rotation(Rng& rng, RotationMode mode) {
  switch (mode) {
    case RotationMode::kNone:
      return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    case RotationMode::kZOnly: {
      const T a = static_cast<T>(rng.uniform(0.0, 2.0 * std::numbers::pi));
      const T c = std::cos(a), s = std::sin(a);
      return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
    }
    case RotationMode::kFull: {
      const T w = static_cast<T>(rng.normal()), x = static_cast<T>(rng.normal()),
              y = static_cast<T>(rng.normal()), z = static_cast<T>(rng.normal());
      return rotation_from_quaternion(w, x, y, z);
    }
  }
  throw ArgumentError("unknown rotation mode");
}

// Applies stretch about the canonical axes, then rotation, isotropic scale,
// translation, and jitter, drawing rng values in that fixed order.
template <typename T>
inline CloudT<T> augment(const CloudT<T>& pts, Rng& rng, const AugmentOptions& opt) {
  std::array<T, 3> stretch{1, 1, 1};
  if (opt.stretch > 0.0) {
    for (int d = 0; d < 3; ++d)
      stretch[static_cast<size_t>(d)] =
          static_cast<T>(rng.uniform(1.0 - opt.stretch, 1.0 + opt.stretch));
  }
  const auto rot = random_rotation<T>(rng, opt.rotation);
  const T scale = static_cast<T>(rng.uniform(opt.scale_lo, opt.scale_hi));
  std::array<T, 3> shift{0, 0, 0};
  for (int d = 0; d < 3; ++d)
    shift[static_cast<size_t>(d)] = static_cast<T>(rng.uniform(-opt.translate, opt.translate));
  CloudT<T> out;
  out.reserve(pts.size());
  for (const auto& p : pts) {
    Point3<T> s{p[0] * stretch[0], p[1] * stretch[1], p[2] * stretch[2]};
    Point3<T> q;
    for (int r = 0; r < 3; ++r)
      q[static_cast<size_t>(r)] = rot[static_cast<size_t>(r)][0] * s[0] +
                                  rot[static_cast<size_t>(r)][1] * s[1] +
                                  rot[static_cast<size_t>(r)][2] * s[2];
    for (int d = 0; d < 3; ++d) q[static_cast<size_t>(d)] = q[static_cast<size_t>(d)] * scale + shift[static_cast<size_t>(d)];
    if (opt.jitter > 0.0) {
      for (int d = 0; d < 3; ++d)
        q[static_cast<size_t>(d)] += static_cast<T>(opt.jitter * rng.normal());
    }
    out.push_back(q);
  }
  return out;
}

}  // namespace act
