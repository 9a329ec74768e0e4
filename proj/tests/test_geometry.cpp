#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "act/geometry.hpp"
#include "geometry_oracles.hpp"

using act::CloudT;
using act::Point3;
using act::Rng;
using DCloud = CloudT<double>;

TEST(Chamfer, KnownValues) {
  DCloud a{{0, 0, 0}};
  DCloud b{{1, 0, 0}};
  EXPECT_DOUBLE_EQ(act::chamfer_l1(a, b), 2.0);
  EXPECT_DOUBLE_EQ(act::chamfer_l2(a, b), 2.0);
  EXPECT_DOUBLE_EQ(act::chamfer_l1(a, a), 0.0);

  DCloud c{{0, 0, 0}, {2, 0, 0}};
  DCloud d{{1, 0, 0}};
  // forward mean 1, backward min dist 1 -> total 2
  EXPECT_DOUBLE_EQ(act::chamfer_l1(c, d), 2.0);
  EXPECT_DOUBLE_EQ(act::chamfer_l2(c, d), 2.0);
  EXPECT_THROW(act::chamfer_l1(DCloud{}, a), act::ArgumentError);
}

TEST(FScore, KnownValuesAndDefaults) {
  DCloud a{{0, 0, 0}, {1, 0, 0}};
  EXPECT_DOUBLE_EQ(act::f_score(a, a, 0.1), 1.0);
  DCloud far{{10, 0, 0}, {11, 0, 0}};
  EXPECT_DOUBLE_EQ(act::f_score(a, far, 0.1), 0.0);

  // half the prediction hits, all of gt covered
  DCloud pred{{0, 0, 0}, {5, 0, 0}};
  DCloud gt{{0, 0, 0}};
  const double p = 0.5, r = 1.0;
  EXPECT_NEAR(act::f_score(pred, gt, 0.01), 2 * p * r / (p + r), 1e-12);

  // default threshold is 1% of the reference diagonal
  DCloud gt2{{0, 0, 0}, {1, 1, 1}};
  const double tau = 0.01 * std::sqrt(3.0);
  DCloud pred2{{tau * 0.99, 0, 0}, {1, 1, 1}};
  EXPECT_NEAR(act::f_score(pred2, gt2), 1.0, 1e-12);
  DCloud pred3{{tau * 1.01, 0, 0}, {1, 1, 1}};
  EXPECT_LT(act::f_score(pred3, gt2), 1.0);
}

TEST(Fps, LineEndpointsAndDeterminism) {
  DCloud line;
  for (int i = 0; i < 10; ++i) line.push_back({static_cast<double>(i), 0, 0});
  auto picks = act::fps(line, 3);
  EXPECT_EQ(picks[0], 0);
  EXPECT_EQ(picks[1], 9);
  EXPECT_EQ(picks[2], 4);  // argmax of min-dist, lowest index on tie (4 vs 5)

  Rng r1(7), r2(7);
  EXPECT_EQ(act::fps(line, 4, &r1), act::fps(line, 4, &r2));
  EXPECT_THROW(act::fps(line, 0), act::ArgumentError);
  EXPECT_THROW(act::fps(line, 11), act::ArgumentError);
}

TEST(Knn, TieBreaksByIndexAndIncludesSelf) {
  DCloud pts{{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}};
  auto nn = act::knn(pts, DCloud{{0, 0, 0}}, 3);
  ASSERT_EQ(nn.size(), 1u);
  EXPECT_EQ(nn[0], (std::vector<int64_t>{0, 1, 2}));
  EXPECT_THROW(act::knn(pts, pts, 0), act::ArgumentError);
  EXPECT_THROW(act::knn(pts, pts, 5), act::ArgumentError);
}

TEST(Patches, RelativeCoordsAndSelfFirst) {
  Rng rng(11);
  DCloud pts = act_test::random_cloud(rng, 32, 16);
  auto ps = act::make_patches(pts, 4, 5);
  ASSERT_EQ(ps.centroids.size(), 4u);
  for (int64_t g = 0; g < 4; ++g) {
    EXPECT_EQ(ps.neighbor_idx[static_cast<size_t>(g)][0], ps.centroid_idx[static_cast<size_t>(g)]);
    for (int d = 0; d < 3; ++d)
      EXPECT_DOUBLE_EQ(ps.rel[static_cast<size_t>(g * 5 * 3 + d)], 0.0);
    for (int64_t j = 0; j < 5; ++j) {
      const auto& p = pts[static_cast<size_t>(ps.neighbor_idx[static_cast<size_t>(g)][static_cast<size_t>(j)])];
      const auto& c = ps.centroids[static_cast<size_t>(g)];
      for (int d = 0; d < 3; ++d)
        EXPECT_DOUBLE_EQ(ps.rel[static_cast<size_t>((g * 5 + j) * 3 + d)], p[d] - c[d]);
    }
  }
}

TEST(Shapes, AllKindsDeterministicAndBounded) {
  for (int k = 0; k < act::kNumShapeKinds; ++k) {
    Rng r1(100 + static_cast<uint64_t>(k)), r2(100 + static_cast<uint64_t>(k));
    auto a = act::gen_shape<double>(static_cast<act::ShapeKind>(k), 128, r1);
    auto b = act::gen_shape<double>(static_cast<act::ShapeKind>(k), 128, r2);
    ASSERT_EQ(a.size(), 128u);
    EXPECT_EQ(a, b);
    for (const auto& p : a) {
      EXPECT_LT(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]), 1.8);
    }
  }
  // kinds are mutually distinguishable at the chamfer level
  Rng rs(1);
  auto sphere = act::gen_shape<double>(act::ShapeKind::kSphere, 256, rs);
  auto plane = act::gen_shape<double>(act::ShapeKind::kPlane, 256, rs);
  EXPECT_GT(act::chamfer_l1(sphere, plane), 0.3);
}

TEST(Augment, RotationPreservesDistances) {
  Rng rng(3);
  const auto R = act::random_rotation<double>(rng, act::RotationMode::kFull);
  // orthonormal with unit determinant
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double dot = 0;
      for (int k = 0; k < 3; ++k) dot += R[static_cast<size_t>(k)][static_cast<size_t>(i)] * R[static_cast<size_t>(k)][static_cast<size_t>(j)];
      EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
    }
  const double det =
      R[0][0] * (R[1][1] * R[2][2] - R[1][2] * R[2][1]) -
      R[0][1] * (R[1][0] * R[2][2] - R[1][2] * R[2][0]) +
      R[0][2] * (R[1][0] * R[2][1] - R[1][1] * R[2][0]);
  EXPECT_NEAR(det, 1.0, 1e-12);

  act::AugmentOptions opt;
  opt.scale_lo = opt.scale_hi = 1.0;
  opt.translate = 0.0;
  Rng arng(5);
  DCloud pts = act_test::random_cloud(arng, 20, 10);
  Rng arng2(6);
  auto rotated = act::augment(pts, arng2, opt);
  for (size_t i = 0; i + 1 < pts.size(); ++i) {
    EXPECT_NEAR(act_test::odist(pts[i], pts[i + 1]),
                act_test::odist(rotated[i], rotated[i + 1]), 1e-9);
  }
}

TEST(Augment, ZOnlyKeepsZAxisAndScaleBounds) {
  act::AugmentOptions opt;
  opt.rotation = act::RotationMode::kZOnly;
  opt.translate = 0.0;
  DCloud pts{{0.5, 0.25, 0.8}, {-0.3, 0.1, -0.4}};
  for (uint64_t s = 0; s < 20; ++s) {
    Rng rng(s);
    auto out = act::augment(pts, rng, opt);
    for (size_t i = 0; i < pts.size(); ++i) {
      const double ratio = out[i][2] / pts[i][2];
      EXPECT_GE(ratio, 0.8 - 1e-9);
      EXPECT_LE(ratio, 1.25 + 1e-9);
    }
  }
}

TEST(FScore, ThresholdValidationAndMonotonicity) {
  DCloud a{{0, 0, 0}, {0.5, 0, 0}};
  DCloud b{{0.1, 0, 0}, {0.9, 0, 0}};
  EXPECT_THROW(act::f_score(a, b, 0.0), act::ArgumentError);
  EXPECT_THROW(act::f_score(a, b, -0.5), act::ArgumentError);
  double prev = 0.0;
  for (double tau = 0.05; tau < 1.2; tau += 0.05) {
    const double f = act::f_score(a, b, tau);
    EXPECT_GE(f, prev - 1e-12);
    prev = f;
  }
  EXPECT_DOUBLE_EQ(prev, 1.0);
}

TEST(Shapes, NormalizeContract) {
  Rng rng(21);
  auto sphere = act::gen_shape<double>(act::ShapeKind::kSphere, 128, rng);
  for (const auto& p : sphere) {
    EXPECT_NEAR(std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]), 1.0, 1e-6);
  }
  auto cube = act::gen_shape<double>(act::ShapeKind::kCube, 64, rng, false);
  for (const auto& p : cube) {
    const double m = std::max({std::fabs(p[0]), std::fabs(p[1]), std::fabs(p[2])});
    EXPECT_NEAR(m, 1.0, 1e-6);
  }
  auto helix = act::gen_shape<double>(act::ShapeKind::kHelix, 100, rng);
  act::Point3<double> c{0, 0, 0};
  double maxn = 0.0;
  for (const auto& p : helix) {
    for (int d = 0; d < 3; ++d) c[d] += p[d] / static_cast<double>(helix.size());
    maxn = std::max(maxn, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  EXPECT_NEAR(c[0], 0.0, 1e-9);
  EXPECT_NEAR(c[1], 0.0, 1e-9);
  EXPECT_NEAR(c[2], 0.0, 1e-9);
  EXPECT_NEAR(maxn, 1.0, 1e-9);
  EXPECT_THROW(act::gen_shape<double>(act::ShapeKind::kCube, 7, rng), act::ArgumentError);
}

TEST(Fps, DiameterPairFromEndpoint) {
  for (uint64_t s = 0; s < 30; ++s) {
    Rng rng(s);
    auto pts = act_test::random_cloud(rng, 16, 2);
    // brute-force diameter
    double best = -1.0;
    int64_t bi = 0, bj = 0;
    for (size_t i = 0; i < pts.size(); ++i)
      for (size_t j = i + 1; j < pts.size(); ++j) {
        const double d = act_test::odist(pts[i], pts[j]);
        if (d > best) {
          best = d;
          bi = static_cast<int64_t>(i);
          bj = static_cast<int64_t>(j);
        }
      }
    if (pts.size() < 2) continue;
    auto picks = act::fps_from(pts, 2, bi);
    const double got = act_test::odist(pts[static_cast<size_t>(picks[0])],
                                       pts[static_cast<size_t>(picks[1])]);
    EXPECT_NEAR(got, best, 1e-12) << "seed " << s << " picked " << picks[1] << " vs " << bj;
  }
}

TEST(Patches, ReconstructSourcePoints) {
  Rng rng(17);
  DCloud pts = act_test::random_cloud(rng, 48, 24);
  auto ps = act::make_patches(pts, 6, 8);
  double diam = 0.0;
  for (size_t i = 0; i < pts.size(); ++i)
    for (size_t j = i + 1; j < pts.size(); ++j)
      diam = std::max(diam, act_test::odist(pts[i], pts[j]));
  for (int64_t g = 0; g < ps.n_groups; ++g)
    for (int64_t j = 0; j < ps.k; ++j) {
      const auto& src = pts[static_cast<size_t>(ps.neighbor_idx[static_cast<size_t>(g)][static_cast<size_t>(j)])];
      double relnorm = 0.0;
      for (int d = 0; d < 3; ++d) {
        const double v = ps.rel[static_cast<size_t>((g * ps.k + j) * 3 + d)] +
                         ps.centroids[static_cast<size_t>(g)][static_cast<size_t>(d)];
        EXPECT_DOUBLE_EQ(v, src[static_cast<size_t>(d)]);
        relnorm += ps.rel[static_cast<size_t>((g * ps.k + j) * 3 + d)] *
                   ps.rel[static_cast<size_t>((g * ps.k + j) * 3 + d)];
      }
      EXPECT_LE(std::sqrt(relnorm), diam + 1e-12);
    }
}

TEST(GeometryOracles, RandomizedSweep) {
  auto st = act_test::run_geometry_oracle_suite(60, 64, 1e-9);
  EXPECT_EQ(st.failures, 0) << "worst abs err " << st.worst_abs;
}
