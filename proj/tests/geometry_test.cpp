#include <algorithm>
#include <map>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "oracles.hpp"

namespace vop {
namespace {


TEST(ProjectPoint, OnAxis) {
  CameraModel cam;
  cam.intrinsics << 1, 0, 112, 0, 1, 112, 0, 0, 1;
  const auto px = project_point(Eigen::Vector3d(0, 0, 1), cam);
  ASSERT_TRUE(px);
  EXPECT_DOUBLE_EQ(px->x(), 112.0);
  EXPECT_DOUBLE_EQ(px->y(), 112.0);
  EXPECT_FALSE(project_point(Eigen::Vector3d(0, 0, -1), cam));
  EXPECT_FALSE(project_point(Eigen::Vector3d(1, 1, 0), cam));
}

TEST(ProjectPoint, MatchesHomogeneousPipeline) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  int visible = 0;
  for (int k = 0; k < 2000; ++k) {
    const auto cam = oracle::random_camera(rng);
    const Eigen::Vector3d X(u(rng), u(rng), u(rng) + 2.0);
    const auto a = project_point(X, cam);
    const auto b = oracle::homogeneous_project(X, cam);
    ASSERT_EQ(a.has_value(), b.has_value());
    if (a) {
      ++visible;
      EXPECT_LT((*a - *b).cwiseAbs().maxCoeff(), 1e-9 * std::max(1.0, b->cwiseAbs().maxCoeff()));
    }
  }
  EXPECT_GT(visible, 1000);
}

TEST(PatchOfPixel, Conventions) {
  PatchGrid grid;
  EXPECT_EQ(patch_of_pixel({0.0, 0.0}, grid), 0);
  EXPECT_EQ(patch_of_pixel({14.0, 0.0}, grid), 1);
  EXPECT_EQ(patch_of_pixel({13.999, 0.0}, grid), 0);
  EXPECT_EQ(patch_of_pixel({0.0, 14.0}, grid), 16);
  EXPECT_EQ(patch_of_pixel({223.9, 223.9}, grid), 255);
  EXPECT_FALSE(patch_of_pixel({-0.5, 10.0}, grid));
  EXPECT_FALSE(patch_of_pixel({224.0, 10.0}, grid));
  EXPECT_FALSE(patch_of_pixel({10.0, 224.0}, grid));
  EXPECT_FALSE(patch_of_pixel({std::nan(""), 10.0}, grid));
}

TEST(OverlapFromPoints, SinglePoint) {
  PatchGrid grid;
  CameraModel ci, cj;
  ci.intrinsics << 100, 0, 0, 0, 100, 0, 0, 0, 1;
  cj.intrinsics = ci.intrinsics;
  // Patch 5 of i is (row 0, col 5): pixel x in [70, 84).
  const Eigen::Vector3d X(0.75, 0.05, 1.0);
  cj.translation = Eigen::Vector3d(0.52 - 0.75, 0.0, 0.0);  // pixel x = 52 -> col 3
  const auto m = overlap_from_points({X}, ci, cj, grid);
  EXPECT_EQ(m.at(5, 3), 1u);
  EXPECT_EQ(m.total(), 1u);
  EXPECT_EQ(overlap_from_points({}, ci, cj, grid).total(), 0u);
}

TEST(OverlapFromPoints, MatchesBruteForceAndTransposes) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  PatchGrid grid;
  for (int scene = 0; scene < 50; ++scene) {
    const auto ci = oracle::random_camera(rng), cj = oracle::random_camera(rng);
    std::vector<Eigen::Vector3d> pts;
    for (int k = 0; k < 200; ++k) pts.emplace_back(u(rng), u(rng), u(rng) + 4.0);
    const auto m = overlap_from_points(pts, ci, cj, grid);
    EXPECT_TRUE(m == oracle::brute_force_overlap(pts, ci, cj, grid));
    EXPECT_TRUE(overlap_from_points(pts, cj, ci, grid) == m.transposed());
  }
}

std::pair<std::uint64_t, std::vector<PatchPair>> NaiveImageOverlap(const OverlapMatrix& m) {
  std::uint64_t score = 0;
  std::vector<PatchPair> corr;
  for (int p = 0; p < m.n_patches(); ++p) {
    std::uint32_t row_max = 0;
    for (int q = 0; q < m.n_patches(); ++q) row_max = std::max(row_max, m.at(p, q));
    if (row_max == 0) continue;
    for (int q = 0; q < m.n_patches(); ++q) {
      if (m.at(p, q) == row_max) {
        corr.emplace_back(p, q);
        score += row_max;
        break;
      }
    }
  }
  return {score, corr};
}

TEST(ImageOverlap, Definition) {
  OverlapMatrix zero(256);
  EXPECT_EQ(image_overlap(zero).first, 0u);
  EXPECT_TRUE(image_overlap(zero).second.empty());

  OverlapMatrix m(256);
  for (int k = 0; k < 3; ++k) m.increment(2, 4);
  m.increment(2, 6);
  const auto [score, corr] = image_overlap(m);
  EXPECT_EQ(score, 3u);
  ASSERT_EQ(corr.size(), 1u);
  EXPECT_EQ(corr[0], PatchPair(2, 4));

  OverlapMatrix tie(16);
  tie.increment(1, 9);
  tie.increment(1, 3);
  EXPECT_EQ(image_overlap(tie).second.front(), PatchPair(1, 3));
}

TEST(ImageOverlap, MatchesNaiveScan) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    OverlapMatrix m(64);
    const int entries = int(rng() % 300);
    for (int k = 0; k < entries; ++k) m.increment(int(rng() % 64), int(rng() % 64));
    EXPECT_EQ(image_overlap(m), NaiveImageOverlap(m));
  }
}

void ExpectOneToOne(const std::vector<PatchPair>& pairs) {
  std::set<int> ps, qs;
  for (const auto& [p, q] : pairs) {
    EXPECT_TRUE(ps.insert(p).second);
    EXPECT_TRUE(qs.insert(q).second);
  }
}

TEST(SupervisionDepth, IdenticalViewIsIdentity) {
  std::mt19937_64 rng(4);
  PatchGrid grid;
  for (int trial = 0; trial < 5; ++trial) {
    const auto cam = oracle::random_camera(rng);
    const auto depth = oracle::random_depth(rng, 224);
    const auto gt = build_supervision_depth("a", "a", depth, depth, cam, cam, grid);
    ASSERT_EQ(gt.positives.size(), 256u);
    for (int p = 0; p < 256; ++p) EXPECT_EQ(gt.positives[std::size_t(p)], PatchPair(p, p));
    EXPECT_DOUBLE_EQ(gt.overlap_fraction, 1.0);
  }
}

TEST(SupervisionDepth, OppositeCamerasHaveNoPositives) {
  std::mt19937_64 rng(5);
  PatchGrid grid;
  CameraModel ci, cj;
  ci.intrinsics << 200, 0, 112, 0, 200, 112, 0, 0, 1;
  cj = ci;
  cj.rotation = Eigen::AngleAxisd(M_PI, Eigen::Vector3d::UnitY()).toRotationMatrix();
  const auto depth = oracle::random_depth(rng, 224);
  const auto gt = build_supervision_depth("a", "b", depth, depth, ci, cj, grid);
  EXPECT_TRUE(gt.positives.empty());
  EXPECT_EQ(gt.overlap_fraction, 0.0);
}

TEST(SupervisionDepth, DimensionMismatch) {
  std::mt19937_64 rng(6);
  CameraModel cam;
  EXPECT_THROW(build_supervision_depth("a", "b", oracle::random_depth(rng, 224), oracle::random_depth(rng, 112),
                                       cam, cam, PatchGrid()),
               ValidationError);
}

TEST(SupervisionDepth, InvalidDepthNeverProducesLabels) {
  PatchGrid grid;
  CameraModel cam;
  cam.intrinsics << 200, 0, 112, 0, 200, 112, 0, 0, 1;
  std::vector<float> d(224 * 224, 5.0f);
  for (int y = 0; y < 28; ++y) {
    for (int x = 0; x < 224; ++x) d[std::size_t(y) * 224 + std::size_t(x)] = 0.0f;
  }
  const DepthMap depth(224, 224, d);
  const auto gt = build_supervision_depth("a", "b", depth, depth, cam, cam, grid);
  EXPECT_EQ(gt.positives.size(), 256u - 32u);
  for (const auto& [p, q] : gt.positives) EXPECT_GE(p, 32);
}

// Plane z = D seen by two cameras maps pixels by the closed-form homography
// H = K_j (R_rel + t_rel n^T / d) K_i^-1; counts from H must give the same
// positives as the depth path.
std::vector<PatchPair> HomographyPositives(const CameraModel& ci, const CameraModel& cj,
                                           double wall_depth, const PatchGrid& grid) {
  const auto homography = [&](const CameraModel& a, const CameraModel& b) {
    const Eigen::Matrix3d r_rel = b.rotation * a.rotation.transpose();
    const Eigen::Vector3d t_rel = b.translation - r_rel * a.translation;
    const Eigen::Vector3d n = a.rotation * Eigen::Vector3d::UnitZ();
    const double d = wall_depth + n.dot(a.translation);
    return Eigen::Matrix3d(b.intrinsics * (r_rel + t_rel * n.transpose() / d) *
                           a.intrinsics.inverse());
  };
  const auto counts = [&](const Eigen::Matrix3d& H) {
    OverlapMatrix m(grid.n_patches());
    for (int v = 0; v < grid.image_side(); v += 4) {
      for (int u = 0; u < grid.image_side(); u += 4) {
        const Eigen::Vector3d h = H * Eigen::Vector3d(u + 0.5, v + 0.5, 1.0);
        const auto p = oracle::naive_patch({u + 0.5, v + 0.5}, grid.image_side(), grid.patch_side());
        const auto q = oracle::naive_patch({h.x() / h.z(), h.y() / h.z()}, grid.image_side(), grid.patch_side());
        if (p && q) m.increment(*p, *q);
      }
    }
    return m;
  };
  const auto argmax = [&](const OverlapMatrix& m) {
    std::map<int, int> best;
    for (const auto& [p, q] : NaiveImageOverlap(m).second) best[p] = q;
    return best;
  };
  const auto fwd = argmax(counts(homography(ci, cj)));
  const auto bwd = argmax(counts(homography(cj, ci)));
  std::vector<PatchPair> out;
  for (const auto& [p, q] : fwd) {
    auto it = bwd.find(q);
    if (it != bwd.end() && it->second == p) out.emplace_back(p, q);
  }
  return out;
}

TEST(SupervisionDepth, PlaneMatchesHomography) {
  synthetic::WallSceneOptions opts;
  opts.cameras_x = 3;
  opts.cameras_y = 2;
  opts.dim = 4;
  opts.max_tilt_deg = 8.0;
  opts.seed = 7;
  const auto scene = synthetic::make_wall_scene(opts);
  int compared = 0;
  for (std::size_t a = 0; a < scene.cameras.size(); ++a) {
    for (std::size_t b = a + 1; b < scene.cameras.size(); ++b) {
      const auto gt = build_supervision_depth("a", "b", scene.depths[a], scene.depths[b],
                                              scene.cameras[a], scene.cameras[b], opts.grid);
      const auto oracle = HomographyPositives(scene.cameras[a], scene.cameras[b],
                                              opts.wall_depth, opts.grid);
      EXPECT_EQ(gt.positives, oracle) << a << "," << b;
      ExpectOneToOne(gt.positives);
      compared += gt.positives.empty() ? 0 : 1;
    }
  }
  EXPECT_GT(compared, 5);
}

TEST(SupervisionDepth, PositivesHaveCounts) {
  synthetic::WallSceneOptions opts;
  opts.cameras_x = 3;
  opts.cameras_y = 1;
  opts.dim = 4;
  opts.seed = 8;
  const auto scene = synthetic::make_wall_scene(opts);
  const auto m = depth_correspondence_overlap(scene.depths[0], scene.depths[1], scene.cameras[0],
                                              scene.cameras[1], opts.grid);
  const auto gt = build_supervision_depth("a", "b", scene.depths[0], scene.depths[1],
                                          scene.cameras[0], scene.cameras[1], opts.grid);
  ASSERT_FALSE(gt.positives.empty());
  std::set<int> rows;
  for (const auto& [p, q] : gt.positives) {
    EXPECT_GE(m.at(p, q), 1u);
    rows.insert(p);
  }
  EXPECT_DOUBLE_EQ(gt.overlap_fraction, double(rows.size()) / 256.0);
  EXPECT_EQ(gt.image_overlap, image_overlap(m).first);
}

TEST(SupervisionMatches, StrictlyMoreThanMinCount) {
  PatchGrid grid;
  const auto center = [&](int p) {
    const auto [r, c] = grid.row_col(p);
    return Eigen::Vector2d(c * 14 + 7, r * 14 + 7);
  };
  std::vector<std::pair<Eigen::Vector2d, Eigen::Vector2d>> six(6, {center(3), center(7)});
  const auto gt = build_supervision_matches(six, grid);
  ASSERT_EQ(gt.positives.size(), 1u);
  EXPECT_EQ(gt.positives[0], PatchPair(3, 7));
  EXPECT_DOUBLE_EQ(gt.overlap_fraction, 1.0 / 256.0);

  std::vector<std::pair<Eigen::Vector2d, Eigen::Vector2d>> five(5, {center(3), center(7)});
  EXPECT_TRUE(build_supervision_matches(five, grid).positives.empty());
}

TEST(SupervisionMatches, MatchesHistogramOracle) {
  PatchGrid grid(56, 14);  // 4 x 4 patches
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.0, 55.999);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::pair<Eigen::Vector2d, Eigen::Vector2d>> corr;
    const int n = int(rng() % 400);
    for (int k = 0; k < n; ++k) corr.push_back({{u(rng), u(rng)}, {u(rng), u(rng)}});
    int hist[16][16] = {};
    for (const auto& [a, b] : corr) {
      ++hist[int(a.y() / 14) * 4 + int(a.x() / 14)][int(b.y() / 14) * 4 + int(b.x() / 14)];
    }
    std::map<int, int> fwd, bwd;
    for (int p = 0; p < 16; ++p) {
      int best = -1, count = 5;
      for (int q = 0; q < 16; ++q) {
        if (hist[p][q] > count) {
          count = hist[p][q];
          best = q;
        }
      }
      if (best >= 0) fwd[p] = best;
    }
    for (int q = 0; q < 16; ++q) {
      int best = -1, count = 5;
      for (int p = 0; p < 16; ++p) {
        if (hist[p][q] > count) {
          count = hist[p][q];
          best = p;
        }
      }
      if (best >= 0) bwd[q] = best;
    }
    std::vector<PatchPair> oracle;
    for (const auto& [p, q] : fwd) {
      if (bwd.count(q) && bwd[q] == p) oracle.emplace_back(p, q);
    }
    const auto gt = build_supervision_matches(corr, grid);
    EXPECT_EQ(gt.positives, oracle);
    ExpectOneToOne(gt.positives);
  }
}

TEST(SampleNegatives, DistinctAndDisjoint) {
  GtMatchSet gt;
  gt.n_patches = 16;
  for (int p = 0; p < 16; ++p) gt.positives.emplace_back(p, (p + 3) % 16);
  sample_negatives(gt, 50, 1);
  EXPECT_EQ(gt.negatives.size(), 50u);
  std::set<PatchPair> pos(gt.positives.begin(), gt.positives.end());
  std::set<PatchPair> neg(gt.negatives.begin(), gt.negatives.end());
  EXPECT_EQ(neg.size(), 50u);
  for (const auto& pq : neg) EXPECT_EQ(pos.count(pq), 0u);
  auto again = gt;
  sample_negatives(again, 50, 1);
  EXPECT_EQ(again.negatives, gt.negatives);
  sample_negatives(gt, 1000, 1);
  EXPECT_EQ(gt.negatives.size(), 256u - 16u);
}

}  // namespace
}  // namespace vop
