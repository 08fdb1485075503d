#pragma once

// Ground-truth patch overlaps and patch match labels from posed cameras with
// 3D points or depth maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vop/core_types.hpp"

namespace vop {

using PatchPair = std::pair<int, int>;

// Dense n_patches x n_patches co-visibility counts; entry (p, q) is the number
// of points seen in patch p of image i and patch q of image j.
class OverlapMatrix {
 public:
  OverlapMatrix() = default;
  explicit OverlapMatrix(int n_patches, std::string image_i = {},
                         std::string image_j = {})
      : n_(n_patches),
        counts_(std::size_t(n_patches) * std::size_t(n_patches), 0),
        image_i_(std::move(image_i)),
        image_j_(std::move(image_j)) {}

  int n_patches() const { return n_; }
  std::uint32_t at(int p, int q) const { return counts_[index(p, q)]; }
  void increment(int p, int q) { ++counts_[index(p, q)]; }
  const std::string& image_i() const { return image_i_; }
  const std::string& image_j() const { return image_j_; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  OverlapMatrix transposed() const {
    OverlapMatrix t(n_, image_j_, image_i_);
    for (int p = 0; p < n_; ++p) {
      for (int q = 0; q < n_; ++q) t.counts_[t.index(q, p)] = at(p, q);
    }
    return t;
  }

  friend bool operator==(const OverlapMatrix& a, const OverlapMatrix& b) {
    return a.n_ == b.n_ && a.counts_ == b.counts_;
  }

 private:
  std::size_t index(int p, int q) const {
    return std::size_t(p) * std::size_t(n_) + std::size_t(q);
  }

  int n_ = 0;
  std::vector<std::uint32_t> counts_;
  std::string image_i_;
  std::string image_j_;
};

// Patch-level supervision for an ordered image pair. Positives are one-to-one.
struct GtMatchSet {
  std::string image_i;
  std::string image_j;
  int n_patches = 0;
  std::vector<PatchPair> positives;
  std::vector<PatchPair> negatives;  // sampled subset, informational
  double overlap_fraction = 0.0;
  // Eq.-3-style image overlap of the pair when known (sum of matched counts).
  std::uint64_t image_overlap = 0;
};

struct DepthSupervisionOptions {
  int stride = 4;                  // dense sampling step in pixels
  double max_reprojection_px = 2.0;
  double max_relative_depth = 0.05;
};

inline std::optional<Eigen::Vector2d> project_point(const Eigen::Vector3d& X,
                                                    const CameraModel& cam) {
  const Eigen::Vector3d xc = cam.rotation * X + cam.translation;
  if (!(xc.z() > 0.0)) return std::nullopt;
  const Eigen::Vector3d h = cam.intrinsics * xc;
  return Eigen::Vector2d(h.x() / h.z(), h.y() / h.z());
}

// Left/top patch edges are inclusive, right/bottom exclusive.
inline std::optional<int> patch_of_pixel(const Eigen::Vector2d& px,
                                         const PatchGrid& grid) {
  const double side = grid.image_side();
  if (!(px.x() >= 0.0 && px.y() >= 0.0 && px.x() < side && px.y() < side)) {
    return std::nullopt;
  }
  const int col = std::min(int(px.x()) / grid.patch_side(), grid.rows_cols() - 1);
  const int row = std::min(int(px.y()) / grid.patch_side(), grid.rows_cols() - 1);
  return grid.patch_index(row, col);
}

inline OverlapMatrix overlap_from_points(const std::vector<Eigen::Vector3d>& points,
                                         const CameraModel& cam_i,
                                         const CameraModel& cam_j,
                                         const PatchGrid& grid) {
  OverlapMatrix m(grid.n_patches());
  for (const auto& X : points) {
    const auto pi = project_point(X, cam_i);
    if (!pi) continue;
    const auto p = patch_of_pixel(*pi, grid);
    if (!p) continue;
    const auto pj = project_point(X, cam_j);
    if (!pj) continue;
    const auto q = patch_of_pixel(*pj, grid);
    if (!q) continue;
    m.increment(*p, *q);
  }
  return m;
}

// Eq. 3: each row p is matched to its arg-max column (lowest q on ties);
// rows without any co-visible point are left out.
inline std::pair<std::uint64_t, std::vector<PatchPair>> image_overlap(
    const OverlapMatrix& m) {
  std::uint64_t score = 0;
  std::vector<PatchPair> corr;
  for (int p = 0; p < m.n_patches(); ++p) {
    int best = -1;
    std::uint32_t best_count = 0;
    for (int q = 0; q < m.n_patches(); ++q) {
      if (m.at(p, q) > best_count) {
        best_count = m.at(p, q);
        best = q;
      }
    }
    if (best >= 0) {
      corr.emplace_back(p, best);
      score += best_count;
    }
  }
  return {score, corr};
}

namespace detail {

// Lifts pixel (x, y) at camera-frame depth z to world coordinates.
inline Eigen::Vector3d unproject(const Eigen::Vector2d& px, double z,
                                 const CameraModel& cam) {
  Eigen::Vector3d ray = cam.intrinsics.inverse() * Eigen::Vector3d(px.x(), px.y(), 1.0);
  ray *= z / ray.z();
  return cam.rotation.transpose() * (ray - cam.translation);
}

inline void check_depth_dims(const DepthMap& d, const PatchGrid& grid,
                             const char* which) {
  if (d.width() != grid.image_side() || d.height() != grid.image_side()) {
    throw ValidationError(std::string("depth map ") + which + " is " +
                          std::to_string(d.width()) + "x" +
                          std::to_string(d.height()) + ", grid expects " +
                          std::to_string(grid.image_side()) + "^2");
  }
}

// For every row keeps the column with the most votes (lowest index on ties).
inline std::vector<PatchPair> row_argmax_pairs(const OverlapMatrix& m,
                                               std::uint32_t min_count) {
  std::vector<PatchPair> out;
  for (int p = 0; p < m.n_patches(); ++p) {
    int best = -1;
    std::uint32_t best_count = 0;
    for (int q = 0; q < m.n_patches(); ++q) {
      const auto c = m.at(p, q);
      if (c >= min_count && c > best_count) {
        best_count = c;
        best = q;
      }
    }
    if (best >= 0) out.emplace_back(p, best);
  }
  return out;
}

// Keeps forward pairs (p, q) whose reverse assignment maps q back to p.
inline std::vector<PatchPair> mutual_pairs(const std::vector<PatchPair>& forward,
                                           const std::vector<PatchPair>& backward,
                                           int n_patches) {
  std::vector<int> back(std::size_t(n_patches), -1);
  for (const auto& [q, p] : backward) back[std::size_t(q)] = p;
  std::vector<PatchPair> out;
  for (const auto& [p, q] : forward) {
    if (back[std::size_t(q)] == p) out.emplace_back(p, q);
  }
  return out;
}

inline double fraction_of_rows(const std::vector<PatchPair>& pairs, int n_patches) {
  std::vector<bool> seen(std::size_t(n_patches), false);
  int distinct = 0;
  for (const auto& pq : pairs) {
    if (!seen[std::size_t(pq.first)]) {
      seen[std::size_t(pq.first)] = true;
      ++distinct;
    }
  }
  return n_patches == 0 ? 0.0 : double(distinct) / n_patches;
}

}  // namespace detail

// Cycle-consistent dense correspondences from image i into image j, binned
// into patch pairs. Invalid (zero) depth never produces a count.
inline OverlapMatrix depth_correspondence_overlap(
    const DepthMap& depth_i, const DepthMap& depth_j, const CameraModel& cam_i,
    const CameraModel& cam_j, const PatchGrid& grid,
    const DepthSupervisionOptions& opts = {}) {
  detail::check_depth_dims(depth_i, grid, "i");
  detail::check_depth_dims(depth_j, grid, "j");
  if (opts.stride <= 0) throw ValidationError("sampling stride must be positive");
  OverlapMatrix m(grid.n_patches());
  const int side = grid.image_side();
  for (int v = 0; v < side; v += opts.stride) {
    for (int u = 0; u < side; u += opts.stride) {
      const double d = depth_i.at(u, v);
      if (d <= 0.0) continue;
      const Eigen::Vector2d px(u + 0.5, v + 0.5);
      const Eigen::Vector3d X = detail::unproject(px, d, cam_i);
      const Eigen::Vector3d xj = cam_j.rotation * X + cam_j.translation;
      const auto pj = project_point(X, cam_j);
      if (!pj) continue;
      const auto q = patch_of_pixel(*pj, grid);
      if (!q) continue;
      const double dj = depth_j.at(int(pj->x()), int(pj->y()));
      if (dj <= 0.0) continue;
      if (std::abs(xj.z() - dj) > opts.max_relative_depth * dj) continue;
      const auto back = project_point(detail::unproject(*pj, dj, cam_j), cam_i);
      if (!back || (*back - px).norm() >= opts.max_reprojection_px) continue;
      m.increment(*patch_of_pixel(px, grid), *q);
    }
  }
  return m;
}

// Positive patch pairs from depth and relative pose: per-direction arg-max
// assignment of cycle-consistent correspondences, kept only where both
// directions agree.
inline GtMatchSet build_supervision_depth(const std::string& image_i,
                                          const std::string& image_j,
                                          const DepthMap& depth_i,
                                          const DepthMap& depth_j,
                                          const CameraModel& cam_i,
                                          const CameraModel& cam_j,
                                          const PatchGrid& grid,
                                          const DepthSupervisionOptions& opts = {}) {
  const auto ij = depth_correspondence_overlap(depth_i, depth_j, cam_i, cam_j, grid, opts);
  const auto ji = depth_correspondence_overlap(depth_j, depth_i, cam_j, cam_i, grid, opts);
  GtMatchSet gt;
  gt.image_i = image_i;
  gt.image_j = image_j;
  gt.n_patches = grid.n_patches();
  gt.positives = detail::mutual_pairs(detail::row_argmax_pairs(ij, 1),
                                      detail::row_argmax_pairs(ji, 1),
                                      grid.n_patches());
  gt.overlap_fraction = detail::fraction_of_rows(gt.positives, gt.n_patches);
  gt.image_overlap = image_overlap(ij).first;
  return gt;
}

// Positive patch pairs from externally matched pixel correspondences
// (x_i, y_i) -> (x_j, y_j): a pair needs strictly more than `min_count`
// correspondences, then the same one-to-one rule as the depth path applies.
inline GtMatchSet build_supervision_matches(
    const std::vector<std::pair<Eigen::Vector2d, Eigen::Vector2d>>& correspondences,
    const PatchGrid& grid, std::uint32_t min_count = 5,
    const std::string& image_i = {}, const std::string& image_j = {}) {
  OverlapMatrix ij(grid.n_patches());
  for (const auto& [a, b] : correspondences) {
    const auto p = patch_of_pixel(a, grid);
    const auto q = patch_of_pixel(b, grid);
    if (p && q) ij.increment(*p, *q);
  }
  const auto ji = ij.transposed();
  GtMatchSet gt;
  gt.image_i = image_i;
  gt.image_j = image_j;
  gt.n_patches = grid.n_patches();
  gt.positives = detail::mutual_pairs(detail::row_argmax_pairs(ij, min_count + 1),
                                      detail::row_argmax_pairs(ji, min_count + 1),
                                      grid.n_patches());
  gt.overlap_fraction = detail::fraction_of_rows(gt.positives, gt.n_patches);
  gt.image_overlap = image_overlap(ij).first;
  return gt;
}

// Fills gt.negatives with up to `count` distinct non-positive pairs, drawn
// uniformly with a generator seeded by `seed`.
inline void sample_negatives(GtMatchSet& gt, std::size_t count, std::uint64_t seed) {
  const std::size_t n = std::size_t(gt.n_patches);
  std::vector<bool> taken(n * n, false);
  for (const auto& [p, q] : gt.positives) taken[std::size_t(p) * n + std::size_t(q)] = true;
  const std::size_t available = n * n - gt.positives.size();
  count = std::min(count, available);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n * n - 1);
  gt.negatives.clear();
  while (gt.negatives.size() < count) {
    const std::size_t k = pick(rng);
    if (taken[k]) continue;
    taken[k] = true;
    gt.negatives.emplace_back(int(k / n), int(k % n));
  }
  std::sort(gt.negatives.begin(), gt.negatives.end());
}

}  // namespace vop
