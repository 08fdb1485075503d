#pragma once

// Exact inner-product radius search over float vectors.
//
// A ball tree (metric tree) partitions the points; a subtree is skipped only
// when the Cauchy-Schwarz bound <q, c> + |q| r is below the threshold, so the
// result equals a linear scan. Both paths score candidates with the same
// similarity() routine, which makes the two result sets bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "vop/core_types.hpp"

namespace vop {

// Inner product with double accumulation in index order.
inline double similarity(const float* a, const float* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) s += double(a[k]) * double(b[k]);
  return s;
}

class BallTree {
 public:
  static constexpr std::size_t kLeafSize = 32;
  // Below this many points a flat scan is used instead of a tree.
  static constexpr std::size_t kMinTreeSize = 4 * kLeafSize;

  BallTree() = default;

  // `points` is row-major; only rows listed in `ids` are indexed.
  BallTree(std::shared_ptr<const RowMatrixXf> points, std::vector<std::uint32_t> ids)
      : points_(std::move(points)), order_(std::move(ids)) {
    if (order_.size() >= kMinTreeSize) build(0, order_.size());
  }

  std::size_t size() const { return order_.size(); }
  bool uses_tree() const { return !nodes_.empty(); }

  // Calls visit(id, similarity) for every indexed row with similarity >=
  // threshold and accept(id) true.
  template <typename Accept, typename Visit>
  void query(std::span<const float> q, double threshold, Accept&& accept,
             Visit&& visit) const {
    if (order_.empty()) return;
    if (nodes_.empty()) {
      scan(0, order_.size(), q, threshold, accept, visit);
      return;
    }
    double qnorm = 0.0;
    for (float v : q) qnorm += double(v) * double(v);
    qnorm = std::sqrt(qnorm);
    search(0, q, qnorm, threshold, accept, visit);
  }

 private:
  struct Node {
    std::size_t begin, end;
    std::vector<double> center;
    double radius = 0.0;
    std::int64_t left = -1, right = -1;
  };

  const float* row(std::uint32_t id) const {
    return points_->data() + std::size_t(id) * std::size_t(points_->cols());
  }

  std::size_t build(std::size_t begin, std::size_t end) {
    const std::size_t dim = std::size_t(points_->cols());
    const std::size_t index = nodes_.size();
    nodes_.push_back({begin, end, std::vector<double>(dim, 0.0), 0.0, -1, -1});
    std::vector<double> center(dim, 0.0);
    for (std::size_t k = begin; k < end; ++k) {
      const float* x = row(order_[k]);
      for (std::size_t d = 0; d < dim; ++d) center[d] += x[d];
    }
    for (auto& c : center) c /= double(end - begin);
    const auto dist2 = [&](const float* x, const double* c) {
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double diff = double(x[d]) - c[d];
        s += diff * diff;
      }
      return s;
    };
    double radius2 = 0.0;
    std::size_t far_a = begin;
    for (std::size_t k = begin; k < end; ++k) {
      const double d2 = dist2(row(order_[k]), center.data());
      if (d2 > radius2) {
        radius2 = d2;
        far_a = k;
      }
    }
    // Round the radius up so float/double rounding can never make the bound
    // tighter than the true one.
    const double radius = std::sqrt(radius2) * (1.0 + 1e-12) + 1e-12;
    nodes_[index].center = center;
    nodes_[index].radius = radius;
    if (end - begin <= kLeafSize || radius2 == 0.0) return index;

    // Split along the direction between two far-apart points.
    const float* a = row(order_[far_a]);
    std::vector<double> a_d(a, a + dim);
    std::size_t far_b = begin;
    double best = -1.0;
    for (std::size_t k = begin; k < end; ++k) {
      const double d2 = dist2(row(order_[k]), a_d.data());
      if (d2 > best) {
        best = d2;
        far_b = k;
      }
    }
    const float* b = row(order_[far_b]);
    std::vector<double> axis(dim);
    for (std::size_t d = 0; d < dim; ++d) axis[d] = double(b[d]) - double(a[d]);
    std::vector<std::pair<double, std::uint32_t>> proj;
    proj.reserve(end - begin);
    for (std::size_t k = begin; k < end; ++k) {
      const float* x = row(order_[k]);
      double s = 0.0;
      for (std::size_t d = 0; d < dim; ++d) s += double(x[d]) * axis[d];
      proj.emplace_back(s, order_[k]);
    }
    const std::size_t half = proj.size() / 2;
    std::nth_element(proj.begin(), proj.begin() + std::ptrdiff_t(half), proj.end());
    for (std::size_t k = 0; k < proj.size(); ++k) order_[begin + k] = proj[k].second;
    const std::size_t mid = begin + half;
    const auto left = build(begin, mid);
    const auto right = build(mid, end);
    nodes_[index].left = std::int64_t(left);
    nodes_[index].right = std::int64_t(right);
    return index;
  }

  template <typename Accept, typename Visit>
  void scan(std::size_t begin, std::size_t end, std::span<const float> q,
            double threshold, Accept& accept, Visit& visit) const {
    for (std::size_t k = begin; k < end; ++k) {
      const auto id = order_[k];
      if (!accept(id)) continue;
      const double s = similarity(q.data(), row(id), q.size());
      if (s >= threshold) visit(id, s);
    }
  }

  template <typename Accept, typename Visit>
  void search(std::size_t index, std::span<const float> q, double qnorm,
              double threshold, Accept& accept, Visit& visit) const {
    const Node& node = nodes_[index];
    double qc = 0.0;
    for (std::size_t d = 0; d < q.size(); ++d) qc += double(q[d]) * node.center[d];
    constexpr double kSlack = 1e-9;
    if (qc + qnorm * node.radius + kSlack < threshold) return;
    if (node.left < 0) {
      scan(node.begin, node.end, q, threshold, accept, visit);
      return;
    }
    search(std::size_t(node.left), q, qnorm, threshold, accept, visit);
    search(std::size_t(node.right), q, qnorm, threshold, accept, visit);
  }

  std::shared_ptr<const RowMatrixXf> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace vop
