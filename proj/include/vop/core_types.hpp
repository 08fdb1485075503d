#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vop/error.hpp"

namespace vop {

using RowMatrixXf =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixXd =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kDefaultImageSide = 224;
inline constexpr int kDefaultPatchSide = 14;

// Uniform square tiling of a square image. Patch p sits at
// (row, col) = (p / rows_cols, p % rows_cols).
class PatchGrid {
 public:
  PatchGrid() : PatchGrid(kDefaultImageSide, kDefaultPatchSide) {}

  PatchGrid(int image_side, int patch_side)
      : image_side_(image_side), patch_side_(patch_side) {
    if (image_side <= 0 || patch_side <= 0 || image_side % patch_side != 0) {
      throw ValidationError("PatchGrid: image side " +
                            std::to_string(image_side) +
                            " is not a positive multiple of patch side " +
                            std::to_string(patch_side));
    }
  }

  // Grid with the given number of patches over an image of `image_side`.
  static PatchGrid from_patch_count(std::size_t n_patches,
                                    int image_side = kDefaultImageSide) {
    const auto side = static_cast<int>(std::lround(std::sqrt(double(n_patches))));
    if (side <= 0 || std::size_t(side) * std::size_t(side) != n_patches ||
        image_side % side != 0) {
      throw ValidationError("PatchGrid: " + std::to_string(n_patches) +
                            " patches do not tile a " +
                            std::to_string(image_side) + "px square image");
    }
    return PatchGrid(image_side, image_side / side);
  }

  int image_side() const { return image_side_; }
  int patch_side() const { return patch_side_; }
  int rows_cols() const { return image_side_ / patch_side_; }
  int n_patches() const { return rows_cols() * rows_cols(); }

  std::pair<int, int> row_col(int patch) const {
    return {patch / rows_cols(), patch % rows_cols()};
  }
  int patch_index(int row, int col) const { return row * rows_cols() + col; }

  // Coarser grid whose patches are factor x factor blocks of this one.
  PatchGrid coarsen(int factor) const {
    if (factor <= 0 || rows_cols() % factor != 0) {
      throw ValidationError("PatchGrid: pooling factor " +
                            std::to_string(factor) + " does not divide " +
                            std::to_string(rows_cols()));
    }
    return PatchGrid(image_side_, patch_side_ * factor);
  }

  friend bool operator==(const PatchGrid&, const PatchGrid&) = default;

 private:
  int image_side_;
  int patch_side_;
};

namespace detail {

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace detail

// Backbone output for one image: one feature row per patch plus an optional
// global ([CLS]) feature.
class ImageFeatures {
 public:
  ImageFeatures(std::string image_id, RowMatrixXf patch_feats,
                std::optional<Eigen::VectorXf> cls_feat = std::nullopt,
                PatchGrid grid = PatchGrid())
      : image_id_(std::move(image_id)),
        patch_feats_(std::move(patch_feats)),
        cls_feat_(std::move(cls_feat)),
        grid_(grid) {
    if (patch_feats_.rows() != grid_.n_patches()) {
      throw ValidationError("ImageFeatures '" + image_id_ + "': " +
                            std::to_string(patch_feats_.rows()) +
                            " rows for a grid of " +
                            std::to_string(grid_.n_patches()) + " patches");
    }
    if (patch_feats_.cols() == 0) {
      throw ValidationError("ImageFeatures '" + image_id_ +
                            "': feature dimension is zero");
    }
    if (cls_feat_ && cls_feat_->size() != patch_feats_.cols()) {
      throw ValidationError("ImageFeatures '" + image_id_ +
                            "': cls dimension differs from patch dimension");
    }
    if (!detail::all_finite(patch_feats_) ||
        (cls_feat_ && !detail::all_finite(*cls_feat_))) {
      throw ValidationError("ImageFeatures '" + image_id_ +
                            "': non-finite value");
    }
  }

  const std::string& image_id() const { return image_id_; }
  const RowMatrixXf& patch_feats() const { return patch_feats_; }
  const std::optional<Eigen::VectorXf>& cls_feat() const { return cls_feat_; }
  const PatchGrid& grid() const { return grid_; }
  int dim() const { return static_cast<int>(patch_feats_.cols()); }
  int n_patches() const { return static_cast<int>(patch_feats_.rows()); }

  friend bool operator==(const ImageFeatures& a, const ImageFeatures& b) {
    if (a.image_id_ != b.image_id_ || !(a.grid_ == b.grid_) ||
        a.patch_feats_.rows() != b.patch_feats_.rows() ||
        a.patch_feats_.cols() != b.patch_feats_.cols() ||
        a.cls_feat_.has_value() != b.cls_feat_.has_value()) {
      return false;
    }
    if (a.patch_feats_ != b.patch_feats_) return false;
    return !a.cls_feat_ || *a.cls_feat_ == *b.cls_feat_;
  }

 private:
  std::string image_id_;
  RowMatrixXf patch_feats_;
  std::optional<Eigen::VectorXf> cls_feat_;
  PatchGrid grid_;
};

inline constexpr double kDegenerateNorm = 1e-12;

// Rows scaled to unit L2 norm on construction, so inner products are cosine
// similarities. Rows whose norm falls below kDegenerateNorm become zero and
// are reported by is_degenerate(); they match nothing.
class ImageEmbeddings {
 public:
  ImageEmbeddings(std::string image_id, const RowMatrixXf& patch_embs,
                  std::optional<Eigen::VectorXf> cls_emb = std::nullopt,
                  PatchGrid grid = PatchGrid())
      : image_id_(std::move(image_id)), grid_(grid) {
    if (patch_embs.rows() != grid_.n_patches()) {
      throw ValidationError("ImageEmbeddings '" + image_id_ + "': " +
                            std::to_string(patch_embs.rows()) +
                            " rows for a grid of " +
                            std::to_string(grid_.n_patches()) + " patches");
    }
    if (patch_embs.cols() == 0) {
      throw ValidationError("ImageEmbeddings '" + image_id_ +
                            "': embedding dimension is zero");
    }
    if (!detail::all_finite(patch_embs)) {
      throw ValidationError("ImageEmbeddings '" + image_id_ +
                            "': non-finite value");
    }
    patch_embs_.resize(patch_embs.rows(), patch_embs.cols());
    degenerate_.assign(std::size_t(patch_embs.rows()), false);
    for (Eigen::Index r = 0; r < patch_embs.rows(); ++r) {
      const Eigen::VectorXd row = patch_embs.row(r).cast<double>().transpose();
      const double norm = row.norm();
      if (norm < kDegenerateNorm) {
        patch_embs_.row(r).setZero();
        degenerate_[std::size_t(r)] = true;
      } else {
        patch_embs_.row(r) = (row / norm).cast<float>().transpose();
      }
    }
    if (cls_emb) {
      if (cls_emb->size() != patch_embs.cols() ||
          !detail::all_finite(*cls_emb)) {
        throw ValidationError("ImageEmbeddings '" + image_id_ +
                              "': invalid cls embedding");
      }
      const Eigen::VectorXd c = cls_emb->cast<double>();
      const double norm = c.norm();
      cls_emb_ = norm < kDegenerateNorm ? Eigen::VectorXf::Zero(c.size())
                                        : Eigen::VectorXf((c / norm).cast<float>());
    }
  }

  const std::string& image_id() const { return image_id_; }
  const RowMatrixXf& patch_embs() const { return patch_embs_; }
  const std::optional<Eigen::VectorXf>& cls_emb() const { return cls_emb_; }
  const PatchGrid& grid() const { return grid_; }
  int dim() const { return static_cast<int>(patch_embs_.cols()); }
  int n_patches() const { return static_cast<int>(patch_embs_.rows()); }
  bool is_degenerate(int patch) const { return degenerate_[std::size_t(patch)]; }

 private:
  std::string image_id_;
  RowMatrixXf patch_embs_;
  std::vector<bool> degenerate_;
  std::optional<Eigen::VectorXf> cls_emb_;
  PatchGrid grid_;
};

// World-to-camera pose (x_cam = R X + t) with pinhole intrinsics K.
struct CameraModel {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  Eigen::Matrix3d intrinsics = Eigen::Matrix3d::Identity();

  void validate() const {
    constexpr double kTol = 1e-9;
    if (!rotation.allFinite() || !translation.allFinite() ||
        !intrinsics.allFinite()) {
      throw ValidationError("CameraModel: non-finite entry");
    }
    if (!(rotation * rotation.transpose()).isApprox(Eigen::Matrix3d::Identity(),
                                                    kTol) ||
        std::abs(rotation.determinant() - 1.0) > kTol) {
      throw ValidationError("CameraModel: rotation is not in SO(3)");
    }
    if (intrinsics(0, 0) <= 0 || intrinsics(1, 1) <= 0 ||
        intrinsics(1, 0) != 0 || intrinsics(2, 0) != 0 ||
        intrinsics(2, 1) != 0) {
      throw ValidationError(
          "CameraModel: intrinsics must be upper triangular with positive "
          "focal lengths");
    }
  }

  // Camera centre in world coordinates.
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
};

// Per-pixel depth along the camera z axis; 0 marks an invalid pixel. Pixel
// (x, y) covers [x, x+1) x [y, y+1) in image coordinates.
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int width, int height, std::vector<float> depth)
      : width_(width), height_(height), depth_(std::move(depth)) {
    if (width <= 0 || height <= 0 ||
        depth_.size() != std::size_t(width) * std::size_t(height)) {
      throw ValidationError("DepthMap: buffer size does not match " +
                            std::to_string(width) + "x" +
                            std::to_string(height));
    }
    for (float d : depth_) {
      if (!std::isfinite(d) || d < 0.0f) {
        throw ValidationError("DepthMap: depth values must be finite and >= 0");
      }
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  float at(int x, int y) const {
    return depth_[std::size_t(y) * std::size_t(width_) + std::size_t(x)];
  }
  const std::vector<float>& data() const { return depth_; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> depth_;
};

}  // namespace vop
