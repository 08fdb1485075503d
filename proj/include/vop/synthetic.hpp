#pragma once

// Synthetic data with known ground truth: a window-shift dataset where
// matched patches share a latent vector, and a posed-camera scene looking at
// a textured plane with analytic depth.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vop/core_types.hpp"
#include "vop/geometry.hpp"
#include "vop/training.hpp"

namespace vop::synthetic {

struct SeparableOptions {
  int scenes = 40;
  int images_per_scene = 5;
  int max_shift = 10;  // window offsets are drawn from [0, max_shift]^2
  int dim = 1024;
  double noise = 0.05;
  PatchGrid grid;
  std::uint64_t seed = 0;
};

// Each scene is a (side + max_shift)^2 field of N(0, 1) latents; an image is a
// side x side window of it plus N(0, noise^2) per feature. Patches looking at
// the same cell form the positives, and every image pair of a scene is listed.
inline SupervisionStore make_separable_dataset(const SeparableOptions& opts) {
  if (opts.scenes <= 0 || opts.images_per_scene < 2 || opts.max_shift < 0 || opts.dim <= 0) {
    throw ValidationError("separable dataset: bad options");
  }
  const int side = opts.grid.rows_cols();
  const int field = side + opts.max_shift;
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  std::uniform_int_distribution<int> shift(0, opts.max_shift);
  SupervisionStore store;
  RowMatrixXf latent(field * field, opts.dim);
  for (int s = 0; s < opts.scenes; ++s) {
    for (Eigen::Index k = 0; k < latent.size(); ++k) latent.data()[k] = gauss(rng);
    const std::size_t first = store.images.size();
    std::vector<std::pair<int, int>> offsets;
    for (int m = 0; m < opts.images_per_scene; ++m) {
      const int ox = shift(rng), oy = shift(rng);
      offsets.emplace_back(ox, oy);
      RowMatrixXf feats(opts.grid.n_patches(), opts.dim);
      for (int r = 0; r < side; ++r) {
        for (int c = 0; c < side; ++c) {
          const int p = opts.grid.patch_index(r, c);
          feats.row(p) = latent.row((oy + r) * field + (ox + c));
          for (int d = 0; d < opts.dim; ++d) feats(p, d) += float(opts.noise) * gauss(rng);
        }
      }
      store.images.emplace_back("s" + std::to_string(s) + "_" + std::to_string(m),
                                std::move(feats), std::nullopt, opts.grid);
      store.scene.push_back(s);
    }
    for (int a = 0; a < opts.images_per_scene; ++a) {
      for (int b = a + 1; b < opts.images_per_scene; ++b) {
        TrainingPair pair{first + std::size_t(a), first + std::size_t(b), {}, 0.0};
        const int dx = offsets[a].first - offsets[b].first;
        const int dy = offsets[a].second - offsets[b].second;
        for (int r = 0; r < side; ++r) {
          for (int c = 0; c < side; ++c) {
            const int rb = r + dy, cb = c + dx;
            if (rb < 0 || cb < 0 || rb >= side || cb >= side) continue;
            pair.positives.emplace_back(opts.grid.patch_index(r, c), opts.grid.patch_index(rb, cb));
          }
        }
        pair.overlap_fraction = double(pair.positives.size()) / double(opts.grid.n_patches());
        store.pairs.push_back(std::move(pair));
      }
    }
  }
  return store;
}

struct WallSceneOptions {
  int cameras_x = 5;
  int cameras_y = 4;
  double spacing = 3.0;        // camera grid step, world units
  double wall_depth = 10.0;    // plane z = wall_depth, cameras at z = 0
  double max_tilt_deg = 3.0;   // random yaw/pitch per camera
  double lattice = 0.625;      // latent node spacing on the wall
  int dim = 1024;
  double noise = 0.05;
  PatchGrid grid;
  std::uint64_t seed = 0;
  std::string prefix = "cam";
};

struct WallScene {
  std::vector<ImageFeatures> features;
  std::vector<CameraModel> cameras;
  std::vector<DepthMap> depths;
};

namespace detail {

inline Eigen::Matrix3d tilt(double yaw, double pitch) {
  return (Eigen::AngleAxisd(pitch, Eigen::Vector3d::UnitX()) *
          Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()))
      .toRotationMatrix();
}

// Intersection of the ray through pixel (x, y) with the plane z = depth.
inline Eigen::Vector3d wall_point(const CameraModel& cam, double x, double y, double depth,
                                  double* camera_z = nullptr) {
  const Eigen::Vector3d ray_cam = cam.intrinsics.inverse() * Eigen::Vector3d(x, y, 1.0);
  const Eigen::Vector3d dir = cam.rotation.transpose() * ray_cam;
  const Eigen::Vector3d c = cam.center();
  const double lambda = (depth - c.z()) / dir.z();
  if (camera_z) *camera_z = lambda * ray_cam.z();
  return c + lambda * dir;
}

}  // namespace detail

// Cameras on a cameras_x x cameras_y grid in the plane z = 0, all facing a
// wall at z = wall_depth whose texture is a bilinear field of random latent
// vectors. A patch's feature is the field at the wall point seen through the
// patch centre plus noise; depth maps are exact.
inline WallScene make_wall_scene(const WallSceneOptions& opts) {
  if (opts.cameras_x <= 0 || opts.cameras_y <= 0 || !(opts.wall_depth > 0.0) ||
      !(opts.lattice > 0.0) || opts.dim <= 0) {
    throw ValidationError("wall scene: bad options");
  }
  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  const double max_tilt = opts.max_tilt_deg * M_PI / 180.0;
  std::uniform_real_distribution<double> angle(-max_tilt, max_tilt);
  const int side = opts.grid.image_side();
  const double f = double(side);
  Eigen::Matrix3d K;
  K << f, 0, side / 2.0, 0, f, side / 2.0, 0, 0, 1;

  WallScene scene;
  for (int gy = 0; gy < opts.cameras_y; ++gy) {
    for (int gx = 0; gx < opts.cameras_x; ++gx) {
      CameraModel cam;
      cam.rotation = detail::tilt(angle(rng), angle(rng));
      const Eigen::Vector3d centre(gx * opts.spacing, gy * opts.spacing, 0.0);
      cam.translation = -cam.rotation * centre;
      cam.intrinsics = K;
      scene.cameras.push_back(cam);
    }
  }

  // Latent lattice covering every wall point any camera can see.
  double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
  for (const auto& cam : scene.cameras) {
    for (double x : {0.0, double(side)}) {
      for (double y : {0.0, double(side)}) {
        const auto w = detail::wall_point(cam, x, y, opts.wall_depth);
        min_x = std::min(min_x, w.x());
        max_x = std::max(max_x, w.x());
        min_y = std::min(min_y, w.y());
        max_y = std::max(max_y, w.y());
      }
    }
  }
  const int nx = int(std::ceil((max_x - min_x) / opts.lattice)) + 2;
  const int ny = int(std::ceil((max_y - min_y) / opts.lattice)) + 2;
  RowMatrixXf lattice(nx * ny, opts.dim);
  for (Eigen::Index k = 0; k < lattice.size(); ++k) lattice.data()[k] = gauss(rng);
  const auto field = [&](double x, double y) {
    const double u = (x - min_x) / opts.lattice, v = (y - min_y) / opts.lattice;
    const int i = std::clamp(int(std::floor(u)), 0, nx - 2);
    const int j = std::clamp(int(std::floor(v)), 0, ny - 2);
    const double a = u - i, b = v - j;
    const double w00 = (1 - a) * (1 - b), w10 = a * (1 - b), w01 = (1 - a) * b, w11 = a * b;
    const double norm = std::sqrt(w00 * w00 + w10 * w10 + w01 * w01 + w11 * w11);
    Eigen::VectorXf out = (float(w00 / norm) * lattice.row(j * nx + i) +
                           float(w10 / norm) * lattice.row(j * nx + i + 1) +
                           float(w01 / norm) * lattice.row((j + 1) * nx + i) +
                           float(w11 / norm) * lattice.row((j + 1) * nx + i + 1))
                              .transpose();
    return out;
  };

  const int rc = opts.grid.rows_cols(), ps = opts.grid.patch_side();
  for (std::size_t k = 0; k < scene.cameras.size(); ++k) {
    const auto& cam = scene.cameras[k];
    std::vector<float> depth(std::size_t(side) * std::size_t(side));
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        double z = 0.0;
        detail::wall_point(cam, x + 0.5, y + 0.5, opts.wall_depth, &z);
        depth[std::size_t(y) * std::size_t(side) + std::size_t(x)] = float(z);
      }
    }
    scene.depths.emplace_back(side, side, std::move(depth));
    RowMatrixXf feats(opts.grid.n_patches(), opts.dim);
    for (int r = 0; r < rc; ++r) {
      for (int c = 0; c < rc; ++c) {
        const auto w = detail::wall_point(cam, c * ps + ps / 2.0, r * ps + ps / 2.0, opts.wall_depth);
        const int p = opts.grid.patch_index(r, c);
        feats.row(p) = field(w.x(), w.y()).transpose();
        for (int d = 0; d < opts.dim; ++d) feats(p, d) += float(opts.noise) * gauss(rng);
      }
    }
    scene.features.emplace_back(opts.prefix + std::to_string(k), std::move(feats), std::nullopt,
                                opts.grid);
  }
  return scene;
}

// Depth supervision for every unordered image pair of a scene.
inline std::vector<GtMatchSet> supervise_scene(const WallScene& scene,
                                               const DepthSupervisionOptions& opts = {}) {
  std::vector<GtMatchSet> out;
  for (std::size_t a = 0; a < scene.features.size(); ++a) {
    for (std::size_t b = a + 1; b < scene.features.size(); ++b) {
      out.push_back(build_supervision_depth(scene.features[a].image_id(),
                                            scene.features[b].image_id(), scene.depths[a],
                                            scene.depths[b], scene.cameras[a], scene.cameras[b],
                                            scene.features[a].grid(), opts));
    }
  }
  return out;
}

}  // namespace vop::synthetic
