#pragma once

// Dataset manifest (JSON) and 16-bit PGM depth maps.
//
// {
//   "images": [
//     {"id": "a", "features": "feats.vopf",
//      "camera": {"R": [9 floats, row-major], "t": [3], "K": [9]},
//      "depth": "a.pgm", "depth_scale": 0.001, "scene": "s0"}, ...],
//   "pairs": [["a", "b"], ...]            // optional, default: all pairs
// }
//
// Relative paths are resolved against the manifest's directory.

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "vop/binary_io.hpp"
#include "vop/core_types.hpp"

namespace vop {

struct ManifestImage {
  std::string id;
  std::filesystem::path features;
  std::optional<CameraModel> camera;
  std::optional<std::filesystem::path> depth;
  double depth_scale = 1.0;
  std::string scene;
};

struct Manifest {
  std::vector<ManifestImage> images;
  std::vector<std::pair<std::string, std::string>> pairs;

  const ManifestImage& find(const std::string& id) const {
    for (const auto& img : images) {
      if (img.id == id) return img;
    }
    throw ValidationError("manifest has no image '" + id + "'");
  }
};

namespace detail {

inline Eigen::Matrix3d matrix3_from_json(const nlohmann::json& j,
                                         const char* what) {
  if (!j.is_array() || j.size() != 9) {
    throw ValidationError(std::string("manifest camera '") + what +
                          "' must have 9 entries");
  }
  Eigen::Matrix3d m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(std::size_t(r * 3 + c)).get<double>();
  }
  return m;
}

}  // namespace detail

inline CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel cam;
  cam.rotation = detail::matrix3_from_json(j.at("R"), "R");
  const auto& t = j.at("t");
  if (!t.is_array() || t.size() != 3) {
    throw ValidationError("manifest camera 't' must have 3 entries");
  }
  cam.translation = {t[0].get<double>(), t[1].get<double>(), t[2].get<double>()};
  cam.intrinsics = detail::matrix3_from_json(j.at("K"), "K");
  cam.validate();
  return cam;
}

inline nlohmann::json camera_to_json(const CameraModel& cam) {
  nlohmann::json R = nlohmann::json::array(), K = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      R.push_back(cam.rotation(r, c));
      K.push_back(cam.intrinsics(r, c));
    }
  }
  return {{"R", R},
          {"t", {cam.translation.x(), cam.translation.y(), cam.translation.z()}},
          {"K", K}};
}

inline Manifest parse_manifest(const nlohmann::json& j,
                               const std::filesystem::path& base_dir) {
  Manifest m;
  try {
    for (const auto& e : j.at("images")) {
      ManifestImage img;
      img.id = e.at("id").get<std::string>();
      const auto resolve = [&](const std::string& p) {
        const std::filesystem::path path(p);
        return path.is_absolute() ? path : base_dir / path;
      };
      img.features = resolve(e.at("features").get<std::string>());
      if (e.contains("camera")) img.camera = camera_from_json(e.at("camera"));
      if (e.contains("depth")) img.depth = resolve(e.at("depth").get<std::string>());
      img.depth_scale = e.value("depth_scale", 1.0);
      if (!(img.depth_scale > 0.0) || !std::isfinite(img.depth_scale)) {
        throw ValidationError("manifest image '" + img.id +
                              "': depth_scale must be positive");
      }
      img.scene = e.value("scene", std::string());
      m.images.push_back(std::move(img));
    }
    if (j.contains("pairs")) {
      for (const auto& p : j.at("pairs")) {
        m.pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
      }
    } else {
      for (std::size_t a = 0; a < m.images.size(); ++a) {
        for (std::size_t b = a + 1; b < m.images.size(); ++b) {
          m.pairs.emplace_back(m.images[a].id, m.images[b].id);
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  for (const auto& [a, b] : m.pairs) {
    m.find(a);
    m.find(b);
  }
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("manifest '" + path.string() + "': " + e.what());
  }
  return parse_manifest(j, path.parent_path());
}

// Binary PGM (P5). 16-bit samples are big-endian per the netpbm spec.
inline DepthMap read_pgm_depth(const std::filesystem::path& path, double scale) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  const auto next_token = [&]() {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '#') {
        while ((c = in.get()) != EOF && c != '\n') {
        }
        continue;
      }
      if (std::isspace(c)) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(char(c));
    }
    return tok;
  };
  if (next_token() != "P5") {
    throw FormatError("'" + path.string() + "' is not a binary PGM");
  }
  int width = 0, height = 0, maxval = 0;
  try {
    width = std::stoi(next_token());
    height = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw FormatError("'" + path.string() + "' has a malformed PGM header");
  }
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    throw FormatError("'" + path.string() + "' has a malformed PGM header");
  }
  const int bytes_per_sample = maxval > 255 ? 2 : 1;
  std::vector<unsigned char> raw(std::size_t(width) * height * bytes_per_sample);
  in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
  if (std::size_t(in.gcount()) != raw.size()) {
    throw CorruptionError("'" + path.string() + "' is truncated");
  }
  std::vector<float> depth(std::size_t(width) * height);
  for (std::size_t i = 0; i < depth.size(); ++i) {
    const unsigned v = bytes_per_sample == 2
                           ? (unsigned(raw[2 * i]) << 8) | raw[2 * i + 1]
                           : raw[i];
    depth[i] = float(double(v) * scale);
  }
  return DepthMap(width, height, std::move(depth));
}

// Depth is quantized to round(depth / scale); values above 65535 * scale
// are clipped.
inline void write_pgm_depth(const std::filesystem::path& path,
                            const DepthMap& depth, double scale) {
  io::AtomicFile file(path);
  auto& out = file.stream();
  out << "P5\n" << depth.width() << ' ' << depth.height() << "\n65535\n";
  for (float d : depth.data()) {
    const double q = std::min(65535.0, std::round(double(d) / scale));
    const auto v = static_cast<unsigned>(q);
    out.put(char((v >> 8) & 0xff));
    out.put(char(v & 0xff));
  }
  file.commit();
}

}  // namespace vop
