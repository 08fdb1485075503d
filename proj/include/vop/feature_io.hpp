#pragma once

// VOPF container for per-image patch features or embeddings.
//
//   "VOPF" | version u32 = 1 | image_count u64 |
//   per image: id_len u32 | id bytes (UTF-8) | n_patches u32 | dim u32 |
//              has_cls u8 | n_patches*dim f32 (row-major) | dim f32 if has_cls
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "vop/binary_io.hpp"
#include "vop/core_types.hpp"

namespace vop {

inline constexpr char kFeatureMagic[4] = {'V', 'O', 'P', 'F'};
inline constexpr std::uint32_t kFeatureVersion = 1;

namespace detail {

inline void write_record(io::LittleEndianWriter& w, const std::string& id,
                         const RowMatrixXf& patches,
                         const std::optional<Eigen::VectorXf>& cls) {
  if (id.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ValidationError("image id too long");
  }
  if (patches.cols() == 0) {
    throw ValidationError("record '" + id + "' has zero feature dimension");
  }
  w.put(std::uint32_t(id.size()));
  w.put_bytes(id);
  w.put(std::uint32_t(patches.rows()));
  w.put(std::uint32_t(patches.cols()));
  w.put(std::uint8_t(cls ? 1 : 0));
  w.put_floats(patches.data(), std::size_t(patches.size()));
  if (cls) w.put_floats(cls->data(), std::size_t(cls->size()));
}

struct RawRecord {
  std::string id;
  RowMatrixXf patches;
  std::optional<Eigen::VectorXf> cls;
};

inline std::vector<RawRecord> read_raw_records(std::istream& in,
                                               std::uint64_t size,
                                               const std::string& name) {
  io::LittleEndianReader r(in, size, name);
  if (size < 4) throw FormatError("'" + name + "' is not a VOPF file");
  const std::string magic = r.get_bytes(4);
  if (magic != std::string(kFeatureMagic, 4)) {
    throw FormatError("'" + name + "' is not a VOPF file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kFeatureVersion) {
    throw FormatError("'" + name + "' has unsupported VOPF version " +
                      std::to_string(version));
  }
  const auto count = r.get<std::uint64_t>();
  // Smallest possible record: id_len + n_patches + dim + has_cls.
  r.require(count > r.remaining() ? count : count * 13);
  std::vector<RawRecord> records;
  records.reserve(std::size_t(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    RawRecord rec;
    const auto id_len = r.get<std::uint32_t>();
    rec.id = r.get_bytes(id_len);
    const auto n_patches = r.get<std::uint32_t>();
    const auto dim = r.get<std::uint32_t>();
    const auto has_cls = r.get<std::uint8_t>();
    if (has_cls > 1) {
      throw CorruptionError("'" + name + "': record '" + rec.id +
                            "' has invalid cls flag");
    }
    const std::uint64_t floats =
        std::uint64_t(n_patches) * dim + (has_cls ? dim : 0);
    r.require(floats * sizeof(float));
    rec.patches.resize(n_patches, dim);
    r.get_floats(rec.patches.data(), std::size_t(rec.patches.size()));
    if (has_cls) {
      rec.cls = Eigen::VectorXf(dim);
      r.get_floats(rec.cls->data(), dim);
    }
    records.push_back(std::move(rec));
  }
  if (r.remaining() != 0) {
    throw CorruptionError("'" + name + "' has " +
                          std::to_string(r.remaining()) + " trailing bytes");
  }
  return records;
}

inline std::vector<RawRecord> read_raw_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = std::uint64_t(in.tellg());
  in.seekg(0, std::ios::beg);
  return read_raw_records(in, size, path.string());
}

}  // namespace detail

inline void write_features(const std::vector<ImageFeatures>& records,
                           std::ostream& out) {
  io::LittleEndianWriter w(out);
  w.put_bytes(std::string_view(kFeatureMagic, 4));
  w.put(kFeatureVersion);
  w.put(std::uint64_t(records.size()));
  for (const auto& rec : records) {
    detail::write_record(w, rec.image_id(), rec.patch_feats(), rec.cls_feat());
  }
}

inline void write_features(const std::vector<ImageFeatures>& records,
                           const std::filesystem::path& path) {
  io::AtomicFile file(path);
  write_features(records, file.stream());
  file.commit();
}

inline std::vector<ImageFeatures> read_features(
    std::istream& in, std::uint64_t size, const std::string& name = "<stream>",
    int image_side = kDefaultImageSide) {
  std::vector<ImageFeatures> out;
  for (auto& rec : detail::read_raw_records(in, size, name)) {
    const auto grid =
        PatchGrid::from_patch_count(std::size_t(rec.patches.rows()), image_side);
    out.emplace_back(std::move(rec.id), std::move(rec.patches),
                     std::move(rec.cls), grid);
  }
  return out;
}

inline std::vector<ImageFeatures> read_features(
    const std::filesystem::path& path, int image_side = kDefaultImageSide) {
  std::vector<ImageFeatures> out;
  for (auto& rec : detail::read_raw_file(path)) {
    const auto grid =
        PatchGrid::from_patch_count(std::size_t(rec.patches.rows()), image_side);
    out.emplace_back(std::move(rec.id), std::move(rec.patches),
                     std::move(rec.cls), grid);
  }
  return out;
}

// Embeddings share the container; rows are re-normalized on load.
inline void write_embeddings(const std::vector<ImageEmbeddings>& records,
                             const std::filesystem::path& path) {
  io::AtomicFile file(path);
  io::LittleEndianWriter w(file.stream());
  w.put_bytes(std::string_view(kFeatureMagic, 4));
  w.put(kFeatureVersion);
  w.put(std::uint64_t(records.size()));
  for (const auto& rec : records) {
    detail::write_record(w, rec.image_id(), rec.patch_embs(), rec.cls_emb());
  }
  file.commit();
}

inline std::vector<ImageEmbeddings> read_embeddings(
    const std::filesystem::path& path, int image_side = kDefaultImageSide) {
  std::vector<ImageEmbeddings> out;
  for (auto& rec : detail::read_raw_file(path)) {
    const auto grid =
        PatchGrid::from_patch_count(std::size_t(rec.patches.rows()), image_side);
    out.emplace_back(std::move(rec.id), rec.patches, std::move(rec.cls), grid);
  }
  return out;
}

}  // namespace vop
