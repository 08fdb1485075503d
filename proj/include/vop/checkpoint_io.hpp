#pragma once

// VOPC checkpoint: "VOPC" | version u32 = 1 | layer_count u32 |
// dims u32 x (layer_count + 1) | dropout f32 |
// per layer: weights (out x in f32, row-major) | bias (out f32).

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "vop/binary_io.hpp"
#include "vop/encoder.hpp"

namespace vop {

inline constexpr char kCheckpointMagic[4] = {'V', 'O', 'P', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void write_checkpoint(const EncoderHead<Scalar>& head, std::ostream& out) {
  io::LittleEndianWriter w(out);
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put(kCheckpointVersion);
  w.put(std::uint32_t(head.layers().size()));
  for (int d : head.layer_dims()) w.put(std::uint32_t(d));
  w.put(float(head.dropout_rate()));
  for (const auto& layer : head.layers()) {
    const RowMatrixXf weights = layer.weights.template cast<float>();
    const Eigen::VectorXf bias = layer.bias.template cast<float>();
    w.put_floats(weights.data(), std::size_t(weights.size()));
    w.put_floats(bias.data(), std::size_t(bias.size()));
  }
}

template <typename Scalar>
void write_checkpoint(const EncoderHead<Scalar>& head,
                      const std::filesystem::path& path) {
  io::AtomicFile file(path);
  write_checkpoint(head, file.stream());
  file.commit();
}

template <typename Scalar = float>
EncoderHead<Scalar> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = std::uint64_t(in.tellg());
  in.seekg(0, std::ios::beg);
  io::LittleEndianReader r(in, size, path.string());
  if (size < 4 || r.get_bytes(4) != std::string(kCheckpointMagic, 4)) {
    throw FormatError("'" + path.string() + "' is not a VOPC checkpoint");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("'" + path.string() + "' has unsupported version " +
                      std::to_string(version));
  }
  const auto layer_count = r.get<std::uint32_t>();
  r.require(std::uint64_t(layer_count + 1) * 4);
  std::vector<int> dims;
  for (std::uint32_t i = 0; i <= layer_count; ++i) dims.push_back(int(r.get<std::uint32_t>()));
  const float dropout = r.get<float>();
  LayerTensors<Scalar> layers;
  for (std::uint32_t l = 0; l < layer_count; ++l) {
    const int in_dim = dims[l], out_dim = dims[l + 1];
    r.require((std::uint64_t(out_dim) * in_dim + out_dim) * sizeof(float));
    RowMatrixXf weights(out_dim, in_dim);
    Eigen::VectorXf bias(out_dim);
    r.get_floats(weights.data(), std::size_t(weights.size()));
    r.get_floats(bias.data(), std::size_t(bias.size()));
    layers.push_back({weights.cast<Scalar>(), bias.cast<Scalar>()});
  }
  if (r.remaining() != 0) {
    throw CorruptionError("'" + path.string() + "' has trailing bytes");
  }
  return EncoderHead<Scalar>(std::move(dims), std::move(layers), dropout);
}

}  // namespace vop
