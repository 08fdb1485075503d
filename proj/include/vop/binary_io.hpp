#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>

#include <unistd.h>

#include "vop/error.hpp"

namespace vop::io {

static_assert(std::endian::native == std::endian::little ||
                  std::endian::native == std::endian::big,
              "mixed-endian platforms are not supported");

// Output file that only becomes visible at its final path after commit():
// data goes to a sibling temporary which is renamed over the target.
class AtomicFile {
 public:
  explicit AtomicFile(std::filesystem::path path)
      : path_(std::move(path)),
        tmp_(path_.string() + ".tmp." + std::to_string(::getpid())) {
    out_.open(tmp_, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot open '" + tmp_.string() + "' for writing");
  }
  AtomicFile(const AtomicFile&) = delete;
  AtomicFile& operator=(const AtomicFile&) = delete;
  ~AtomicFile() {
    if (!committed_) {
      out_.close();
      std::error_code ec;
      std::filesystem::remove(tmp_, ec);
    }
  }

  std::ostream& stream() { return out_; }

  void commit() {
    out_.flush();
    if (!out_) throw IoError("write to '" + tmp_.string() + "' failed");
    out_.close();
    std::error_code ec;
    std::filesystem::rename(tmp_, path_, ec);
    if (ec) {
      throw IoError("cannot rename '" + tmp_.string() + "' to '" +
                    path_.string() + "': " + ec.message());
    }
    committed_ = true;
  }

 private:
  std::filesystem::path path_;
  std::filesystem::path tmp_;
  std::ofstream out_;
  bool committed_ = false;
};

inline void write_text_atomic(const std::filesystem::path& path,
                              std::string_view text) {
  AtomicFile file(path);
  file.stream().write(text.data(), std::streamsize(text.size()));
  file.commit();
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read of '" + path.string() + "' failed");
  return text;
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  } else {
    return v;
  }
}

class LittleEndianWriter {
 public:
  explicit LittleEndianWriter(std::ostream& out) : out_(out) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const T le = to_little(v);
    out_.write(reinterpret_cast<const char*>(&le), sizeof(T));
  }

  void put_bytes(std::string_view bytes) {
    out_.write(bytes.data(), std::streamsize(bytes.size()));
  }

  void put_floats(const float* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(data),
                 std::streamsize(count * sizeof(float)));
    } else {
      for (std::size_t i = 0; i < count; ++i) put(data[i]);
    }
  }

 private:
  std::ostream& out_;
};

// Bounds-checked reader; running past the end raises CorruptionError.
class LittleEndianReader {
 public:
  LittleEndianReader(std::istream& in, std::uint64_t size, std::string name)
      : in_(in), remaining_(size), name_(std::move(name)) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    T v;
    read_raw(&v, sizeof(T));
    return to_little(v);
  }

  std::string get_bytes(std::size_t n) {
    std::string s(n, '\0');
    read_raw(s.data(), n);
    return s;
  }

  void get_floats(float* data, std::size_t count) {
    read_raw(data, count * sizeof(float));
    if constexpr (std::endian::native == std::endian::big) {
      for (std::size_t i = 0; i < count; ++i) data[i] = to_little(data[i]);
    }
  }

  std::uint64_t remaining() const { return remaining_; }

  // Fails early when a header announces more payload than the file holds.
  void require(std::uint64_t bytes) const {
    if (bytes > remaining_) {
      throw CorruptionError("'" + name_ + "' is truncated: need " +
                            std::to_string(bytes) + " more bytes, have " +
                            std::to_string(remaining_));
    }
  }

 private:
  void read_raw(void* dst, std::size_t n) {
    require(n);
    in_.read(static_cast<char*>(dst), std::streamsize(n));
    if (std::size_t(in_.gcount()) != n) {
      throw CorruptionError("'" + name_ + "' is truncated");
    }
    remaining_ -= n;
  }

  std::istream& in_;
  std::uint64_t remaining_;
  std::string name_;
};

}  // namespace vop::io
