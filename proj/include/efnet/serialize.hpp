#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "efnet/common.hpp"

namespace efnet {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

class ByteReader {
 public:
  ByteReader(std::istream& is, const std::string& path) : is_(is), path_(path) {}

  std::size_t offset() const { return offset_; }

  void read(void* dst, std::size_t n, const char* what) {
    is_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
      throw FormatError(path_ + ": truncated while reading " + std::string(what) +
                        " at byte offset " + std::to_string(offset_));
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* what) {
    unsigned char b[4];
    read(b, 4, what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }

  float f32(const char* what) {
    const std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

 private:
  std::istream& is_;
  std::string path_;
  std::size_t offset_ = 0;
};

}  // namespace detail

inline constexpr std::uint32_t kContainerVersion = 1;

inline void write_container(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os.write("EFNT", 4);
  detail::put_u32(os, kContainerVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(t.name.size()));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    std::size_t n = 1;
    for (std::size_t e : t.shape) {
      detail::put_u32(os, static_cast<std::uint32_t>(e));
      n *= e;
    }
    if (n != t.data.size()) {
      throw ContractError("write_container: tensor '" + t.name + "' shape " +
                          shape_to_string(t.shape) + " does not match " +
                          std::to_string(t.data.size()) + " values");
    }
    for (float v : t.data) detail::put_f32(os, v);
  }
  if (!os) throw FormatError(path + ": write failed");
}

inline std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path + ": cannot open for reading");
  detail::ByteReader r(is, path);

  char magic[4];
  r.read(magic, 4, "magic");
  if (std::memcmp(magic, "EFNT", 4) != 0) {
    throw FormatError(path + ": bad magic at byte offset 0");
  }
  const std::size_t version_off = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion) {
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset " + std::to_string(version_off));
  }
  const std::uint32_t count = r.u32("tensor count");

  std::vector<NamedTensor> tensors;
  tensors.reserve(count);
  for (std::uint32_t ti = 0; ti < count; ++ti) {
    NamedTensor t;
    const std::uint32_t name_len = r.u32("name length");
    t.name.resize(name_len);
    if (name_len) r.read(t.name.data(), name_len, "name");
    const std::size_t ndim_off = r.offset();
    const std::uint32_t ndim = r.u32("ndim");
    if (ndim > 8) {
      throw FormatError(path + ": implausible ndim " + std::to_string(ndim) +
                        " at byte offset " + std::to_string(ndim_off));
    }
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint32_t e = r.u32("extent");
      t.shape.push_back(e);
      n *= e;
    }
    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.data[i] = r.f32("payload");
    tensors.push_back(std::move(t));
  }
  return tensors;
}

}  // namespace efnet
