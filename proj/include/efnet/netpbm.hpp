#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

namespace detail {

struct PnmImage {
  std::size_t w = 0, h = 0;
  std::vector<std::uint8_t> bytes;  // interleaved payload
};

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError(path + ": cannot open for reading");
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
}

class PnmParser {
 public:
  PnmParser(const std::vector<std::uint8_t>& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  std::size_t offset() const { return at_; }

  void expect_magic(const char* magic) {
    if (buf_.size() < 2 || buf_[0] != static_cast<std::uint8_t>(magic[0]) ||
        buf_[1] != static_cast<std::uint8_t>(magic[1])) {
      throw FormatError(path_ + ": bad magic at byte offset 0, expected " + std::string(magic));
    }
    at_ = 2;
  }

  // Whitespace/comment separated unsigned decimal token.
  std::size_t next_uint(const char* what) {
    skip_separators();
    if (at_ >= buf_.size() || !is_digit(buf_[at_])) {
      throw FormatError(path_ + ": expected " + std::string(what) + " at byte offset " +
                        std::to_string(at_));
    }
    std::size_t v = 0;
    while (at_ < buf_.size() && is_digit(buf_[at_])) {
      v = v * 10 + static_cast<std::size_t>(buf_[at_] - '0');
      if (v > 1000000000) {
        throw FormatError(path_ + ": implausible " + std::string(what) + " at byte offset " +
                          std::to_string(at_));
      }
      ++at_;
    }
    return v;
  }

  // Exactly one whitespace byte separates the maxval from the payload.
  const std::uint8_t* payload(std::size_t n) {
    if (at_ >= buf_.size() || !is_space(buf_[at_])) {
      throw FormatError(path_ + ": expected single whitespace before payload at byte offset " +
                        std::to_string(at_));
    }
    ++at_;
    if (buf_.size() - at_ < n) {
      throw FormatError(path_ + ": truncated payload at byte offset " +
                        std::to_string(buf_.size()) + ", need " + std::to_string(at_ + n) +
                        " bytes");
    }
    const std::uint8_t* p = buf_.data() + at_;
    at_ += n;
    return p;
  }

 private:
  static bool is_space(std::uint8_t c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v';
  }
  static bool is_digit(std::uint8_t c) { return c >= '0' && c <= '9'; }

  void skip_separators() {
    while (at_ < buf_.size()) {
      if (is_space(buf_[at_])) {
        ++at_;
      } else if (buf_[at_] == '#') {
        while (at_ < buf_.size() && buf_[at_] != '\n') ++at_;
      } else {
        break;
      }
    }
  }

  const std::vector<std::uint8_t>& buf_;
  std::string path_;
  std::size_t at_ = 0;
};

inline PnmImage read_pnm(const std::string& path, const char* magic, std::size_t channels) {
  const std::vector<std::uint8_t> buf = read_file_bytes(path);
  PnmParser p(buf, path);
  p.expect_magic(magic);
  PnmImage img;
  img.w = p.next_uint("width");
  img.h = p.next_uint("height");
  if (img.w == 0 || img.h == 0) {
    throw FormatError(path + ": zero extent at byte offset " + std::to_string(p.offset()));
  }
  const std::size_t maxval_off = p.offset();
  const std::size_t maxval = p.next_uint("maxval");
  if (maxval != 255) {
    throw FormatError(path + ": maxval must be 255, got " + std::to_string(maxval) +
                      " at byte offset " + std::to_string(maxval_off));
  }
  const std::uint8_t* data = p.payload(img.w * img.h * channels);
  img.bytes.assign(data, data + img.w * img.h * channels);
  return img;
}

inline std::uint8_t to_byte(double v) {
  if (v < 0.0) v = 0.0;
  if (v > 1.0) v = 1.0;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace detail

// P6, maxval 255, planes scaled to [0, 1].
template <typename T>
Tensor<T> read_ppm(const std::string& path) {
  detail::PnmImage img = detail::read_pnm(path, "P6", 3);
  Tensor<T> t({3, img.h, img.w});
  const std::size_t pix = img.h * img.w;
  for (std::size_t j = 0; j < pix; ++j)
    for (std::size_t c = 0; c < 3; ++c)
      t[c * pix + j] = static_cast<T>(img.bytes[j * 3 + c]) / T(255);
  return t;
}

template <typename T>
void write_ppm(const std::string& path, const Tensor<T>& t) {
  if (t.ndim() != 3 || t.extent(0) != 3) {
    throw ShapeError("write_ppm: expected [3xHxW], got " + shape_to_string(t.shape()));
  }
  const std::size_t h = t.extent(1), w = t.extent(2), pix = h * w;
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> row(pix * 3);
  for (std::size_t j = 0; j < pix; ++j)
    for (std::size_t c = 0; c < 3; ++c)
      row[j * 3 + c] = detail::to_byte(static_cast<double>(t[c * pix + j]));
  os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  if (!os) throw FormatError(path + ": write failed");
}

template <typename T>
Tensor<T> read_pgm(const std::string& path) {
  detail::PnmImage img = detail::read_pnm(path, "P5", 1);
  Tensor<T> t({1, img.h, img.w});
  for (std::size_t j = 0; j < img.h * img.w; ++j) t[j] = static_cast<T>(img.bytes[j]) / T(255);
  return t;
}

template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& t) {
  if (t.ndim() != 3 || t.extent(0) != 1) {
    throw ShapeError("write_pgm: expected [1xHxW], got " + shape_to_string(t.shape()));
  }
  const std::size_t h = t.extent(1), w = t.extent(2);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> row(h * w);
  for (std::size_t j = 0; j < h * w; ++j) row[j] = detail::to_byte(static_cast<double>(t[j]));
  os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  if (!os) throw FormatError(path + ": write failed");
}

// Label grids stay integer-valued; 255 is the ignore label.
struct LabelGrid {
  std::size_t h = 0, w = 0;
  std::vector<int> labels;
};

inline LabelGrid read_pgm_labels(const std::string& path) {
  detail::PnmImage img = detail::read_pnm(path, "P5", 1);
  LabelGrid g;
  g.h = img.h;
  g.w = img.w;
  g.labels.assign(img.bytes.begin(), img.bytes.end());
  return g;
}

inline void write_pgm_labels(const std::string& path, const std::vector<int>& labels,
                             std::size_t h, std::size_t w) {
  if (labels.size() != h * w) {
    throw ContractError("write_pgm_labels: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(h) + "x" + std::to_string(w));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError(path + ": cannot open for writing");
  os << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> row(h * w);
  for (std::size_t j = 0; j < h * w; ++j) {
    if (labels[j] < 0 || labels[j] > 255) {
      throw ContractError("write_pgm_labels: label " + std::to_string(labels[j]) +
                          " does not fit a byte");
    }
    row[j] = static_cast<std::uint8_t>(labels[j]);
  }
  os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  if (!os) throw FormatError(path + ": write failed");
}

}  // namespace efnet
