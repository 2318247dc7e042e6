#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "efnet/common.hpp"
#include "efnet/netpbm.hpp"
#include "efnet/rng.hpp"
#include "efnet/tensor.hpp"

namespace efnet {

template <typename T>
struct Sample {
  Tensor<T> rgb;                            // [3 x H x W] in [0, 1]
  Tensor<T> thermal;                        // [1 x H x W] in [0, 1]
  std::vector<int> labels;                  // H*W values in [0, K) or 255
  std::vector<std::uint8_t> thermal_only;   // 1 where the pixel belongs to an RGB-invisible shape
  std::size_t h = 0, w = 0;
  std::size_t shapes = 0, thermal_only_shapes = 0;
};

namespace detail {

inline void hsv_to_rgb(double hue, double sat, double val, double& r, double& g, double& b) {
  const double h6 = hue * 6.0;
  const int i = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * f);
  const double t = val * (1.0 - sat * (1.0 - f));
  switch (i) {
    case 0: r = val; g = t; b = p; break;
    case 1: r = q; g = val; b = p; break;
    case 2: r = p; g = val; b = t; break;
    case 3: r = p; g = q; b = val; break;
    case 4: r = t; g = p; b = val; break;
    default: r = val; g = p; b = q; break;
  }
}

}  // namespace detail

// Deterministic toy scenes: one 4-aligned rectangle per class 1..k-1 on a dark
// background, RGB colored per class, thermal leveled per class. A configurable
// fraction of shapes is painted only in the thermal plane.
template <typename T>
std::vector<Sample<T>> gen_synthetic(std::size_t n, std::size_t h, std::size_t w, std::size_t k,
                                     std::uint64_t seed, double thermal_only_frac = 0.3) {
  if (k < 2) throw ContractError("gen_synthetic: k must be >= 2");
  if (h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0) {
    throw ContractError("gen_synthetic: extents must be positive multiples of 4");
  }
  Rng rng(seed);
  const T bg_gray = T(0.12), bg_temp = T(0.15), noise = T(0.02);
  const std::size_t base = std::min(h, w);
  const std::size_t min_side = std::max<std::size_t>(8, base / 4) / 4 * 4;
  const std::size_t max_side = std::max(min_side, base / 2 / 4 * 4);

  std::vector<std::array<T, 3>> color(k);
  std::vector<T> temp(k);
  for (std::size_t c = 1; c < k; ++c) {
    double r, g, b;
    detail::hsv_to_rgb(static_cast<double>(c - 1) / static_cast<double>(k - 1), 0.8, 0.85, r, g, b);
    color[c] = {static_cast<T>(r), static_cast<T>(g), static_cast<T>(b)};
    temp[c] = T(0.35) + T(0.65) * T(c) / T(k - 1);
  }

  std::vector<Sample<T>> out;
  out.reserve(n);
  for (std::size_t si = 0; si < n; ++si) {
    Sample<T> s;
    s.h = h;
    s.w = w;
    s.rgb = Tensor<T>({3, h, w});
    s.thermal = Tensor<T>({1, h, w});
    s.labels.assign(h * w, 0);
    s.thermal_only.assign(h * w, 0);
    const std::size_t pix = h * w;
    for (std::size_t j = 0; j < pix; ++j) {
      for (std::size_t c = 0; c < 3; ++c)
        s.rgb[c * pix + j] = bg_gray + static_cast<T>(rng.normal()) * noise;
      s.thermal[j] = bg_temp + static_cast<T>(rng.normal()) * noise;
    }

    for (std::size_t cls = 1; cls < k; ++cls) {
      const bool invisible = rng.uniform() < thermal_only_frac;
      std::size_t y0 = 0, x0 = 0, sh = min_side, sw = min_side;
      for (int attempt = 0; attempt < 8; ++attempt) {
        const std::size_t span = (max_side - min_side) / 4 + 1;
        sh = min_side + 4 * rng.range(span);
        sw = min_side + 4 * rng.range(span);
        y0 = 4 * rng.range((h - sh) / 4 + 1);
        x0 = 4 * rng.range((w - sw) / 4 + 1);
        std::size_t covered = 0;
        for (std::size_t y = y0; y < y0 + sh; ++y)
          for (std::size_t x = x0; x < x0 + sw; ++x)
            if (s.labels[y * w + x] != 0) ++covered;
        if (covered * 10 <= sh * sw * 3) break;  // accept at most 30% overlap
      }
      for (std::size_t y = y0; y < y0 + sh; ++y)
        for (std::size_t x = x0; x < x0 + sw; ++x) {
          const std::size_t j = y * w + x;
          s.labels[j] = static_cast<int>(cls);
          s.thermal_only[j] = invisible ? 1 : 0;
          s.thermal[j] = temp[cls] + static_cast<T>(rng.normal()) * noise;
          if (!invisible) {
            for (std::size_t c = 0; c < 3; ++c)
              s.rgb[c * pix + j] = color[cls][c] + static_cast<T>(rng.normal()) * noise;
          }
        }
      ++s.shapes;
      if (invisible) ++s.thermal_only_shapes;
    }
    for (std::size_t j = 0; j < 3 * pix; ++j) {
      s.rgb[j] = std::min(T(1), std::max(T(0), s.rgb[j]));
      if (j < pix) s.thermal[j] = std::min(T(1), std::max(T(0), s.thermal[j]));
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
Sample<T> load_pair(const std::string& rgb_path, const std::string& thermal_path,
                    const std::string& label_path) {
  Sample<T> s;
  s.rgb = read_ppm<T>(rgb_path);
  s.thermal = read_pgm<T>(thermal_path);
  LabelGrid lab = read_pgm_labels(label_path);
  s.h = s.rgb.extent(1);
  s.w = s.rgb.extent(2);
  if (s.thermal.extent(1) != s.h || s.thermal.extent(2) != s.w) {
    throw FormatError(thermal_path + ": extent " + std::to_string(s.thermal.extent(2)) + "x" +
                      std::to_string(s.thermal.extent(1)) + " does not match rgb " +
                      std::to_string(s.w) + "x" + std::to_string(s.h));
  }
  if (lab.h != s.h || lab.w != s.w) {
    throw FormatError(label_path + ": extent " + std::to_string(lab.w) + "x" +
                      std::to_string(lab.h) + " does not match rgb " + std::to_string(s.w) + "x" +
                      std::to_string(s.h));
  }
  s.labels = std::move(lab.labels);
  s.thermal_only.assign(s.h * s.w, 0);
  return s;
}

namespace detail {

inline std::string sample_name(const std::string& dir, const char* kind, std::size_t i,
                               const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04zu.%s", kind, i, ext);
  return dir + "/" + buf;
}

}  // namespace detail

template <typename T>
void write_dataset(const std::string& dir, const std::vector<Sample<T>>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    write_ppm(detail::sample_name(dir, "rgb", i, "ppm"), samples[i].rgb);
    write_pgm(detail::sample_name(dir, "thm", i, "pgm"), samples[i].thermal);
    write_pgm_labels(detail::sample_name(dir, "lab", i, "pgm"), samples[i].labels, samples[i].h,
                     samples[i].w);
  }
}

template <typename T>
std::vector<Sample<T>> load_dataset(const std::string& dir) {
  std::vector<Sample<T>> out;
  for (std::size_t i = 0;; ++i) {
    const std::string rgb = detail::sample_name(dir, "rgb", i, "ppm");
    std::ifstream probe(rgb, std::ios::binary);
    if (!probe) break;
    probe.close();
    out.push_back(load_pair<T>(rgb, detail::sample_name(dir, "thm", i, "pgm"),
                               detail::sample_name(dir, "lab", i, "pgm")));
  }
  if (out.empty()) throw FormatError(dir + ": no samples found (expected rgb_0000.ppm ...)");
  return out;
}

}  // namespace efnet
