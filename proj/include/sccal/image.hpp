#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sccal/error.hpp"

namespace sccal {

// 8-bit interleaved RGB.
struct RgbImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

// Single-channel category map; 255 is the conventional ignore label.
struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;

  int at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  int& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
};

// Planar float image (C x H x W).
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }

  ImageTensor crop(int y0, int x0, int h, int w) const {
    ImageTensor out(channels, h, w);
    for (int c = 0; c < channels; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const int sy = y0 + y, sx = x0 + x;
          out.at(c, y, x) = (sy < height && sx < width) ? at(c, sy, sx) : 0.0f;
        }
    return out;
  }
};

// Half-pixel-centre bilinear sampling weights for resizing `in` samples to `out`.
struct BilinearTap {
  int i0 = 0, i1 = 0;
  double w1 = 0.0;  // weight of i1; i0 gets 1 - w1
};

inline std::vector<BilinearTap> bilinear_taps(int in, int out) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}

// Bilinear resize of a planar float image.
inline ImageTensor resize_bilinear(const ImageTensor& in, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0 || in.height <= 0 || in.width <= 0) {
    throw ShapeError("resize_bilinear: degenerate dimensions");
  }
  const auto ty = bilinear_taps(in.height, out_h);
  const auto tx = bilinear_taps(in.width, out_w);
  ImageTensor out(in.channels, out_h, out_w);
  for (int c = 0; c < in.channels; ++c)
    for (int y = 0; y < out_h; ++y) {
      const auto& a = ty[static_cast<std::size_t>(y)];
      for (int x = 0; x < out_w; ++x) {
        const auto& b = tx[static_cast<std::size_t>(x)];
        const double top = in.at(c, a.i0, b.i0) * (1.0 - b.w1) + in.at(c, a.i0, b.i1) * b.w1;
        const double bot = in.at(c, a.i1, b.i0) * (1.0 - b.w1) + in.at(c, a.i1, b.i1) * b.w1;
        out.at(c, y, x) = static_cast<float>(top * (1.0 - a.w1) + bot * a.w1);
      }
    }
  return out;
}

inline ImageTensor to_tensor(const RgbImage& img) {
  ImageTensor t(3, img.height, img.width);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) t.at(c, y, x) = img.at(y, x, c);
  return t;
}

// Nearest-neighbour resize for label maps.
inline LabelMap resize_nearest(const LabelMap& in, int out_h, int out_w) {
  LabelMap out{out_h, out_w, std::vector<int>(static_cast<std::size_t>(out_h) * out_w)};
  for (int y = 0; y < out_h; ++y) {
    const int sy = std::min(in.height - 1, static_cast<int>((y + 0.5) * in.height / out_h));
    for (int x = 0; x < out_w; ++x) {
      const int sx = std::min(in.width - 1, static_cast<int>((x + 0.5) * in.width / out_w));
      out.at(y, x) = in.at(sy, sx);
    }
  }
  return out;
}

}  // namespace sccal
