#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "zssrt/errors.hpp"

namespace zssrt {

// Dense height x width x channels array, row-major with interleaved channels.
template <typename Real>
struct Tensor3 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<Real> data;

  Tensor3() = default;
  Tensor3(int h, int w, int c, Real fill = Real(0))
      : height(h), width(w), channels(c), data(std::size_t(h) * w * c, fill) {}

  std::size_t index(int y, int x, int c) const {
    return (std::size_t(y) * width + x) * channels + c;
  }
  Real& at(int y, int x, int c = 0) { return data[index(y, x, c)]; }
  const Real& at(int y, int x, int c = 0) const { return data[index(y, x, c)]; }

  // Replicate-padded read.
  const Real& clamped(int y, int x, int c = 0) const {
    return at(std::clamp(y, 0, height - 1), std::clamp(x, 0, width - 1), c);
  }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::span<Real> span() { return data; }
  std::span<const Real> span() const { return data; }

  bool same_shape(const Tensor3& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }

  std::string shape_string() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" +
           std::to_string(channels);
  }

  template <typename U>
  Tensor3<U> cast() const {
    Tensor3<U> out(height, width, channels);
    std::transform(data.begin(), data.end(), out.data.begin(),
                   [](Real v) { return static_cast<U>(v); });
    return out;
  }

  Tensor3 crop(int y0, int x0, int h, int w) const {
    if (y0 < 0 || x0 < 0 || y0 + h > height || x0 + w > width)
      throw ShapeError("crop window outside tensor " + shape_string());
    Tensor3 out(h, w, channels);
    for (int y = 0; y < h; ++y)
      std::copy_n(&at(y0 + y, x0, 0), std::size_t(w) * channels, &out.at(y, 0, 0));
    return out;
  }
};

using Image = Tensor3<float>;

template <typename Real>
void require_same_shape(const Tensor3<Real>& a, const Tensor3<Real>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                     b.shape_string());
}

// s x s non-overlapping box average. Dimensions must be divisible by s.
template <typename Real>
Tensor3<Real> box_downsample(const Tensor3<Real>& in, int s) {
  if (s < 1) throw ConfigError("box_downsample: factor must be >= 1");
  if (in.height % s != 0 || in.width % s != 0)
    throw ShapeError("box_downsample: " + in.shape_string() + " not divisible by " +
                     std::to_string(s));
  Tensor3<Real> out(in.height / s, in.width / s, in.channels);
  const Real inv = Real(1) / Real(s * s);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < in.channels; ++c) {
        Real acc = 0;
        for (int dy = 0; dy < s; ++dy)
          for (int dx = 0; dx < s; ++dx) acc += in.at(y * s + dy, x * s + dx, c);
        out.at(y, x, c) = acc * inv;
      }
  return out;
}

// Adjoint of box_downsample: spreads each output gradient evenly over its cell.
template <typename Real>
void box_downsample_backward(const Tensor3<Real>& d_out, int s, Tensor3<Real>& d_in) {
  const Real inv = Real(1) / Real(s * s);
  for (int y = 0; y < d_out.height; ++y)
    for (int x = 0; x < d_out.width; ++x)
      for (int c = 0; c < d_out.channels; ++c) {
        const Real g = d_out.at(y, x, c) * inv;
        for (int dy = 0; dy < s; ++dy)
          for (int dx = 0; dx < s; ++dx) d_in.at(y * s + dy, x * s + dx, c) += g;
      }
}

}  // namespace zssrt
