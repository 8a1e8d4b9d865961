#pragma once

#include <cmath>
#include <cstddef>

#include "hakd/tensor.hpp"

namespace hakd {

// Half-pixel-center source coordinate for 1-D resampling:
//   src = (dst + 0.5) * (src_size / dst_size) - 0.5, clamped to the edges.
inline double half_pixel_coord(std::size_t dst, std::size_t dst_size, std::size_t src_size) {
  double s = (static_cast<double>(dst) + 0.5) *
                 (static_cast<double>(src_size) / static_cast<double>(dst_size)) -
             0.5;
  if (s < 0.0) s = 0.0;
  const double hi = static_cast<double>(src_size - 1);
  if (s > hi) s = hi;
  return s;
}

struct LinearTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double w_hi = 0.0;  // weight on hi; weight on lo is 1 - w_hi
};

inline LinearTap linear_tap(std::size_t dst, std::size_t dst_size, std::size_t src_size) {
  const double s = half_pixel_coord(dst, dst_size, src_size);
  LinearTap t;
  t.lo = static_cast<std::size_t>(s);
  t.hi = std::min(t.lo + 1, src_size - 1);
  t.w_hi = s - static_cast<double>(t.lo);
  return t;
}

inline std::size_t nearest_tap(std::size_t dst, std::size_t dst_size, std::size_t src_size) {
  return static_cast<std::size_t>(std::floor(half_pixel_coord(dst, dst_size, src_size)));
}

// Bilinear resize of an H x W x C map (or N x H x W x C batch). Integer tap
// positions take the exact-copy path so a same-size resize is bit-identical.
template <typename T>
inline Tensor<T> bilinear_resize(const Tensor<T>& src, std::size_t out_h, std::size_t out_w) {
  const bool batched = src.ndim() == 4;
  if (!batched && src.ndim() != 3)
    throw shape_error("bilinear_resize: expected H x W x C or N x H x W x C, got " +
                      dims_to_string(src.dims()));
  if (out_h < 1 || out_w < 1) throw invalid_parameter("bilinear_resize: target extents must be >= 1");
  const std::size_t n = batched ? src.dim(0) : 1;
  const std::size_t in_h = src.dim(batched ? 1 : 0);
  const std::size_t in_w = src.dim(batched ? 2 : 1);
  const std::size_t c = src.dim(batched ? 3 : 2);
  Dims out_dims = batched ? Dims{n, out_h, out_w, c} : Dims{out_h, out_w, c};
  Tensor<T> out(out_dims);
  const std::size_t src_img = in_h * in_w * c;
  const std::size_t dst_img = out_h * out_w * c;
  for (std::size_t b = 0; b < n; ++b) {
    const T* sp = src.data() + b * src_img;
    T* dp = out.data() + b * dst_img;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const LinearTap ty = linear_tap(oy, out_h, in_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const LinearTap tx = linear_tap(ox, out_w, in_w);
        T* dst_px = dp + (oy * out_w + ox) * c;
        if (ty.w_hi == 0.0 && tx.w_hi == 0.0) {
          const T* s00 = sp + (ty.lo * in_w + tx.lo) * c;
          for (std::size_t ch = 0; ch < c; ++ch) dst_px[ch] = s00[ch];
          continue;
        }
        const double wy1 = ty.w_hi, wy0 = 1.0 - wy1;
        const double wx1 = tx.w_hi, wx0 = 1.0 - wx1;
        const T* s00 = sp + (ty.lo * in_w + tx.lo) * c;
        const T* s01 = sp + (ty.lo * in_w + tx.hi) * c;
        const T* s10 = sp + (ty.hi * in_w + tx.lo) * c;
        const T* s11 = sp + (ty.hi * in_w + tx.hi) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double top = wx0 * static_cast<double>(s00[ch]) + wx1 * static_cast<double>(s01[ch]);
          const double bot = wx0 * static_cast<double>(s10[ch]) + wx1 * static_cast<double>(s11[ch]);
          dst_px[ch] = static_cast<T>(wy0 * top + wy1 * bot);
        }
      }
    }
  }
  return out;
}

template <typename T>
inline Tensor<T> nearest_resize(const Tensor<T>& src, std::size_t out_h, std::size_t out_w) {
  const bool batched = src.ndim() == 4;
  if (!batched && src.ndim() != 3)
    throw shape_error("nearest_resize: expected H x W x C or N x H x W x C, got " +
                      dims_to_string(src.dims()));
  if (out_h < 1 || out_w < 1) throw invalid_parameter("nearest_resize: target extents must be >= 1");
  const std::size_t n = batched ? src.dim(0) : 1;
  const std::size_t in_h = src.dim(batched ? 1 : 0);
  const std::size_t in_w = src.dim(batched ? 2 : 1);
  const std::size_t c = src.dim(batched ? 3 : 2);
  Dims out_dims = batched ? Dims{n, out_h, out_w, c} : Dims{out_h, out_w, c};
  Tensor<T> out(out_dims);
  const std::size_t src_img = in_h * in_w * c;
  const std::size_t dst_img = out_h * out_w * c;
  for (std::size_t b = 0; b < n; ++b) {
    const T* sp = src.data() + b * src_img;
    T* dp = out.data() + b * dst_img;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const std::size_t sy = nearest_tap(oy, out_h, in_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const std::size_t sx = nearest_tap(ox, out_w, in_w);
        const T* s = sp + (sy * in_w + sx) * c;
        T* d = dp + (oy * out_w + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) d[ch] = s[ch];
      }
    }
  }
  return out;
}

}  // namespace hakd
