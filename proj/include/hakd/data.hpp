#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hakd/rng.hpp"
#include "hakd/tensor.hpp"

namespace hakd {

template <typename T>
struct SyntheticDataset {
  Tensor<T> images;    // [N, H, W, 3], values in [0, 1]
  LabelTensor labels;  // [N, H, W], exact shape rasterization
  std::string split;   // train | val
  std::uint64_t seed = 0;
  std::size_t num_classes = 0;

  std::size_t count() const { return labels.dim(0); }
  std::size_t height() const { return labels.dim(1); }
  std::size_t width() const { return labels.dim(2); }
};

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

struct ShapeSpot {
  // bounding box, inclusive
  long y0, y1, x0, x1;
  bool disc;
  long cy, cx, ry, rx;
};

inline bool boxes_touch(const ShapeSpot& a, const ShapeSpot& b) {
  return !(a.x1 + 1 < b.x0 || b.x1 + 1 < a.x0 || a.y1 + 1 < b.y0 || b.y1 + 1 < a.y0);
}

}  // namespace detail

// One image: textured background (class 0) plus one colored shape per
// non-background class, rectangles and discs, with additive noise. Placement
// avoids overlap; if a spot cannot be found within the retry budget the
// whole generation fails rather than emitting a corrupt sample.
template <typename T>
inline SyntheticDataset<T> gen_synthetic(std::uint64_t seed, std::size_t n_samples, std::size_t h,
                                         std::size_t w, std::size_t c,
                                         const std::string& split_tag) {
  if (c < 2) throw invalid_parameter("gen_synthetic: need at least 2 classes");
  if (h % 4 != 0 || w % 4 != 0)
    throw invalid_parameter("gen_synthetic: H and W must be divisible by 4");
  SyntheticDataset<T> ds;
  ds.images = Tensor<T>(Dims{n_samples, h, w, 3});
  ds.labels = LabelTensor(Dims{n_samples, h, w});
  ds.split = split_tag;
  ds.seed = seed;
  ds.num_classes = c;

  Rng rng(Rng::derive(seed, "synthetic-" + split_tag));
  // Half-extents small enough that a handful of margin-separated shapes
  // always fit on the canvas.
  const long min_r = std::max<long>(4, static_cast<long>(h) / 8);
  const long max_r = std::max(min_r + 2, static_cast<long>(h) * 3 / 16);
  constexpr int kPlacementRetries = 100;

  std::vector<bool> class_seen(c, false);
  for (std::size_t s = 0; s < n_samples; ++s) {
    T* img = ds.images.data() + s * h * w * 3;
    std::int32_t* lab = ds.labels.data() + s * h * w;

    // Background texture: tinted base + two waves; amplitudes chosen so the
    // task is learnable but not saturated at desk scale.
    const double base = rng.uniform(0.2, 0.5);
    const double tint[3] = {rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                            rng.uniform(-0.1, 0.1)};
    const double fy = rng.uniform(0.5, 3.0) * 2.0 * 3.14159265358979323846 / static_cast<double>(h);
    const double fx = rng.uniform(0.5, 3.0) * 2.0 * 3.14159265358979323846 / static_cast<double>(w);
    const double phase = rng.uniform(0.0, 6.28318);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double wave = 0.12 * std::sin(fy * static_cast<double>(y) + phase) +
                            0.12 * std::cos(fx * static_cast<double>(x));
        T* px = img + (y * w + x) * 3;
        for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<T>(base + tint[ch] + wave);
        lab[y * w + x] = 0;
      }
    }
    class_seen[0] = true;

    std::vector<detail::ShapeSpot> placed;
    for (std::size_t cls = 1; cls < c; ++cls) {
      detail::ShapeSpot spot{};
      bool ok = false;
      for (int attempt = 0; attempt < kPlacementRetries && !ok; ++attempt) {
        spot.disc = rng.coin();
        spot.ry = static_cast<long>(rng.below(static_cast<std::uint64_t>(max_r - min_r + 1))) + min_r;
        spot.rx = spot.disc ? spot.ry
                            : static_cast<long>(rng.below(static_cast<std::uint64_t>(max_r - min_r + 1))) + min_r;
        const long span_y = static_cast<long>(h) - 2 * spot.ry - 2;
        const long span_x = static_cast<long>(w) - 2 * spot.rx - 2;
        if (span_y <= 0 || span_x <= 0) continue;
        spot.cy = spot.ry + 1 + static_cast<long>(rng.below(static_cast<std::uint64_t>(span_y)));
        spot.cx = spot.rx + 1 + static_cast<long>(rng.below(static_cast<std::uint64_t>(span_x)));
        spot.y0 = spot.cy - spot.ry;
        spot.y1 = spot.cy + spot.ry;
        spot.x0 = spot.cx - spot.rx;
        spot.x1 = spot.cx + spot.rx;
        ok = true;
        for (const auto& other : placed)
          if (detail::boxes_touch(spot, other)) { ok = false; break; }
      }
      if (!ok)
        throw generation_error("gen_synthetic: could not place shape for class " +
                               std::to_string(cls) + " in sample " + std::to_string(s));
      placed.push_back(spot);

      double rgb[3];
      const double hue = std::fmod(0.05 + 0.83 * static_cast<double>(cls - 1) /
                                              static_cast<double>(std::max<std::size_t>(1, c - 2) + 1),
                                   1.0);
      detail::hsv_to_rgb(hue, 0.45, 0.62, rgb);
      const double jitter = rng.uniform(-0.18, 0.18);
      for (long y = spot.y0; y <= spot.y1; ++y) {
        for (long x = spot.x0; x <= spot.x1; ++x) {
          if (spot.disc) {
            const double dy = static_cast<double>(y - spot.cy) / static_cast<double>(spot.ry);
            const double dx = static_cast<double>(x - spot.cx) / static_cast<double>(spot.rx);
            if (dy * dy + dx * dx > 1.0) continue;
          }
          T* px = img + (static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3;
          for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<T>(rgb[ch] + jitter);
          lab[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)] =
              static_cast<std::int32_t>(cls);
        }
      }
      class_seen[cls] = true;
    }

    // Additive pixel noise, then clamp into [0, 1].
    for (std::size_t i = 0; i < h * w * 3; ++i) {
      double v = static_cast<double>(img[i]) + 0.05 * rng.normal();
      img[i] = static_cast<T>(std::clamp(v, 0.0, 1.0));
    }
  }

  for (std::size_t cls = 0; cls < c; ++cls)
    if (!class_seen[cls])
      throw generation_error("gen_synthetic: class " + std::to_string(cls) +
                             " absent from the generated split");
  return ds;
}

// Horizontal flip of one sample; used as the only training-time augmentation.
template <typename T>
inline void flip_sample(Tensor<T>& image_hw3, LabelTensor& label_hw) {
  const std::size_t h = label_hw.dim(0), w = label_hw.dim(1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w / 2; ++x) {
      const std::size_t xr = w - 1 - x;
      std::swap(label_hw[y * w + x], label_hw[y * w + xr]);
      for (int ch = 0; ch < 3; ++ch)
        std::swap(image_hw3[(y * w + x) * 3 + ch], image_hw3[(y * w + xr) * 3 + ch]);
    }
  }
}

// Copies selected samples into a batch, flipping where requested.
template <typename T>
inline void gather_batch(const SyntheticDataset<T>& ds, const std::vector<std::size_t>& indices,
                         const std::vector<bool>& flip, Tensor<T>& images_out,
                         LabelTensor& labels_out) {
  const std::size_t h = ds.height(), w = ds.width();
  const std::size_t bn = indices.size();
  if (images_out.dims() != Dims{bn, h, w, 3}) images_out = Tensor<T>(Dims{bn, h, w, 3});
  if (labels_out.dims() != Dims{bn, h, w}) labels_out = LabelTensor(Dims{bn, h, w});
  for (std::size_t i = 0; i < bn; ++i) {
    const std::size_t s = indices[i];
    Tensor<T> img(Dims{h, w, 3});
    LabelTensor lab(Dims{h, w});
    std::copy(ds.images.data() + s * h * w * 3, ds.images.data() + (s + 1) * h * w * 3, img.data());
    std::copy(ds.labels.data() + s * h * w, ds.labels.data() + (s + 1) * h * w, lab.data());
    if (!flip.empty() && flip[i]) flip_sample(img, lab);
    std::copy(img.data(), img.data() + img.size(), images_out.data() + i * h * w * 3);
    std::copy(lab.data(), lab.data() + lab.size(), labels_out.data() + i * h * w);
  }
}

}  // namespace hakd
