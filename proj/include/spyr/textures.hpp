#pragma once

// Synthetic style textures and content scenes with controlled periods.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "spyr/rng.hpp"
#include "spyr/tensor.hpp"

namespace spyr {

using Rgb = std::array<float, 3>;

/// Two-colour checkerboard with square cells of `cell` pixels.
inline Tensor<float> checkerboard(std::size_t h, std::size_t w, std::size_t cell, Rgb a = {0.9f, 0.8f, 0.2f},
                                  Rgb b = {0.1f, 0.15f, 0.5f}) {
  Tensor<float> t(Shape{1, 3, h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const bool odd = ((i / cell) + (j / cell)) % 2 == 1;
      for (std::size_t c = 0; c < 3; ++c) t.at(0, c, i, j) = odd ? b[c] : a[c];
    }
  return t;
}

/// Soft round dots on a square lattice of pitch `period` over a flat background.
inline Tensor<float> blobs(std::size_t h, std::size_t w, double period, Rgb dot = {0.85f, 0.25f, 0.2f},
                           Rgb ground = {0.95f, 0.92f, 0.8f}) {
  Tensor<float> t(Shape{1, 3, h, w});
  const double radius = 0.3 * period;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double dy = std::fmod(static_cast<double>(i) + 0.5, period) - 0.5 * period;
      const double dx = std::fmod(static_cast<double>(j) + 0.5, period) - 0.5 * period;
      const double d = std::sqrt(dx * dx + dy * dy);
      const double m = std::clamp(radius + 1.0 - d, 0.0, 1.0);
      for (std::size_t c = 0; c < 3; ++c)
        t.at(0, c, i, j) = static_cast<float>(m * dot[c] + (1.0 - m) * ground[c]);
    }
  return t;
}

/// Random smooth content image: a colour gradient with a few discs and boxes.
inline Tensor<float> synthetic_scene(Rng& rng, std::size_t h, std::size_t w) {
  Tensor<float> t(Shape{1, 3, h, w});
  Rgb c0, c1;
  for (auto& v : c0) v = static_cast<float>(rng.uniform(0.1, 0.9));
  for (auto& v : c1) v = static_cast<float>(rng.uniform(0.1, 0.9));
  const double angle = rng.uniform(0, 6.283185307179586);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const double u = 0.5 + 0.5 * ((static_cast<double>(j) / w - 0.5) * ca + (static_cast<double>(i) / h - 0.5) * sa);
      for (std::size_t c = 0; c < 3; ++c) t.at(0, c, i, j) = static_cast<float>((1 - u) * c0[c] + u * c1[c]);
    }
  const int shapes = 3 + static_cast<int>(rng.below(4));
  for (int s = 0; s < shapes; ++s) {
    Rgb col;
    for (auto& v : col) v = static_cast<float>(rng.uniform(0.0, 1.0));
    const double cy = rng.uniform(0, h), cx = rng.uniform(0, w);
    const double r = rng.uniform(0.08, 0.3) * static_cast<double>(std::min(h, w));
    const bool disc = rng.uniform() < 0.5;
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double dy = static_cast<double>(i) - cy, dx = static_cast<double>(j) - cx;
        const bool inside = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
        if (inside)
          for (std::size_t c = 0; c < 3; ++c) t.at(0, c, i, j) = col[c];
      }
  }
  return t;
}

}  // namespace spyr
