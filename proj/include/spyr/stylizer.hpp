#pragma once

// Runtime stroke control: continuous interpolation along the pyramid and
// spatial blending of per-branch outputs under soft masks.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "spyr/arch.hpp"
#include "spyr/generator.hpp"
#include "spyr/image.hpp"

namespace spyr {

/// Scalar t in [0, K-1] mixes the two branches either side of it.
inline GatingVector gating_for_t(double t, std::size_t k) {
  require(k > 0, "range", "model has no branches");
  require(std::isfinite(t) && t >= 0.0 && t <= static_cast<double>(k - 1), "range",
          "t must lie in [0, " + std::to_string(k - 1) + "], got " + format_doubles({t}));
  const double lo = std::floor(t);
  const auto m = static_cast<std::size_t>(lo);
  const double frac = t - lo;
  if (frac == 0.0) return GatingVector::one_hot(k, m);
  GatingVector g{std::vector<double>(k, 0.0)};
  g.a[m] = 1.0 - frac;
  g.a[m + 1] = frac;
  return g;
}

/// Either a scalar position t or an explicit gating vector.
struct StrokeControl {
  std::optional<double> t;
  std::optional<GatingVector> gating;

  static StrokeControl at(double t) { return {t, std::nullopt}; }
  static StrokeControl with(GatingVector g) { return {std::nullopt, std::move(g)}; }
  static StrokeControl branch(std::size_t k, std::size_t i) { return with(GatingVector::one_hot(k, i)); }

  GatingVector resolve(std::size_t k) const {
    require(t.has_value() != gating.has_value(), "control", "exactly one of t or gating must be set");
    if (t) return gating_for_t(*t, k);
    gating->validate(k);
    return *gating;
  }
};

inline Tensor<float> interpolate_stylize(const Generator<float>& model, const Tensor<float>& image, double t) {
  return model.stylize(image, gating_for_t(t, model.num_branches()));
}

/// Per-region weight maps, each H x W, summing to one at every pixel.
struct StrokeMaskSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Tensor<float>> maps;

  static constexpr double kTolerance = 1e-4;

  std::size_t size() const { return maps.size(); }

  static StrokeMaskSet zeros(std::size_t regions, std::size_t h, std::size_t w) {
    StrokeMaskSet m{h, w, {}};
    for (std::size_t r = 0; r < regions; ++r) m.maps.emplace_back(Shape{h, w});
    return m;
  }

  void validate(std::size_t h, std::size_t w) const {
    require(height == h && width == w, "mask_shape",
            "mask is " + std::to_string(height) + "x" + std::to_string(width) + ", image is " + std::to_string(h) +
                "x" + std::to_string(w));
    require(!maps.empty(), "mask_partition", "mask set is empty");
    for (const auto& m : maps) require(m.shape() == (Shape{h, w}), "mask_shape", "mask map has wrong shape");
    for (std::size_t p = 0; p < h * w; ++p) {
      double s = 0;
      for (const auto& m : maps) {
        const double v = m[p];
        require(std::isfinite(v) && v >= -kTolerance && v <= 1.0 + kTolerance, "mask_partition",
                "mask weights must lie in [0, 1]");
        s += v;
      }
      require(std::abs(s - 1.0) <= kTolerance, "mask_partition",
              "mask weights sum to " + format_doubles({s}) + " at pixel (" + std::to_string(p / w) + ", " +
                  std::to_string(p % w) + ")");
    }
  }
};

/// Blends region outputs: sum_r M_r * stylize(control_r). Branch features are
/// computed once and each nonempty region is decoded once.
inline Tensor<float> spatial_stylize(const Generator<float>& model, const Tensor<float>& image,
                                     const StrokeMaskSet& masks, const std::vector<StrokeControl>& controls) {
  NoGradGuard guard;
  const Tensor<float> x = as_batch(image);
  require(x.dim(0) == 1, "shape", "spatial control takes a single image");
  model.check_image(x);
  const std::size_t h = x.dim(2), w = x.dim(3), plane = h * w;
  masks.validate(h, w);
  require(controls.size() == masks.size(), "control",
          std::to_string(masks.size()) + " mask regions but " + std::to_string(controls.size()) + " controls");
  std::vector<GatingVector> gates;
  for (const auto& c : controls) gates.push_back(c.resolve(model.num_branches()));

  const auto feats = model.forward_branch_features(Var<float>(x));
  std::vector<double> acc(3 * plane, 0.0);
  for (std::size_t r = 0; r < masks.size(); ++r) {
    const auto& m = masks.maps[r];
    bool any = false;
    for (float v : m.data()) any = any || v != 0.0f;
    if (!any) continue;
    const Tensor<float> out = model.gate_and_decode(feats, gates[r]);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < plane; ++p) acc[c * plane + p] += static_cast<double>(m[p]) * out[c * plane + p];
  }
  Tensor<float> y(Shape{1, 3, h, w});
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<float>(acc[i]);
  return image.rank() == 3 ? y.reshaped({3, h, w}) : y;
}

/// Masks indexed by branch: region k is rendered by branch k alone.
inline Tensor<float> spatial_stylize(const Generator<float>& model, const Tensor<float>& image,
                                     const StrokeMaskSet& masks) {
  std::vector<StrokeControl> controls;
  for (std::size_t k = 0; k < masks.size(); ++k) controls.push_back(StrokeControl::branch(model.num_branches(), k));
  return spatial_stylize(model, image, masks, controls);
}

/// Builds `regions` maps from one mask PNG. Indexed images give hard masks per
/// palette index. Grayscale value v gives weight 1 - v to the first region and
/// v to the last.
inline StrokeMaskSet load_mask(const std::string& png_bytes, std::size_t regions, std::size_t h, std::size_t w) {
  require(regions > 0, "control", "mask needs at least one region");
  const RawPng png = decode_png(png_bytes);
  require(png.channels == 1, "bad_image", "mask must be a grayscale or indexed PNG");
  require(png.height == h && png.width == w, "mask_shape",
          "mask is " + std::to_string(png.height) + "x" + std::to_string(png.width) + ", image is " +
              std::to_string(h) + "x" + std::to_string(w));
  StrokeMaskSet m = StrokeMaskSet::zeros(regions, h, w);
  for (std::size_t p = 0; p < h * w; ++p) {
    const std::uint8_t v = png.pixels[p];
    if (png.indexed) {
      require(v < regions, "mask_label",
              "mask label " + std::to_string(v) + " needs a region index below " + std::to_string(regions));
      m.maps[v][p] = 1.0f;
    } else {
      const double g = static_cast<double>(v) / 255.0;
      m.maps[0][p] += static_cast<float>(1.0 - g);
      m.maps[regions - 1][p] += static_cast<float>(g);
    }
  }
  m.validate(h, w);
  return m;
}

/// One grayscale PNG per region, used directly as weights.
inline StrokeMaskSet load_masks(const std::vector<std::string>& pngs, std::size_t h, std::size_t w) {
  require(!pngs.empty(), "control", "no mask files given");
  StrokeMaskSet m = StrokeMaskSet::zeros(pngs.size(), h, w);
  for (std::size_t r = 0; r < pngs.size(); ++r) {
    const RawPng png = decode_png(pngs[r]);
    require(png.channels == 1 && !png.indexed, "bad_image", "per-region masks must be grayscale PNGs");
    require(png.height == h && png.width == w, "mask_shape", "mask size does not match the content image");
    for (std::size_t p = 0; p < h * w; ++p) m.maps[r][p] = static_cast<float>(png.pixels[p]) / 255.0f;
  }
  m.validate(h, w);
  return m;
}

// ---------------------------------------------------------------- shared core

/// Control as it arrives from the command line or a form: raw text fields and
/// mask PNG bytes. Exactly one of t, gating or masks drives the output; with
/// masks, t may list one value per region.
struct ControlText {
  std::optional<std::string> t;
  std::optional<std::string> gating;
  std::vector<std::string> masks;
};

namespace detail {

inline std::vector<double> parse_control_list(const std::string& text, const std::string& what) {
  try {
    auto v = parse_doubles(text, what);
    require(!v.empty(), "control", what + " is empty");
    return v;
  } catch (const Error& e) {
    if (e.code() == "control") throw;
    fail("control", e.what());
  }
}

/// Replicates border pixels so both sides become multiples of `m`.
inline Tensor<float> pad_edge(const Tensor<float>& x, std::size_t m) {
  const std::size_t c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  if (ph == h && pw == w) return x;
  Tensor<float> out(Shape{1, c, ph, pw});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < ph; ++i)
      for (std::size_t j = 0; j < pw; ++j) out.at(0, ch, i, j) = x.at(0, ch, std::min(i, h - 1), std::min(j, w - 1));
  return out;
}

inline Tensor<float> pad_edge_map(const Tensor<float>& m, std::size_t ph, std::size_t pw) {
  const std::size_t h = m.dim(0), w = m.dim(1);
  Tensor<float> out(Shape{ph, pw});
  for (std::size_t i = 0; i < ph; ++i)
    for (std::size_t j = 0; j < pw; ++j) out.at(i, j) = m.at(std::min(i, h - 1), std::min(j, w - 1));
  return out;
}

inline Tensor<float> crop_top_left(const Tensor<float>& x, std::size_t h, std::size_t w) {
  if (x.dim(2) == h && x.dim(3) == w) return x;
  Tensor<float> out(Shape{1, x.dim(1), h, w});
  for (std::size_t c = 0; c < x.dim(1); ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out.at(0, c, i, j) = x.at(0, c, i, j);
  return out;
}

}  // namespace detail

inline constexpr std::size_t kDefaultMaxSide = 2048;

/// Content PNG + control -> output PNG. Images whose sides are not multiples
/// of the encoder stride are edge-padded for the forward pass and cropped back.
inline std::string stylize_png(const Generator<float>& model, const std::string& content_png,
                               const ControlText& control, std::size_t max_side = kDefaultMaxSide) {
  const std::size_t k = model.num_branches();
  const int forms = (control.t && control.masks.empty() ? 1 : 0) + (control.gating ? 1 : 0) +
                    (control.masks.empty() ? 0 : 1);
  require(forms == 1, "control", "give exactly one of t, gating or mask");
  require(!(control.gating && !control.masks.empty()), "control", "gating cannot be combined with a mask");

  const RawPng raw = decode_png(content_png);
  require(max_side == 0 || (raw.height <= max_side && raw.width <= max_side), "too_large",
          "image is " + std::to_string(raw.height) + "x" + std::to_string(raw.width) + ", limit is " +
              std::to_string(max_side) + " per side");
  const Tensor<float> image = png_to_tensor(raw);
  const std::size_t h = image.dim(2), w = image.dim(3);
  const auto stride = static_cast<std::size_t>(encoder_stride(model.arch()));
  const Tensor<float> padded = detail::pad_edge(image, stride);

  Tensor<float> out;
  if (control.masks.empty()) {
    GatingVector g;
    if (control.t) {
      const auto t = detail::parse_control_list(*control.t, "t");
      require(t.size() == 1, "control", "t takes a single value unless a mask is given");
      g = gating_for_t(t[0], k);
    } else {
      g.a = detail::parse_control_list(*control.gating, "gating");
      g.validate(k);
    }
    out = model.stylize(padded, g);
  } else {
    std::vector<StrokeControl> controls;
    if (control.t) {
      for (double t : detail::parse_control_list(*control.t, "t")) controls.push_back(StrokeControl::at(t));
    } else {
      require(control.masks.size() <= k, "control",
              std::to_string(control.masks.size()) + " mask files for " + std::to_string(k) + " branches");
      for (std::size_t i = 0; i < (control.masks.size() > 1 ? control.masks.size() : k); ++i)
        controls.push_back(StrokeControl::branch(k, i));
    }
    for (const auto& c : controls) c.resolve(k);
    StrokeMaskSet masks = control.masks.size() == 1 ? load_mask(control.masks[0], controls.size(), h, w)
                                                    : load_masks(control.masks, h, w);
    require(masks.size() == controls.size(), "control",
            std::to_string(masks.size()) + " mask files but " + std::to_string(controls.size()) + " t values");
    StrokeMaskSet pm{padded.dim(2), padded.dim(3), {}};
    for (const auto& m : masks.maps) pm.maps.push_back(detail::pad_edge_map(m, pm.height, pm.width));
    out = spatial_stylize(model, padded, pm, controls);
  }
  return tensor_to_png(detail::crop_top_left(out, h, w));
}

}  // namespace spyr
