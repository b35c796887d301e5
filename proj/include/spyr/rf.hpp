#pragma once

// Receptive-field arithmetic over layer chains.

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "spyr/autograd.hpp"
#include "spyr/error.hpp"
#include "spyr/rng.hpp"

namespace spyr {

enum class LayerKind { conv, resize_up, identity_tap };

/// What follows a conv: instance norm + relu, a sigmoid output head, or nothing.
enum class PostOp { in_relu, sigmoid, none };

struct LayerSpec {
  LayerKind kind = LayerKind::conv;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int out_channels = 1;
  PostOp post = PostOp::in_relu;

  static LayerSpec conv(int k, int stride, int out_channels, PostOp post = PostOp::in_relu) {
    return {LayerKind::conv, k, stride, k / 2, out_channels, post};
  }
  static LayerSpec up2() { return {LayerKind::resize_up, 1, 1, 0, 0, PostOp::none}; }
  static LayerSpec tap() { return {LayerKind::identity_tap, 1, 1, 0, 0, PostOp::none}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

inline void validate_layer(const LayerSpec& l) {
  if (l.kind != LayerKind::conv) return;
  require(l.kernel >= 1 && l.kernel % 2 == 1, "arch", "conv kernel must be odd and positive");
  require(l.stride == 1 || l.stride == 2, "arch", "conv stride must be 1 or 2");
  require(l.padding >= 0 && l.padding <= l.kernel / 2, "arch", "conv padding must be in [0, kernel/2]");
  require(l.out_channels >= 1, "arch", "conv out_channels must be positive");
}

/// Exact non-negative rational; jumps become fractional after upsampling.
struct Fraction {
  std::int64_t num = 1;
  std::int64_t den = 1;

  static Fraction make(std::int64_t n, std::int64_t d) {
    const std::int64_t g = std::gcd(n, d);
    return {n / g, d / g};
  }
  Fraction operator*(std::int64_t s) const { return make(num * s, den); }
  Fraction operator/(std::int64_t s) const { return make(num, den * s); }
  bool is_integer() const { return den == 1; }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  std::string str() const { return den == 1 ? std::to_string(num) : std::to_string(num) + "/" + std::to_string(den); }

  friend bool operator==(const Fraction&, const Fraction&) = default;
  friend bool operator<=(const Fraction& a, const Fraction& b) { return a.num * b.den <= b.num * a.den; }
};

/// Receptive field and jump after each layer, both in chain-input pixels.
struct RFReport {
  std::vector<Fraction> rf;
  std::vector<Fraction> jump;

  Fraction final_rf() const { return rf.back(); }
  Fraction final_jump() const { return jump.back(); }
};

/// r <- r + (k-1) j, j <- j s for convs. A 2x bilinear upsample reads two
/// neighbouring inputs per output, so it widens r by one input step and halves j.
inline RFReport compute_rf(std::span<const LayerSpec> chain) {
  require(!chain.empty(), "empty_chain", "compute_rf needs at least one layer");
  RFReport rep;
  Fraction r{1, 1}, j{1, 1};
  for (const auto& l : chain) {
    switch (l.kind) {
      case LayerKind::conv:
        validate_layer(l);
        r = Fraction::make(r.num * j.den + (l.kernel - 1) * j.num * r.den, r.den * j.den);
        j = j * l.stride;
        break;
      case LayerKind::resize_up:
        r = Fraction::make(r.num * j.den + j.num * r.den, r.den * j.den);
        j = j / 2;
        break;
      case LayerKind::identity_tap:
        break;
    }
    rep.rf.push_back(r);
    rep.jump.push_back(j);
  }
  return rep;
}

struct Footprint {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t nonzero = 0;  // pixels inside the footprint that actually influence the neuron
  bool clipped = false;     // footprint touches the input border: measurement is not trustworthy
};

/// Measures which input pixels influence the centre output neuron of `chain`
/// on a single-channel `input_size` square, using strictly positive surrogate
/// weights so no influence cancels. Influence is read off the input gradient
/// of that neuron.
inline Footprint rf_footprint_oracle(std::span<const LayerSpec> chain, std::size_t input_size,
                                     std::uint64_t seed = 1) {
  require(!chain.empty(), "empty_chain", "rf_footprint_oracle needs at least one layer");
  Rng rng(seed);
  Var<double> x(Tensor<double>(Shape{1, 1, input_size, input_size}, 1.0), true);
  Var<double> y = x;
  for (const auto& l : chain) {
    switch (l.kind) {
      case LayerKind::conv: {
        validate_layer(l);
        const auto k = static_cast<std::size_t>(l.kernel);
        Tensor<double> w(Shape{1, 1, k, k});
        for (auto& v : w.data()) v = 0.1 + rng.uniform();
        const std::size_t h = y.shape()[2];
        require(h + 2 * static_cast<std::size_t>(l.padding) >= k, "clipped",
                "input too small: chain output vanishes before the end");
        y = conv2d(y, Var<double>(std::move(w)), static_cast<std::size_t>(l.stride),
                   static_cast<std::size_t>(l.padding));
        break;
      }
      case LayerKind::resize_up:
        y = resize_bilinear(y, y.shape()[2] * 2, y.shape()[3] * 2);
        break;
      case LayerKind::identity_tap:
        break;
    }
  }
  const std::size_t oh = y.shape()[2], ow = y.shape()[3];
  Tensor<double> pick(y.shape());
  pick.at(0, 0, oh / 2, ow / 2) = 1.0;
  backward(sum(mul(y, Var<double>(std::move(pick)))));
  const Tensor<double> g = x.grad();

  std::size_t top = input_size, bottom = 0, left = input_size, right = 0, nz = 0;
  for (std::size_t i = 0; i < input_size; ++i)
    for (std::size_t j = 0; j < input_size; ++j)
      if (g.at(0, 0, i, j) != 0.0) {
        ++nz;
        top = std::min(top, i);
        bottom = std::max(bottom, i);
        left = std::min(left, j);
        right = std::max(right, j);
      }
  Footprint fp;
  if (nz == 0) return fp;
  fp.height = bottom - top + 1;
  fp.width = right - left + 1;
  fp.nonzero = nz;
  fp.clipped = top == 0 || left == 0 || bottom + 1 == input_size || right + 1 == input_size;
  return fp;
}

/// An input size comfortably larger than the chain's receptive field.
inline std::size_t oracle_input_size(std::span<const LayerSpec> chain) {
  const RFReport rep = compute_rf(chain);
  std::int64_t max_stride = 1;
  std::int64_t acc = 1;
  for (const auto& l : chain)
    if (l.kind == LayerKind::conv) max_stride = std::max(max_stride, acc *= l.stride);
  const double r = rep.final_rf().value();
  return static_cast<std::size_t>(2 * r) + static_cast<std::size_t>(8 * max_stride) + 16;
}

}  // namespace spyr
