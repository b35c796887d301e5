#pragma once

// Frozen feature extractor with named taps, and every loss term computed on it.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "spyr/autograd.hpp"
#include "spyr/records.hpp"
#include "spyr/rng.hpp"

namespace spyr {

inline constexpr const char* kLossNetMagic = "SPLN";

/// Five blocks of conv3x3/s1 + relu, conv3x3/s2 + relu. Style taps sit after
/// each block's first relu; the content tap after block 4's second relu.
struct LossNetSpec {
  std::vector<int> channels{8, 16, 32, 64, 64};
  std::uint64_t seed = 0x5EED;
  std::string source = "seeded";

  std::map<std::string, std::string> to_kv() const {
    std::vector<double> c(channels.begin(), channels.end());
    return {{"lossnet.channels", format_doubles(c)},
            {"lossnet.seed", std::to_string(seed)},
            {"lossnet.source", source}};
  }
};

template <typename T = float>
class LossNet {
 public:
  static constexpr std::size_t kMinSize = 32;

  explicit LossNet(LossNetSpec spec = {}) : spec_(std::move(spec)) {
    require(spec_.channels.size() == 5, "config", "the loss network has exactly five blocks");
    int cin = 3;
    for (std::size_t b = 0; b < 5; ++b) {
      const int c = spec_.channels[b];
      require(c >= 1, "config", "loss network channel counts must be positive");
      init(conv_name(b, 1), c, cin);
      if (b < 4) init(conv_name(b, 2), c, c);
      cin = c;
    }
  }

  /// Imports weights from an SPLN file (same record layout as checkpoints).
  static LossNet from_bytes(const std::string& bytes) {
    RecordFile rf = decode_records(kLossNetMagic, bytes);
    LossNetSpec spec;
    if (auto it = rf.text.find("lossnet.channels"); it != rf.text.end()) {
      spec.channels.clear();
      for (double v : parse_doubles(it->second, "lossnet.channels")) spec.channels.push_back(static_cast<int>(v));
    }
    spec.source = "imported";
    spec.seed = fnv1a64(bytes);
    LossNet net(spec);
    for (auto& [name, w] : net.weights_) {
      auto it = rf.tensors.find(name);
      require(it != rf.tensors.end(), "truncated", "loss-network file is missing '" + name + "'");
      require(it->second.shape() == w.shape(), "format", "loss-network tensor '" + name + "' has the wrong shape");
      w = Var<T>(it->second.template cast<T>());
    }
    return net;
  }

  std::string to_bytes() const {
    RecordFile rf;
    rf.text = spec_.to_kv();
    for (const auto& [name, w] : weights_) rf.tensors.emplace(name, w.value().template cast<float>());
    return encode_records(kLossNetMagic, rf);
  }

  const LossNetSpec& spec() const { return spec_; }

  /// Identifies the frozen weights; stored in checkpoints.
  std::string spec_hash() const {
    if (spec_.source == "imported") return hex64(spec_.seed);
    return hex64(fnv1a64(format_kv(spec_.to_kv())));
  }

  static std::vector<std::string> style_taps() { return {"relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"}; }
  static std::vector<std::string> content_taps() { return {"relu4_2"}; }

  /// Tap name -> feature map for an N x 3 x H x W image.
  std::map<std::string, Var<T>> extract(const Var<T>& image) const {
    const auto& s = image.shape();
    require(s.size() == 4 && s[1] == 3, "shape", "loss network expects N x 3 x H x W, got " + shape_str(s));
    require(s[2] >= kMinSize && s[3] >= kMinSize, "too_small",
            "loss network needs images of at least 32x32, got " + std::to_string(s[2]) + "x" + std::to_string(s[3]));
    std::map<std::string, Var<T>> taps;
    Var<T> x = image;
    for (std::size_t b = 0; b < 5; ++b) {
      x = relu(conv2d(x, weights_.at(conv_name(b, 1)), 1, 1));
      taps.emplace("relu" + std::to_string(b + 1) + "_1", x);
      if (b == 4) break;
      x = relu(conv2d(x, weights_.at(conv_name(b, 2)), 2, 1));
      taps.emplace("relu" + std::to_string(b + 1) + "_2", x);
    }
    return taps;
  }

  std::map<std::string, Var<T>> extract(const Tensor<T>& image) const { return extract(Var<T>(image)); }

 private:
  static std::string conv_name(std::size_t block, int idx) {
    return "block" + std::to_string(block + 1) + ".conv" + std::to_string(idx) + ".weight";
  }

  void init(const std::string& name, int cout, int cin) {
    Tensor<T> w(Shape{static_cast<std::size_t>(cout), static_cast<std::size_t>(cin), 3, 3});
    Rng rng = derive_rng(spec_.seed, name);
    const double std = std::sqrt(2.0 / (cin * 9.0));
    for (auto& v : w.data()) v = static_cast<T>(std * rng.normal());
    weights_.insert_or_assign(name, Var<T>(std::move(w)));
  }

  LossNetSpec spec_;
  std::map<std::string, Var<T>> weights_;
};

// ---------------------------------------------------------------- loss terms

/// Sum over content taps of the mean squared feature difference.
template <typename T>
Var<T> content_loss(const std::map<std::string, Var<T>>& content_taps, const std::map<std::string, Var<T>>& output_taps) {
  Var<T> total;
  for (const auto& name : LossNet<T>::content_taps()) {
    const Var<T>& a = content_taps.at(name);
    const Var<T>& b = output_taps.at(name);
    require(a.shape() == b.shape(), "shape", "content and output taps differ in shape at " + name);
    Var<T> term = mse(a, b);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename T>
Var<T> content_loss(const LossNet<T>& net, const Tensor<T>& content, const Var<T>& output) {
  require(content.shape() == output.shape(), "shape",
          "content " + shape_str(content.shape()) + " and output " + shape_str(output.shape()) + " differ in size");
  std::map<std::string, Var<T>> ct;
  {
    NoGradGuard guard;
    ct = net.extract(content);
  }
  return content_loss(ct, net.extract(output));
}

/// R(I_s, T): bilinear resize so the shorter side equals `scale`, aspect preserved.
template <typename T>
Tensor<T> rescale_style(const Tensor<T>& style, double scale_px) {
  require(style.rank() == 4, "shape", "style image must be N x C x H x W");
  require(scale_px >= static_cast<double>(LossNet<T>::kMinSize), "range",
          "style scale must be at least 32 pixels, got " + std::to_string(scale_px));
  const double h = static_cast<double>(style.dim(2)), w = static_cast<double>(style.dim(3));
  const double m = std::min(h, w);
  const auto oh = static_cast<std::size_t>(std::lround(h * scale_px / m));
  const auto ow = static_cast<std::size_t>(std::lround(w * scale_px / m));
  NoGradGuard guard;
  return resize_bilinear(Var<T>(style), oh, ow).value();
}

/// Gram matrices of a style image at one stroke scale, one per style tap.
template <typename T>
struct StyleTarget {
  double scale = 0;
  std::map<std::string, Tensor<T>> grams;  // C x C each
};

template <typename T>
StyleTarget<T> make_style_target(const LossNet<T>& net, const Tensor<T>& style, double scale_px) {
  NoGradGuard guard;
  const Tensor<T> scaled = rescale_style(as_batch(style), scale_px);
  require(scaled.dim(0) == 1, "shape", "style target needs a single style image");
  StyleTarget<T> t;
  t.scale = scale_px;
  const auto taps = net.extract(scaled);
  for (const auto& name : LossNet<T>::style_taps()) {
    Tensor<T> g = gram(taps.at(name)).value();
    const std::size_t c = g.dim(1);
    t.grams.emplace(name, g.reshaped({c, c}));
  }
  return t;
}

/// Sum over style taps of the squared Frobenius gram distance, averaged over the batch.
template <typename T>
Var<T> stroke_loss(const StyleTarget<T>& target, const std::map<std::string, Var<T>>& output_taps) {
  Var<T> total;
  for (const auto& name : LossNet<T>::style_taps()) {
    Var<T> g = gram(output_taps.at(name));
    const std::size_t n = g.shape()[0], c = g.shape()[1];
    const Tensor<T>& ref = target.grams.at(name);
    require(ref.size() == c * c, "shape", "style target does not match tap " + name);
    Tensor<T> tiled(Shape{n, c, c});
    for (std::size_t s = 0; s < n; ++s) std::copy(ref.data().begin(), ref.data().end(), tiled.data().begin() + s * c * c);
    Var<T> term = scale(sum(square(sub(g, Var<T>(std::move(tiled))))), T(1) / static_cast<T>(n));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename T>
Var<T> stroke_loss(const LossNet<T>& net, const Tensor<T>& style, double scale_px, const Var<T>& output) {
  return stroke_loss(make_style_target(net, style, scale_px), net.extract(output));
}

/// Balancing factors; `beta[k]` weights branch k's stroke loss.
struct LossConfig {
  double alpha = 1.0;
  std::vector<double> beta{10.0, 10.0, 10.0};
  double gamma = 1e-4;
  std::vector<double> branch_scales{48, 96, 144};

  void validate() const {
    require(alpha >= 0 && gamma >= 0, "config", "alpha and gamma must be non-negative");
    require(beta.size() == branch_scales.size(), "config", "need one beta per branch scale");
    bool any = alpha > 0;
    for (double b : beta) {
      require(b >= 0, "config", "beta must be non-negative");
      any = any || b > 0;
    }
    require(any, "config", "at least one of alpha, beta_k must be positive");
  }
};

template <typename T>
struct BranchLoss {
  Var<T> total;
  double content = 0;
  double stroke = 0;
  double tv = 0;
};

/// alpha * L_c + beta_k * L_{T_k} + gamma * L_tv with precomputed content taps and style target.
template <typename T>
BranchLoss<T> branch_loss(const LossConfig& cfg, const LossNet<T>& net, const std::map<std::string, Var<T>>& content_taps,
                          const StyleTarget<T>& target, const Var<T>& output, std::size_t k) {
  require(k < cfg.beta.size(), "range", "branch index " + std::to_string(k) + " out of range");
  const auto taps = net.extract(output);
  Var<T> lc = content_loss(content_taps, taps);
  Var<T> ls = stroke_loss(target, taps);
  Var<T> lt = tv_loss(output);
  BranchLoss<T> out;
  out.content = lc.value().item();
  out.stroke = ls.value().item();
  out.tv = lt.value().item();
  out.total = add(add(scale(lc, static_cast<T>(cfg.alpha)), scale(ls, static_cast<T>(cfg.beta[k]))),
                  scale(lt, static_cast<T>(cfg.gamma)));
  return out;
}

template <typename T>
Var<T> total_branch_loss(const LossConfig& cfg, const LossNet<T>& net, const Tensor<T>& content, const Tensor<T>& style,
                         const Var<T>& output, std::size_t k) {
  require(k < cfg.branch_scales.size(), "range", "branch index " + std::to_string(k) + " out of range");
  require(content.shape() == output.shape(), "shape", "content and output differ in size");
  std::map<std::string, Var<T>> ct;
  {
    NoGradGuard guard;
    ct = net.extract(content);
  }
  return branch_loss(cfg, net, ct, make_style_target(net, style, cfg.branch_scales[k]), output, k).total;
}

}  // namespace spyr
