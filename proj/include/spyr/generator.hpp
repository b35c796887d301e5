#pragma once

// The stroke-controllable generator: pre-encoder, StrokePyramid branches with
// gating, and a single shared stroke decoder.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spyr/arch.hpp"
#include "spyr/autograd.hpp"
#include "spyr/records.hpp"
#include "spyr/rng.hpp"

namespace spyr {

/// Convex per-branch weights applied to branch features before decoding.
struct GatingVector {
  std::vector<double> a;

  static GatingVector one_hot(std::size_t k, std::size_t i) {
    GatingVector g{std::vector<double>(k, 0.0)};
    g.a.at(i) = 1.0;
    return g;
  }

  std::size_t size() const { return a.size(); }

  /// Index of the single unit weight, if this is one-hot.
  std::optional<std::size_t> hot_index() const {
    std::optional<std::size_t> hot;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i] == 1.0 && !hot) {
        hot = i;
      } else if (a[i] != 0.0) {
        return std::nullopt;
      }
    }
    return hot;
  }

  void validate(std::size_t k) const {
    require(a.size() == k, "gating",
            "gating vector has " + std::to_string(a.size()) + " entries, model has " + std::to_string(k) + " branches");
    double s = 0;
    for (double v : a) {
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, "gating", "gating weights must lie in [0, 1]");
      s += v;
    }
    require(std::abs(s - 1.0) <= 1e-6, "gating", "gating weights must sum to 1");
  }
};

template <typename T = float>
class Generator {
 public:
  Generator(ArchSpec arch, std::uint64_t seed) : arch_(std::move(arch)) {
    check_arch(arch_);
    for_each_layer([&](const std::string& prefix, const LayerSpec& l, int cin) { init_layer(prefix, l, cin, seed); });
  }

  /// Adopts stored tensors; every expected parameter must be present with the right shape.
  Generator(ArchSpec arch, const std::map<std::string, Tensor<float>>& tensors) : arch_(std::move(arch)) {
    check_arch(arch_);
    for_each_layer([&](const std::string& prefix, const LayerSpec& l, int cin) {
      for (const auto& [name, shape] : layer_param_shapes(prefix, l, cin)) {
        auto it = tensors.find(name);
        require(it != tensors.end(), "truncated", "checkpoint is missing parameter '" + name + "'");
        require(it->second.shape() == shape, "format",
                "parameter '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                    shape_str(shape));
        params_.emplace(name, Var<T>(it->second.template cast<T>(), true));
      }
    });
    require(params_.size() == tensors.size(), "format", "checkpoint holds parameters the architecture does not use");
  }

  Generator(const Generator& other) : arch_(other.arch_) {
    for (const auto& [name, v] : other.params_) params_.emplace(name, Var<T>(v.value(), true));
  }
  Generator& operator=(const Generator& other) {
    if (this != &other) *this = Generator(other);
    return *this;
  }
  Generator(Generator&&) noexcept = default;
  Generator& operator=(Generator&&) noexcept = default;

  const ArchSpec& arch() const { return arch_; }
  std::size_t num_branches() const { return arch_.num_branches(); }
  const std::map<std::string, Var<T>>& params() const { return params_; }
  std::map<std::string, Var<T>>& params() { return params_; }

  /// Parameter names on the path that produces branch k's output image:
  /// encoder, branches 0..k and decoder.
  std::vector<std::string> active_param_names(std::size_t k) const {
    std::vector<std::string> out;
    for (const auto& [name, v] : params_) {
      if (name.rfind("branch.", 0) == 0) {
        const std::size_t b = std::stoul(name.substr(7));
        if (b > k) continue;
      }
      out.push_back(name);
    }
    return out;
  }

  std::vector<std::string> branch_param_names(std::size_t k) const {
    std::vector<std::string> out;
    const std::string prefix = "branch." + std::to_string(k) + ".";
    for (const auto& [name, v] : params_)
      if (name.rfind(prefix, 0) == 0) out.push_back(name);
    return out;
  }

  void check_image(const Tensor<T>& image) const {
    const Tensor<T>& x = image;
    require(x.rank() == 4, "shape", "generator input must be N x C x H x W");
    require(x.dim(1) == static_cast<std::size_t>(arch_.in_channels), "shape",
            "generator expects " + std::to_string(arch_.in_channels) + " channels, got " + std::to_string(x.dim(1)));
    const auto s = static_cast<std::size_t>(encoder_stride(arch_));
    require(x.dim(2) % s == 0 && x.dim(3) % s == 0 && x.dim(2) > 0 && x.dim(3) > 0, "shape",
            "image size " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                " is not a multiple of the encoder stride " + std::to_string(s));
    require(x.all_finite(), "non_finite", "input image contains non-finite values");
  }

  Var<T> encode(const Var<T>& x) const {
    Var<T> y = x;
    for (std::size_t i = 0; i < arch_.encoder.size(); ++i) y = apply_layer("enc." + std::to_string(i), arch_.encoder[i], y);
    return y;
  }

  /// Applies branch k's own layers to its predecessor's output.
  Var<T> extend_branch(const Var<T>& prev, std::size_t k) const {
    Var<T> y = prev;
    const auto& layers = arch_.branches.at(k);
    for (std::size_t i = 0; i < layers.size(); ++i)
      y = apply_layer("branch." + std::to_string(k) + "." + std::to_string(i), layers[i], y);
    return y;
  }

  /// Encoder followed by branches 0..k: the features of branch k alone.
  Var<T> branch_features(const Var<T>& x, std::size_t k) const {
    require(k < num_branches(), "range", "branch index out of range");
    Var<T> y = encode(x);
    for (std::size_t b = 0; b <= k; ++b) y = extend_branch(y, b);
    return y;
  }

  /// All K branch feature maps; the shared prefix is evaluated once.
  std::vector<Var<T>> forward_branch_features(const Var<T>& x) const {
    check_image(x.value());
    std::vector<Var<T>> out;
    Var<T> y = encode(x);
    for (std::size_t b = 0; b < num_branches(); ++b) {
      y = extend_branch(y, b);
      out.push_back(y);
    }
    return out;
  }

  std::vector<Var<T>> forward_branch_features(const Tensor<T>& image) const {
    return forward_branch_features(Var<T>(as_batch(image)));
  }

  Var<T> decode(const Var<T>& features) const {
    Var<T> y = features;
    for (std::size_t i = 0; i < arch_.decoder.size(); ++i) y = apply_layer("dec." + std::to_string(i), arch_.decoder[i], y);
    return y;
  }

  /// Sum_i a_i F_i, formed once before decoding.
  Var<T> mix(const std::vector<Var<T>>& features, const GatingVector& a) const {
    a.validate(num_branches());
    require(features.size() == num_branches(), "gating", "expected one feature map per branch");
    if (auto hot = a.hot_index()) return features[*hot];
    Var<T> acc;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (a.a[i] == 0.0) continue;
      Var<T> term = scale(features[i], static_cast<T>(a.a[i]));
      acc = acc.defined() ? add(acc, term) : term;
    }
    return acc;
  }

  Tensor<T> gate_and_decode(const std::vector<Var<T>>& features, const GatingVector& a) const {
    NoGradGuard guard;
    return decode(mix(features, a)).value();
  }

  Tensor<T> stylize(const Tensor<T>& image, const GatingVector& a) const {
    NoGradGuard guard;
    a.validate(num_branches());
    const Tensor<T> x = as_batch(image);
    check_image(x);
    Tensor<T> out;
    if (auto hot = a.hot_index()) {
      out = decode(branch_features(Var<T>(x), *hot)).value();
    } else {
      out = gate_and_decode(forward_branch_features(Var<T>(x)), a);
    }
    return image.rank() == 3 ? out.reshaped({out.dim(1), out.dim(2), out.dim(3)}) : out;
  }

  /// Appends a branch described by `layers`, initialized from `seed`.
  void append_branch(const std::vector<LayerSpec>& layers, double scale_px, std::uint64_t seed) {
    ArchSpec next = arch_;
    next.branches.push_back(layers);
    next.branch_scales.push_back(scale_px);
    check_arch(next);
    const std::size_t k = arch_.branches.size();
    arch_ = std::move(next);
    int cin = arch_.encoder.back().out_channels;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      init_layer("branch." + std::to_string(k) + "." + std::to_string(i), layers[i], cin, seed);
      if (layers[i].kind == LayerKind::conv) cin = layers[i].out_channels;
    }
  }

  std::map<std::string, Tensor<float>> export_tensors() const {
    std::map<std::string, Tensor<float>> out;
    for (const auto& [name, v] : params_) out.emplace(name, v.value().template cast<float>());
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : params_) n += v.value().size();
    return n;
  }

 private:
  template <typename F>
  void for_each_layer(F&& f) const {
    int c = arch_.in_channels;
    auto walk = [&](const std::string& prefix, const std::vector<LayerSpec>& chain) {
      for (std::size_t i = 0; i < chain.size(); ++i) {
        f(prefix + std::to_string(i), chain[i], c);
        if (chain[i].kind == LayerKind::conv) c = chain[i].out_channels;
      }
    };
    walk("enc.", arch_.encoder);
    for (std::size_t b = 0; b < arch_.branches.size(); ++b) walk("branch." + std::to_string(b) + ".", arch_.branches[b]);
    walk("dec.", arch_.decoder);
  }

  static std::vector<std::pair<std::string, Shape>> layer_param_shapes(const std::string& prefix, const LayerSpec& l,
                                                                       int cin) {
    std::vector<std::pair<std::string, Shape>> out;
    if (l.kind != LayerKind::conv) return out;
    const auto co = static_cast<std::size_t>(l.out_channels);
    const auto k = static_cast<std::size_t>(l.kernel);
    out.emplace_back(prefix + ".weight", Shape{co, static_cast<std::size_t>(cin), k, k});
    if (l.post == PostOp::in_relu) {
      out.emplace_back(prefix + ".gain", Shape{co});
      out.emplace_back(prefix + ".shift", Shape{co});
    } else {
      out.emplace_back(prefix + ".bias", Shape{co});
    }
    return out;
  }

  void init_layer(const std::string& prefix, const LayerSpec& l, int cin, std::uint64_t seed) {
    for (auto& [name, shape] : layer_param_shapes(prefix, l, cin)) {
      Tensor<T> t(shape);
      if (name.ends_with(".weight")) {
        const double fan_in = static_cast<double>(cin * l.kernel * l.kernel);
        const double std = std::sqrt((l.post == PostOp::in_relu ? 2.0 : 1.0) / fan_in);
        Rng rng = derive_rng(seed, name);
        for (auto& v : t.data()) v = static_cast<T>(std * rng.normal());
      } else if (name.ends_with(".gain")) {
        for (auto& v : t.data()) v = T(1);
      }
      params_.insert_or_assign(name, Var<T>(std::move(t), true));
    }
  }

  const Var<T>& param(const std::string& name) const {
    auto it = params_.find(name);
    require(it != params_.end(), "format", "missing parameter '" + name + "'");
    return it->second;
  }

  Var<T> apply_layer(const std::string& prefix, const LayerSpec& l, const Var<T>& x) const {
    switch (l.kind) {
      case LayerKind::identity_tap:
        return x;
      case LayerKind::resize_up:
        return resize_bilinear(x, x.shape()[2] * 2, x.shape()[3] * 2);
      case LayerKind::conv:
        break;
    }
    const auto s = static_cast<std::size_t>(l.stride), p = static_cast<std::size_t>(l.padding);
    if (l.post == PostOp::in_relu) {
      Var<T> y = conv2d(x, param(prefix + ".weight"), s, p);
      return relu(instance_norm(y, param(prefix + ".gain"), param(prefix + ".shift")));
    }
    Var<T> y = conv2d(x, param(prefix + ".weight"), param(prefix + ".bias"), s, p);
    return l.post == PostOp::sigmoid ? sigmoid(y) : y;
  }

  ArchSpec arch_;
  std::map<std::string, Var<T>> params_;
};

// ---------------------------------------------------------------- checkpoints

inline constexpr const char* kModelMagic = "SPYR";

/// A generator plus free-form training metadata (`meta.*` keys).
struct ModelCheckpoint {
  Generator<float> model;
  std::map<std::string, std::string> metadata;
};

inline std::string encode_checkpoint(const Generator<float>& model, const std::map<std::string, std::string>& metadata) {
  RecordFile rf;
  rf.text = arch_to_kv(model.arch());
  for (const auto& [k, v] : metadata) {
    require(k.rfind("meta.", 0) == 0, "format", "metadata keys must start with 'meta.': " + k);
    rf.text[k] = v;
  }
  rf.tensors = model.export_tensors();
  return encode_records(kModelMagic, rf);
}

inline ModelCheckpoint decode_checkpoint(const std::string& bytes) {
  RecordFile rf = decode_records(kModelMagic, bytes);
  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : rf.text)
    if (k.rfind("meta.", 0) == 0) meta[k] = v;
  return {Generator<float>(arch_from_kv(rf.text), rf.tensors), std::move(meta)};
}

inline void save_checkpoint(const std::string& path, const Generator<float>& model,
                            const std::map<std::string, std::string>& metadata = {}) {
  write_file(path, encode_checkpoint(model, metadata));
}

inline ModelCheckpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path)); }

}  // namespace spyr
