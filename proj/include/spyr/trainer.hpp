#pragma once

// Training configuration, the content-image pipeline, and the two training
// strategies: progressive round-robin over branches and incremental branch
// augmentation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spyr/adam.hpp"
#include "spyr/arch.hpp"
#include "spyr/generator.hpp"
#include "spyr/image.hpp"
#include "spyr/lossnet.hpp"
#include "spyr/textures.hpp"

namespace spyr {

// ---------------------------------------------------------------- configuration

struct TrainConfig {
  std::string dataset = "synthetic";  // directory of PNGs, or "synthetic"
  std::size_t synthetic_images = 64;
  std::size_t resolution = 96;
  std::size_t iterations = 2000;
  std::size_t batch_size = 4;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::size_t log_every = 50;
  LossConfig loss;
  ArchSpec arch = default_arch();
  std::string lossnet_weights;  // optional SPLN file
  std::uint64_t lossnet_seed = LossNetSpec{}.seed;

  void validate() const {
    check_arch(arch);
    loss.validate();
    require(loss.branch_scales == arch.branch_scales, "config", "loss and arch branch scales disagree");
    require(iterations > 0, "config", "iterations must be positive");
    require(batch_size > 0, "config", "batch_size must be positive");
    require(learning_rate > 0 && std::isfinite(learning_rate), "config", "learning_rate must be positive");
    const auto s = static_cast<std::size_t>(encoder_stride(arch));
    require(resolution >= LossNet<float>::kMinSize && resolution % s == 0, "config",
            "resolution must be >= 32 and a multiple of the encoder stride " + std::to_string(s));
    for (double t : loss.branch_scales)
      require(t >= static_cast<double>(LossNet<float>::kMinSize), "config", "every branch scale must be >= 32");
  }

  std::map<std::string, std::string> to_kv() const {
    auto kv = arch_to_kv(arch);
    kv["dataset"] = dataset;
    kv["synthetic_images"] = std::to_string(synthetic_images);
    kv["resolution"] = std::to_string(resolution);
    kv["iterations"] = std::to_string(iterations);
    kv["batch_size"] = std::to_string(batch_size);
    kv["learning_rate"] = format_doubles({learning_rate});
    kv["seed"] = std::to_string(seed);
    kv["log_every"] = std::to_string(log_every);
    kv["alpha"] = format_doubles({loss.alpha});
    kv["beta"] = format_doubles(loss.beta);
    kv["gamma"] = format_doubles({loss.gamma});
    if (!lossnet_weights.empty()) kv["lossnet.weights"] = lossnet_weights;
    kv["lossnet.seed"] = std::to_string(lossnet_seed);
    return kv;
  }

  /// Unknown keys are an error so typos do not silently fall back to defaults.
  static TrainConfig from_kv(const std::map<std::string, std::string>& kv) {
    TrainConfig c;
    auto size = [](const std::string& v, const std::string& key) {
      const double d = parse_double(v, key);
      require(d >= 0 && d == std::floor(d), "config", key + " must be a non-negative integer");
      return static_cast<std::size_t>(d);
    };
    auto u64 = [](const std::string& v, const std::string& key) {
      require(!v.empty() && v.find_first_not_of("0123456789") == std::string::npos, "config",
              key + " must be a non-negative integer, got '" + v + "'");
      try {
        return static_cast<std::uint64_t>(std::stoull(v));
      } catch (const std::exception&) {
        fail("config", key + " is out of range");
      }
    };
    std::map<std::string, std::string> arch_kv;
    bool beta_given = false;
    for (const auto& [key, v] : kv) {
      if (key.rfind("arch.", 0) == 0) {
        arch_kv[key] = v;
      } else if (key == "dataset") {
        c.dataset = v;
      } else if (key == "synthetic_images") {
        c.synthetic_images = size(v, key);
      } else if (key == "resolution") {
        c.resolution = size(v, key);
      } else if (key == "iterations") {
        c.iterations = size(v, key);
      } else if (key == "batch_size") {
        c.batch_size = size(v, key);
      } else if (key == "learning_rate") {
        c.learning_rate = parse_double(v, key);
      } else if (key == "seed") {
        c.seed = u64(v, key);
      } else if (key == "log_every") {
        c.log_every = size(v, key);
      } else if (key == "alpha") {
        c.loss.alpha = parse_double(v, key);
      } else if (key == "beta") {
        c.loss.beta = parse_doubles(v, key);
        beta_given = true;
      } else if (key == "gamma") {
        c.loss.gamma = parse_double(v, key);
      } else if (key == "lossnet.weights") {
        c.lossnet_weights = v;
      } else if (key == "lossnet.seed") {
        c.lossnet_seed = u64(v, key);
      } else {
        fail("config", "unknown config key '" + key + "'");
      }
    }
    c.arch = arch_from_kv(arch_kv);
    c.loss.branch_scales = c.arch.branch_scales;
    if (beta_given && c.loss.beta.size() == 1) c.loss.beta.assign(c.arch.num_branches(), c.loss.beta.front());
    if (!beta_given) c.loss.beta.assign(c.arch.num_branches(), LossConfig{}.beta.front());
    c.validate();
    return c;
  }
};

inline TrainConfig load_config(const std::string& path) { return TrainConfig::from_kv(parse_kv(read_file(path))); }

inline LossNet<float> make_lossnet(const TrainConfig& cfg) {
  if (!cfg.lossnet_weights.empty()) return LossNet<float>::from_bytes(read_file(cfg.lossnet_weights));
  LossNetSpec spec;
  spec.seed = cfg.lossnet_seed;
  return LossNet<float>(spec);
}

// ---------------------------------------------------------------- data

/// Content images, each center-cropped and resized to the training resolution.
class Dataset {
 public:
  static Dataset synthetic(std::size_t count, std::size_t resolution, std::uint64_t seed) {
    require(count > 0, "empty_dataset", "synthetic dataset needs at least one image");
    Dataset d;
    Rng rng = derive_rng(seed, "synthetic-scenes");
    for (std::size_t i = 0; i < count; ++i) d.images_.push_back(synthetic_scene(rng, resolution, resolution));
    return d;
  }

  /// Every *.png in `dir` in name order. Undecodable files are skipped with a
  /// warning on `warn`; a directory with nothing usable is an error.
  static Dataset from_directory(const std::string& dir, std::size_t resolution, std::ostream& warn = std::cerr) {
    require(std::filesystem::is_directory(dir), "io", "dataset directory '" + dir + "' does not exist");
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
      auto ext = e.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (e.is_regular_file() && ext == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    require(!files.empty(), "empty_dataset", "no PNG files in '" + dir + "'");
    Dataset d;
    for (const auto& f : files) {
      try {
        d.images_.push_back(crop_and_resize(read_image(f.string()), resolution));
      } catch (const Error& e) {
        warn << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      }
    }
    require(!d.images_.empty(), "empty_dataset", "no decodable PNG files in '" + dir + "'");
    return d;
  }

  static Dataset from_images(std::vector<Tensor<float>> images, std::size_t resolution) {
    require(!images.empty(), "empty_dataset", "dataset is empty");
    Dataset d;
    for (auto& im : images) d.images_.push_back(crop_and_resize(im, resolution));
    return d;
  }

  static Dataset from_config(const TrainConfig& cfg, std::ostream& warn = std::cerr) {
    if (cfg.dataset == "synthetic") return synthetic(cfg.synthetic_images, cfg.resolution, cfg.seed);
    return from_directory(cfg.dataset, cfg.resolution, warn);
  }

  std::size_t size() const { return images_.size(); }
  const Tensor<float>& image(std::size_t i) const { return images_.at(i); }

  /// `n` images drawn uniformly with replacement, stacked into a batch.
  Tensor<float> load_batch(Rng& rng, std::size_t n) const {
    std::vector<Tensor<float>> picked;
    picked.reserve(n);
    for (std::size_t i = 0; i < n; ++i) picked.push_back(images_[rng.below(images_.size())]);
    return stack<float>(picked);
  }

 private:
  std::vector<Tensor<float>> images_;
};

// ---------------------------------------------------------------- logs

struct TrainRecord {
  std::size_t iteration = 0;
  std::size_t branch = 0;
  double content = 0;
  double stroke = 0;
  double tv = 0;
  double total = 0;

  friend bool operator==(const TrainRecord&, const TrainRecord&) = default;
};

struct TrainLog {
  std::vector<TrainRecord> records;

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "iteration,k,L_c,L_stroke,L_tv,total\n";
    for (const auto& r : records)
      os << r.iteration << ',' << r.branch << ',' << r.content << ',' << r.stroke << ',' << r.tv << ',' << r.total << '\n';
    return os.str();
  }

  /// Stroke losses of the records that trained branch `k`, in order.
  std::vector<double> stroke_series(std::size_t k) const {
    std::vector<double> out;
    for (const auto& r : records)
      if (r.branch == k) out.push_back(r.stroke);
    return out;
  }

  friend bool operator==(const TrainLog&, const TrainLog&) = default;
};

/// Trailing mean over `window` entries; entry i averages [i-window+1, i].
inline std::vector<double> trailing_mean(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  double acc = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i];
    if (i >= window) acc -= v[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

/// Number of entries consumed before the trailing mean over a full window first
/// drops below `threshold`; nullopt when it never does.
inline std::optional<std::size_t> steps_to_threshold(const std::vector<double>& v, std::size_t window, double threshold) {
  const auto m = trailing_mean(v, window);
  for (std::size_t i = window - 1; i < m.size(); ++i)
    if (m[i] < threshold) return i + 1;
  return std::nullopt;
}

// ---------------------------------------------------------------- progressive training

struct TrainHooks {
  /// Called after each recorded iteration.
  std::function<void(const TrainRecord&)> on_record;
  /// Checked after each iteration; returning true ends training early.
  std::function<bool(const TrainLog&)> stop;
  /// Branch visited at iteration t is schedule[t % schedule.size()]; empty means 0..K-1.
  std::vector<std::size_t> schedule;
};

/// Optimizer state that persists across calls, keyed by parameter name.
struct OptimizerState {
  std::map<std::string, AdamState<float>> adam;
};

namespace detail {

inline std::vector<StyleTarget<float>> style_targets(const LossNet<float>& net, const Tensor<float>& style,
                                                     const std::vector<double>& scales) {
  std::vector<StyleTarget<float>> out;
  for (double s : scales) out.push_back(make_style_target(net, style, s));
  return out;
}

/// Turns a non-finite failure inside one iteration into a divergence report.
template <typename F>
auto guard_divergence(std::size_t t, std::size_t k, F&& body) {
  try {
    return body();
  } catch (const Error& e) {
    if (e.code() != "non_finite") throw;
    fail("divergence", "iteration " + std::to_string(t) + " (branch " + std::to_string(k) +
                           "): non-finite value, training aborted: " + e.what());
  }
}

}  // namespace detail

/// Iteration t trains branch k = t mod K with one-hot gating on k. The loss
/// gradient reaches every parameter on k's path (encoder, branches 0..k,
/// decoder); later branches are untouched that iteration.
inline TrainLog progressive_train(Generator<float>& model, const TrainConfig& cfg, const Tensor<float>& style,
                                  const LossNet<float>& net, const Dataset& data, OptimizerState& opt,
                                  const TrainHooks& hooks = {}) {
  cfg.validate();
  require(model.arch().branch_scales == cfg.loss.branch_scales, "config", "model and config branch scales disagree");
  const std::size_t K = model.num_branches();
  std::vector<std::size_t> schedule = hooks.schedule;
  if (schedule.empty())
    for (std::size_t k = 0; k < K; ++k) schedule.push_back(k);
  for (std::size_t k : schedule) require(k < K, "config", "schedule names a branch the model does not have");

  const auto targets = detail::style_targets(net, style, cfg.loss.branch_scales);
  AdamConfig adam;
  adam.lr = cfg.learning_rate;
  Rng batches = derive_rng(cfg.seed, "batches");
  TrainLog log;
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const std::size_t k = schedule[t % schedule.size()];
    const Tensor<float> batch = data.load_batch(batches, cfg.batch_size);
    TrainRecord rec = detail::guard_divergence(t, k, [&] {
      std::map<std::string, Var<float>> ct;
      {
        NoGradGuard guard;
        ct = net.extract(batch);
      }
      const Var<float> out = model.decode(model.branch_features(Var<float>(batch), k));
      const BranchLoss<float> l = branch_loss(cfg.loss, net, ct, targets[k], out, k);
      backward(l.total);
      return TrainRecord{t, k, l.content, l.stroke, l.tv, static_cast<double>(l.total.value().item())};
    });
    require(std::isfinite(rec.total), "divergence", "iteration " + std::to_string(t) + ": loss is not finite");
    for (const auto& name : model.active_param_names(k)) {
      Var<float>& p = model.params().at(name);
      adam_step(p.mutable_value(), p.grad(), opt.adam[name], adam);
      p.zero_grad();
    }
    log.records.push_back(rec);
    if (hooks.on_record) hooks.on_record(rec);
    if (hooks.stop && hooks.stop(log)) break;
  }
  return log;
}

inline TrainLog progressive_train(Generator<float>& model, const TrainConfig& cfg, const Tensor<float>& style,
                                  const LossNet<float>& net, const Dataset& data, const TrainHooks& hooks = {}) {
  OptimizerState opt;
  return progressive_train(model, cfg, style, net, data, opt, hooks);
}

// ---------------------------------------------------------------- incremental training

namespace detail {

/// Marks parameters as constants for the guard's lifetime so backward skips their gradients.
class FreezeGuard {
 public:
  FreezeGuard(Generator<float>& model, const std::vector<std::string>& names) {
    for (const auto& n : names) {
      Node<float>* node = model.params().at(n).node();
      if (node->requires_grad) {
        node->requires_grad = false;
        frozen_.push_back(node);
      }
    }
  }
  ~FreezeGuard() {
    for (Node<float>* n : frozen_) n->requires_grad = true;
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Node<float>*> frozen_;
};

}  // namespace detail

struct IncrementalResult {
  TrainLog log;
  BranchPlan plan;
};

/// Appends one branch for `new_scale` and trains only its parameters on the new
/// scale's loss. `cfg` gains the new scale and a beta equal to the last one
/// unless `new_beta` is given. Everything else stays bit-identical.
inline IncrementalResult incremental_train(Generator<float>& model, TrainConfig& cfg, const Tensor<float>& style,
                                           double new_scale, const LossNet<float>& net, const Dataset& data,
                                           const TrainHooks& hooks = {}, std::optional<double> new_beta = {}) {
  cfg.validate();
  require(new_scale >= static_cast<double>(LossNet<float>::kMinSize), "rejected_scale", "new scale must be >= 32");
  IncrementalResult res;
  res.plan = plan_incremental_branch(model.arch(), new_scale);
  const auto before = model.export_tensors();
  const std::vector<std::string> frozen_names = model.active_param_names(model.num_branches() - 1);

  const std::size_t k = model.num_branches();
  model.append_branch(res.plan.layers, new_scale, derive_rng(cfg.seed, "branch." + std::to_string(k)).next_u64());
  cfg.arch = model.arch();
  cfg.loss.branch_scales = cfg.arch.branch_scales;
  cfg.loss.beta.push_back(new_beta.value_or(cfg.loss.beta.back()));
  cfg.validate();

  const StyleTarget<float> target = make_style_target(net, style, new_scale);
  const auto trainable = model.branch_param_names(k);
  AdamConfig adam;
  adam.lr = cfg.learning_rate;
  OptimizerState opt;
  Rng batches = derive_rng(cfg.seed, "batches");
  {
    detail::FreezeGuard freeze(model, frozen_names);
    for (std::size_t t = 0; t < cfg.iterations; ++t) {
      const Tensor<float> batch = data.load_batch(batches, cfg.batch_size);
      TrainRecord rec = detail::guard_divergence(t, k, [&] {
        std::map<std::string, Var<float>> ct;
        Var<float> prefix;
        {
          NoGradGuard guard;
          ct = net.extract(batch);
          prefix = model.branch_features(Var<float>(batch), k - 1);
        }
        const Var<float> out = model.decode(model.extend_branch(prefix, k));
        const BranchLoss<float> l = branch_loss(cfg.loss, net, ct, target, out, k);
        backward(l.total);
        return TrainRecord{t, k, l.content, l.stroke, l.tv, static_cast<double>(l.total.value().item())};
      });
      require(std::isfinite(rec.total), "divergence", "iteration " + std::to_string(t) + ": loss is not finite");
      for (const auto& name : trainable) {
        Var<float>& p = model.params().at(name);
        adam_step(p.mutable_value(), p.grad(), opt.adam[name], adam);
        p.zero_grad();
      }
      res.log.records.push_back(rec);
      if (hooks.on_record) hooks.on_record(rec);
      if (hooks.stop && hooks.stop(res.log)) break;
    }
  }
  const auto after = model.export_tensors();
  for (const auto& [name, t] : before)
    require(after.at(name) == t, "frozen_drift", "frozen parameter '" + name + "' changed during incremental training");
  return res;
}

// ---------------------------------------------------------------- checkpoint metadata

inline std::map<std::string, std::string> training_metadata(const TrainConfig& cfg, const LossNet<float>& net,
                                                            std::size_t iterations, const std::string& style_path) {
  std::map<std::string, std::string> m;
  for (const auto& [k, v] : cfg.to_kv())
    if (k.rfind("arch.", 0) != 0) m["meta.train." + k] = v;
  m["meta.iterations"] = std::to_string(iterations);
  m["meta.lossnet_hash"] = net.spec_hash();
  if (!style_path.empty()) m["meta.style"] = style_path;
  return m;
}

/// Rebuilds the training configuration stored in a checkpoint's metadata.
inline TrainConfig config_from_metadata(const ModelCheckpoint& ck) {
  std::map<std::string, std::string> kv = arch_to_kv(ck.model.arch());
  const std::string prefix = "meta.train.";
  for (const auto& [k, v] : ck.metadata)
    if (k.rfind(prefix, 0) == 0) kv[k.substr(prefix.size())] = v;
  return TrainConfig::from_kv(kv);
}

}  // namespace spyr
