// Acceptance run for the desk profile: 96x96 content, branch scales 48/96/144,
// K = 3, synthetic checkerboard style, fixed seeds. Prints one PASS/FAIL line
// per criterion and exits nonzero if any fails.

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "spyr/service.hpp"
#include "spyr/stylizer.hpp"
#include "spyr/trainer.hpp"
#include "test_util.hpp"

extern char** environ;

using namespace spyr;
using namespace spyr::testing;

namespace {

// ---------------------------------------------------------------- pinned tolerances

constexpr double kOpGradTol = 1e-4;
constexpr double kLossGradTol = 1e-3;
constexpr double kGradSuiteSeconds = 60;
constexpr double kGramOracleTol = 1e-6;
constexpr double kPsdTol = -1e-6;
constexpr int kGramMaps = 100;
constexpr int kRandomChains = 50;
constexpr double kScaleGap = 0.05;
constexpr std::size_t kDeskIterations = 2000;
constexpr double kDropRatio = 0.40;
constexpr double kProgressiveSlack = 1.10;
constexpr double kProgressiveSeconds = 15 * 60;
constexpr double kIncrementalRatio = 0.60;
constexpr double kConvergedFactor = 1.5;
constexpr std::size_t kSmoothWindow = 15;
constexpr double kNewScale = 192;
constexpr std::size_t kIncrementalCap = 500;
constexpr double kRecomposeTol = 1e-6;
constexpr std::size_t kDeterminismIterations = 30;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean_of_first(const std::vector<double>& v, std::size_t n) {
  n = std::min(n, v.size());
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return n ? s / static_cast<double>(n) : 0.0;
}

/// Stops once the trailing mean of branch k's stroke loss is below `threshold`.
TrainHooks stop_below(std::size_t k, double threshold, std::size_t log_every, const std::string& tag) {
  TrainHooks h;
  h.stop = [=](const TrainLog& log) {
    const auto s = log.stroke_series(k);
    if (s.size() < kSmoothWindow) return false;
    return trailing_mean(s, kSmoothWindow).back() < threshold;
  };
  h.on_record = [=](const TrainRecord& r) {
    if ((r.iteration + 1) % log_every == 0)
      std::cerr << "  [" << tag << "] iter " << r.iteration + 1 << " k=" << r.branch << " stroke=" << num(r.stroke)
                << "\n";
  };
  return h;
}

TrainHooks progress(std::size_t log_every, const std::string& tag) {
  TrainHooks h;
  h.on_record = [=](const TrainRecord& r) {
    if ((r.iteration + 1) % log_every == 0)
      std::cerr << "  [" << tag << "] iter " << r.iteration + 1 << " k=" << r.branch << " stroke=" << num(r.stroke)
                << " total=" << num(r.total) << "\n";
  };
  return h;
}

// ---------------------------------------------------------------- desk state

struct Desk {
  TrainConfig cfg;
  LossNet<float> net;
  Tensor<float> style;
  Dataset data;
  std::filesystem::path artifacts;

  std::optional<Generator<float>> model;  // after the progressive run
  TrainLog log;
  double seconds = 0;

  explicit Desk(std::size_t iterations, std::filesystem::path dir)
      : cfg(make_cfg(iterations)),
        net(make_lossnet(cfg)),
        style(checkerboard(128, 128, 16)),
        data(Dataset::from_config(cfg)),
        artifacts(std::move(dir)) {
    std::filesystem::create_directories(artifacts);
  }

  static TrainConfig make_cfg(std::size_t iterations) {
    TrainConfig c;
    c.resolution = 96;
    c.synthetic_images = 64;
    c.batch_size = 1;
    c.iterations = iterations;
    c.learning_rate = 1e-3;
    c.seed = 2024;
    c.log_every = 250;
    c.validate();
    return c;
  }

  const Generator<float>& trained() {
    if (!model) {
      std::cerr << "progressive desk run: " << cfg.iterations << " iterations\n";
      Generator<float> g(cfg.arch, cfg.seed);
      const auto t0 = std::chrono::steady_clock::now();
      log = progressive_train(g, cfg, style, net, data, progress(cfg.log_every, "progressive"));
      seconds = seconds_since(t0);
      model = std::move(g);
      write_file((artifacts / "progressive_log.csv").string(), log.to_csv());
      save_checkpoint((artifacts / "desk.spyr").string(), *model, training_metadata(cfg, net, log.records.size(), ""));
    }
    return *model;
  }

  std::vector<Tensor<float>> eval_images(std::size_t n) const {
    Rng rng = derive_rng(cfg.seed, "eval");
    std::vector<Tensor<float>> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(synthetic_scene(rng, cfg.resolution, cfg.resolution));
    return out;
  }
};

// ---------------------------------------------------------------- 1. gradients

Outcome criterion_gradients() {
  using Vs = std::vector<Var<double>>;
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(11);
  double op_worst = 0, loss_worst = 0;
  std::string op_name, loss_name;
  auto op = [&](const std::string& name, double err) {
    if (err >= op_worst) op_worst = err, op_name = name;
  };
  auto loss = [&](const std::string& name, double err) {
    if (err >= loss_worst) loss_worst = err, loss_name = name;
  };

  const auto a = random_tensor<double>({2, 3, 5, 6}, rng), b = random_tensor<double>({2, 3, 5, 6}, rng);
  const auto w = random_tensor<double>({2, 3, 5, 6}, rng);
  auto dot = [&](const Var<double>& x) { return sum(mul(x, Var<double>(w))); };
  op("add", gradcheck([&](const Vs& v) { return dot(add(v[0], v[1])); }, {a, b}));
  op("sub", gradcheck([&](const Vs& v) { return dot(sub(v[0], v[1])); }, {a, b}));
  op("mul", gradcheck([&](const Vs& v) { return dot(mul(v[0], v[1])); }, {a, b}));
  op("scale", gradcheck([&](const Vs& v) { return dot(scale(v[0], -1.3)); }, {a}));
  op("square", gradcheck([&](const Vs& v) { return dot(square(v[0])); }, {a}));
  op("relu", gradcheck([&](const Vs& v) { return dot(relu(v[0])); }, {a}));
  op("sigmoid", gradcheck([&](const Vs& v) { return dot(sigmoid(v[0])); }, {a}));
  op("sum", gradcheck([&](const Vs& v) { return sum(v[0]); }, {a}));
  op("mean", gradcheck([&](const Vs& v) { return mean(square(v[0])); }, {a}));
  op("mse", gradcheck([&](const Vs& v) { return mse(v[0], v[1]); }, {a, b}));
  const auto gain = random_tensor<double>({3}, rng, 0.5, 1.5), shift = random_tensor<double>({3}, rng);
  op("instance_norm", gradcheck([&](const Vs& v) { return dot(instance_norm(v[0], v[1], v[2])); }, {a, gain, shift}));
  const auto fm = random_tensor<double>({2, 4, 3, 5}, rng), gw = random_tensor<double>({2, 4, 4}, rng);
  op("gram", gradcheck([&](const Vs& v) { return sum(mul(gram(v[0]), Var<double>(gw))); }, {fm}));
  for (auto [oh, ow] : {std::pair<std::size_t, std::size_t>{10, 12}, {3, 4}, {7, 9}}) {
    const auto up = random_tensor<double>({2, 3, oh, ow}, rng);
    op("resize_bilinear", gradcheck([&](const Vs& v) { return sum(mul(resize_bilinear(v[0], oh, ow), Var<double>(up))); },
                                    {a}));
  }
  const auto img = random_tensor<double>({2, 3, 8, 9}, rng);
  for (auto [k, stride] : {std::pair<std::size_t, std::size_t>{3, 1}, {5, 2}, {1, 1}, {9, 1}, {3, 2}}) {
    const auto kern = random_tensor<double>({4, 3, k, k}, rng), bias = random_tensor<double>({4}, rng);
    const std::size_t pad = k / 2;
    const std::size_t oh = (8 + 2 * pad - k) / stride + 1, ow = (9 + 2 * pad - k) / stride + 1;
    const auto up = random_tensor<double>({2, 4, oh, ow}, rng);
    op("conv2d", gradcheck([&](const Vs& v) { return sum(mul(conv2d(v[0], v[1], v[2], stride, pad), Var<double>(up))); },
                           {img, kern, bias}));
  }
  op("tv_loss", gradcheck([&](const Vs& v) { return tv_loss(v[0]); }, {a}));

  LossNet<double> net;
  LossConfig cfg;
  cfg.branch_scales = {32, 40, 48};
  const auto content = random_tensor<double>({1, 3, 32, 32}, rng, 0, 1);
  const auto style = checkerboard(48, 48, 4).cast<double>();
  const auto output = random_tensor<double>({1, 3, 32, 32}, rng, 0, 1);
  constexpr std::size_t kCoords = 300;
  loss("content", gradcheck([&](const Vs& v) { return content_loss(net, content, v[0]); }, {output}, 1e-4, kCoords));
  loss("stroke", gradcheck([&](const Vs& v) { return stroke_loss(net, style, 40.0, v[0]); }, {output}, 1e-4, kCoords));
  loss("tv", gradcheck([&](const Vs& v) { return tv_loss(v[0]); }, {output}, 1e-4, kCoords));
  for (std::size_t k = 0; k < 3; ++k)
    loss("total_branch_loss",
         gradcheck([&](const Vs& v) { return total_branch_loss(cfg, net, content, style, v[0], k); }, {output}, 1e-4,
                   kCoords));
  const double secs = seconds_since(t0);
  return {op_worst < kOpGradTol && loss_worst < kLossGradTol && secs < kGradSuiteSeconds,
          "ops worst " + num(op_worst, 3) + " (" + op_name + ") < " + num(kOpGradTol) + ", losses worst " +
              num(loss_worst, 3) + " (" + loss_name + ") < " + num(kLossGradTol) + ", " + num(secs, 3) + " s < " +
              num(kGradSuiteSeconds) + " s"};
}

// ---------------------------------------------------------------- 2. gram

Outcome criterion_gram() {
  Rng rng(22);
  double worst_oracle = 0, min_eig = 1e300;
  bool symmetric = true;
  for (int i = 0; i < kGramMaps; ++i) {
    const std::size_t c = 1 + rng.below(8), h = 1 + rng.below(9), w = 1 + rng.below(9);
    const auto f = random_tensor<double>({1, c, h, w}, rng, -2, 2);
    const auto g = gram(Var<double>(f)).value();
    const auto ref = gram_oracle(f, 0);
    std::vector<double> m(c * c);
    for (std::size_t p = 0; p < c; ++p)
      for (std::size_t q = 0; q < c; ++q) {
        const double v = g[p * c + q];
        worst_oracle = std::max(worst_oracle, std::abs(v - ref[p * c + q]));
        symmetric = symmetric && v == g[q * c + p];
        m[p * c + q] = v;
      }
    for (double e : symmetric_eigenvalues(m, c)) min_eig = std::min(min_eig, e);
  }
  return {symmetric && min_eig >= kPsdTol && worst_oracle < kGramOracleTol,
          std::to_string(kGramMaps) + " maps: symmetry " + (symmetric ? "exact" : "BROKEN") + ", min eigenvalue " +
              num(min_eig, 3) + " >= " + num(kPsdTol) + ", oracle gap " + num(worst_oracle, 3) + " < " +
              num(kGramOracleTol)};
}

// ---------------------------------------------------------------- 3. receptive fields

std::vector<LayerSpec> random_chain(Rng& rng) {
  std::vector<LayerSpec> chain;
  const std::size_t len = 1 + rng.below(8);
  int total = 1;
  for (std::size_t i = 0; i < len; ++i) {
    const int k = 1 + 2 * static_cast<int>(rng.below(4));
    int s = rng.below(3) == 0 && total < 4 ? 2 : 1;
    total *= s;
    chain.push_back(LayerSpec::conv(k, s, 1));
  }
  return chain;
}

Outcome criterion_rf() {
  Rng rng(33);
  int agree = 0;
  for (int i = 0; i < kRandomChains; ++i) {
    const auto chain = random_chain(rng);
    const auto r = compute_rf(chain).final_rf();
    const auto fp = rf_footprint_oracle(chain, oracle_input_size(chain), 500 + i);
    if (!fp.clipped && r.is_integer() && static_cast<std::int64_t>(fp.height) == r.num &&
        static_cast<std::int64_t>(fp.width) == r.num)
      ++agree;
  }
  const ArchSpec arch = default_arch();
  std::vector<std::string> rfs;
  bool default_ok = true;
  const std::vector<std::int64_t> expect = {53, 69, 85};
  for (std::size_t k = 0; k < arch.num_branches(); ++k) {
    const auto chain = branch_chain(arch, k);
    const auto r = compute_rf(chain).final_rf();
    const auto fp = rf_footprint_oracle(chain, oracle_input_size(chain));
    rfs.push_back(r.str() + "/" + std::to_string(fp.height) + "x" + std::to_string(fp.width));
    default_ok = default_ok && !fp.clipped && r == Fraction{expect[k], 1} &&
                 static_cast<std::int64_t>(fp.height) == expect[k] && static_cast<std::int64_t>(fp.width) == expect[k];
  }
  const bool pyramid = validate_pyramid(arch).ok;
  return {agree == kRandomChains && default_ok && pyramid,
          std::to_string(agree) + "/" + std::to_string(kRandomChains) + " random chains agree; default branches " +
              rfs[0] + ", " + rfs[1] + ", " + rfs[2] + " (recurrence/footprint, want 53/69/85); pyramid " +
              (pyramid ? "ok" : "violated")};
}

// ---------------------------------------------------------------- 4. scale sensitivity

Outcome criterion_scale_sensitivity(const Desk& d) {
  NoGradGuard guard;
  double worst = 1e300;
  std::string where;
  // The desk style at two stroke scales, plus a second texture family.
  const std::vector<std::pair<Tensor<float>, Tensor<float>>> pairs = {
      {rescale_style(d.style, 48), rescale_style(d.style, 96)},
      {rescale_style(d.style, 96), rescale_style(d.style, 144)},
      {blobs(96, 96, 8.0), blobs(96, 96, 16.0)},
  };
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto ta = d.net.extract(pairs[p].first), tb = d.net.extract(pairs[p].second);
    for (const auto& name : LossNet<float>::style_taps()) {
      const auto ga = gram(ta.at(name)).value(), gb = gram(tb.at(name)).value();
      double diff = 0, norm = 0;
      for (std::size_t i = 0; i < ga.size(); ++i) {
        diff += (static_cast<double>(ga[i]) - gb[i]) * (static_cast<double>(ga[i]) - gb[i]);
        norm += static_cast<double>(ga[i]) * ga[i];
      }
      const double gap = std::sqrt(diff / norm);
      if (gap < worst) worst = gap, where = "pair " + std::to_string(p) + " " + name;
    }
  }
  return {worst > kScaleGap, "smallest relative gram gap " + num(worst, 3) + " (" + where + ") > " + num(kScaleGap)};
}

// ---------------------------------------------------------------- 5. progressive training

Outcome criterion_progressive(Desk& d) {
  d.trained();
  const std::size_t K = d.cfg.arch.num_branches();
  bool drop_ok = true;
  std::ostringstream detail;
  detail << "(a)";
  for (std::size_t k = 0; k < K; ++k) {
    const auto s = d.log.stroke_series(k);
    const double early = mean_of_first(s, kSmoothWindow);
    const auto sm = trailing_mean(s, kSmoothWindow);
    const double best = *std::min_element(sm.begin() + static_cast<std::ptrdiff_t>(std::min(kSmoothWindow, sm.size()) - 1),
                                          sm.end());
    const auto hit = steps_to_threshold(s, kSmoothWindow, kDropRatio * early);
    drop_ok = drop_ok && hit.has_value();
    detail << " k" << k << " min smoothed/early " << num(best / early, 3)
           << (hit ? " at step " + std::to_string(*hit) : " never") << ";";
  }
  detail << " need < " << num(kDropRatio) << " within " << d.cfg.iterations << " iterations.";

  // Branch index 1 (scale 96) against the same generator trained on that branch alone.
  const std::size_t b = 1;
  std::cerr << "single-branch baseline on branch " << b << "\n";
  Generator<float> base(d.cfg.arch, d.cfg.seed);
  TrainConfig bcfg = d.cfg;
  bcfg.iterations = d.cfg.iterations;
  TrainHooks hooks = progress(d.cfg.log_every, "baseline");
  hooks.schedule = {b};
  std::optional<double> threshold;
  hooks.stop = [&](const TrainLog& log) {
    const auto s = log.stroke_series(b);
    if (s.size() < kSmoothWindow) return false;
    if (!threshold) threshold = kDropRatio * mean_of_first(s, kSmoothWindow);
    return trailing_mean(s, kSmoothWindow).back() < *threshold;
  };
  const TrainLog blog = progressive_train(base, bcfg, d.style, d.net, d.data, hooks);
  write_file((d.artifacts / "baseline_log.csv").string(), blog.to_csv());
  const auto base_steps = steps_to_threshold(blog.stroke_series(b), kSmoothWindow, threshold.value_or(0));
  const auto prog_steps = steps_to_threshold(d.log.stroke_series(b), kSmoothWindow, threshold.value_or(0));
  const bool speed_ok = base_steps && prog_steps &&
                        static_cast<double>(*prog_steps) <= kProgressiveSlack * static_cast<double>(*base_steps);
  detail << " (b) threshold " << num(threshold.value_or(0)) << ": progressive "
         << (prog_steps ? std::to_string(*prog_steps) : "never") << " branch steps vs alone "
         << (base_steps ? std::to_string(*base_steps) : "never") << " (need <= x" << num(kProgressiveSlack) << ").";
  const bool time_ok = d.seconds < kProgressiveSeconds;
  detail << " runtime " << num(d.seconds, 4) << " s < " << num(kProgressiveSeconds) << " s";
  return {drop_ok && speed_ok && time_ok, detail.str()};
}

// ---------------------------------------------------------------- 6. incremental training

Outcome criterion_incremental(Desk& d) {
  const auto& trained = d.trained();
  const std::size_t K = trained.num_branches();
  const BranchPlan plan = plan_incremental_branch(trained.arch(), kNewScale);

  TrainConfig scfg = d.cfg;
  scfg.arch = apply_plan(trained.arch(), plan, kNewScale);
  scfg.loss.branch_scales = scfg.arch.branch_scales;
  scfg.loss.beta.push_back(scfg.loss.beta.back());
  scfg.iterations = d.cfg.iterations * (K + 1) / K;
  std::cerr << "from-scratch K+1 run: " << scfg.iterations << " iterations\n";
  Generator<float> scratch(scfg.arch, scfg.seed);
  const TrainLog slog = progressive_train(scratch, scfg, d.style, d.net, d.data, progress(d.cfg.log_every, "scratch"));
  write_file((d.artifacts / "scratch_k4_log.csv").string(), slog.to_csv());
  const auto s3 = slog.stroke_series(K);
  const double converged = trailing_mean(s3, kSmoothWindow).back();
  const double threshold = kConvergedFactor * converged;
  const auto scratch_steps = steps_to_threshold(s3, kSmoothWindow, threshold);

  std::cerr << "incremental run on the trained desk model\n";
  Generator<float> grown = trained;
  const auto before = grown.export_tensors();
  TrainConfig icfg = d.cfg;
  icfg.iterations = kIncrementalCap;
  const auto res = incremental_train(grown, icfg, d.style, kNewScale, d.net, d.data,
                                     stop_below(K, threshold, d.cfg.log_every, "incremental"));
  write_file((d.artifacts / "incremental_log.csv").string(), res.log.to_csv());
  const auto after = grown.export_tensors();
  bool frozen = true;
  for (const auto& [name, t] : before) frozen = frozen && after.at(name) == t;
  const auto inc_steps = steps_to_threshold(res.log.stroke_series(K), kSmoothWindow, threshold);
  const bool faster = inc_steps && scratch_steps &&
                      static_cast<double>(*inc_steps) < kIncrementalRatio * static_cast<double>(*scratch_steps);
  return {frozen && faster,
          std::string("frozen params ") + (frozen ? "byte-identical" : "CHANGED") + " (" +
              std::to_string(before.size()) + " tensors); threshold " + num(threshold) + " = " +
              num(kConvergedFactor) + " x converged " + num(converged) + ": incremental " +
              (inc_steps ? std::to_string(*inc_steps) : "never (cap " + std::to_string(kIncrementalCap) + ")") +
              " steps vs from-scratch " + (scratch_steps ? std::to_string(*scratch_steps) : "never") +
              " branch steps (need < " + num(kIncrementalRatio) + "x)"};
}

// ---------------------------------------------------------------- 7. specialization

Outcome criterion_specialization(Desk& d) {
  const auto& g = d.trained();
  NoGradGuard guard;
  const std::size_t K = g.num_branches();
  const auto imgs = d.eval_images(4);
  std::vector<std::vector<double>> L(K, std::vector<double>(K, 0.0));
  std::vector<StyleTarget<float>> targets;
  for (double s : d.cfg.loss.branch_scales) targets.push_back(make_style_target(d.net, d.style, s));
  for (const auto& x : imgs)
    for (std::size_t j = 0; j < K; ++j) {
      const auto taps = d.net.extract(Var<float>(g.stylize(x, GatingVector::one_hot(K, j))));
      for (std::size_t k = 0; k < K; ++k)
        L[j][k] += static_cast<double>(stroke_loss(targets[k], taps).value().item()) / static_cast<double>(imgs.size());
    }
  std::size_t diagonal = 0;
  std::ostringstream m;
  m << "L[j][k] rows j:";
  for (std::size_t j = 0; j < K; ++j) {
    m << " [";
    for (std::size_t k = 0; k < K; ++k) m << (k ? " " : "") << num(L[j][k], 3);
    m << "]";
  }
  m << "; column argmins:";
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < K; ++j)
      if (L[j][k] < L[best][k]) best = j;
    diagonal += best == k;
    m << " " << best;
  }
  m << " (" << diagonal << "/" << K << " on diagonal, need >= 2)";
  return {diagonal >= 2, m.str()};
}

// ---------------------------------------------------------------- 8. runtime control

Outcome criterion_runtime_control(Desk& d) {
  const auto& g = d.trained();
  const std::size_t K = g.num_branches();
  const auto x = d.eval_images(1)[0];
  const std::size_t h = x.dim(2), w = x.dim(3), plane = h * w;
  std::vector<Tensor<float>> branch;
  for (std::size_t k = 0; k < K; ++k) branch.push_back(g.stylize(x, GatingVector::one_hot(K, k)));

  bool endpoints = true;
  for (std::size_t k = 0; k < K; ++k) endpoints = endpoints && interpolate_stylize(g, x, static_cast<double>(k)) == branch[k];

  Rng rng(88);
  auto soft = StrokeMaskSet::zeros(K, h, w);
  for (std::size_t p = 0; p < plane; ++p) {
    std::vector<double> wts(K);
    double s = 0;
    for (auto& v : wts) s += v = rng.uniform(0.0, 1.0);
    for (std::size_t k = 0; k < K; ++k) soft.maps[k][p] = static_cast<float>(wts[k] / s);
  }
  const auto y = spatial_stylize(g, x, soft);
  double recompose = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      double ref = 0;
      for (std::size_t k = 0; k < K; ++k) ref += static_cast<double>(soft.maps[k][p]) * branch[k][c * plane + p];
      recompose = std::max(recompose, std::abs(ref - y[c * plane + p]));
    }

  auto hard = StrokeMaskSet::zeros(K, h, w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) hard.maps[j < w / 2 ? 0 : K - 1].at(i, j) = 1.0f;
  const auto z = spatial_stylize(g, x, hard);
  bool selection = true;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j)
        selection = selection && z.at(0, c, i, j) == branch[j < w / 2 ? 0 : K - 1].at(0, c, i, j);

  std::vector<Tensor<float>> sweep;
  for (int i = 0; i < 6; ++i) sweep.push_back(interpolate_stylize(g, x, static_cast<double>(K - 1) * i / 5.0));
  std::size_t distinct_pairs = 0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = i + 1; j < 6; ++j) distinct_pairs += !(sweep[i] == sweep[j]);

  return {endpoints && recompose < kRecomposeTol && selection && distinct_pairs == 15,
          std::string("endpoints ") + (endpoints ? "exact" : "DIFFER") + "; soft recomposition " + num(recompose, 3) +
              " < " + num(kRecomposeTol) + "; hard halves " + (selection ? "exact" : "DIFFER") + "; six-step sweep " +
              std::to_string(distinct_pairs) + "/15 pairs distinct"};
}

// ---------------------------------------------------------------- 9. determinism and serialization

struct Child {
  pid_t pid = 0;
  FILE* out = nullptr;
};

Child spawn(std::vector<std::string> args) {
  int fds[2];
  require(pipe(fds) == 0, "io", "pipe failed");
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_adddup2(&fa, fds[1], 1);
  posix_spawn_file_actions_addclose(&fa, fds[0]);
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  Child c;
  require(posix_spawn(&c.pid, argv[0], &fa, nullptr, argv.data(), environ) == 0, "io", "spawn failed");
  posix_spawn_file_actions_destroy(&fa);
  close(fds[1]);
  c.out = fdopen(fds[0], "r");
  return c;
}

int wait_child(Child& c) {
  int status = 0;
  waitpid(c.pid, &status, 0);
  if (c.out) fclose(c.out);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome criterion_determinism(Desk& d) {
  const auto& g = d.trained();
  TrainConfig cfg = d.cfg;
  cfg.iterations = kDeterminismIterations;
  Generator<float> a(cfg.arch, cfg.seed), b(cfg.arch, cfg.seed);
  const TrainLog la = progressive_train(a, cfg, d.style, d.net, d.data);
  const TrainLog lb = progressive_train(b, cfg, d.style, d.net, d.data);
  TrainLog prefix;
  prefix.records.assign(d.log.records.begin(), d.log.records.begin() + static_cast<std::ptrdiff_t>(std::min(
                                                                           kDeterminismIterations, d.log.records.size())));
  const bool logs = la == lb && la == prefix && a.export_tensors() == b.export_tensors();

  const std::string bytes = encode_checkpoint(g, training_metadata(d.cfg, d.net, d.log.records.size(), ""));
  const auto ck = decode_checkpoint(bytes);
  const std::string model_path = (d.artifacts / "desk.spyr").string();
  save_checkpoint(model_path, ck.model, ck.metadata);
  const auto reloaded = load_checkpoint(model_path);
  const bool roundtrip = encode_checkpoint(ck.model, ck.metadata) == bytes &&
                         encode_checkpoint(reloaded.model, reloaded.metadata) == bytes;

  // CLI stylize vs a running `serve` process on the same files.
  const std::string content_path = (d.artifacts / "content.png").string();
  write_image(content_path, d.eval_images(1)[0]);
  const std::string content = read_file(content_path);
  Child server = spawn({SPYR_CLI_PATH, "serve", "--model", model_path, "--listen", "127.0.0.1:0"});
  char line[256] = {0};
  require(fgets(line, sizeof line, server.out) != nullptr, "io", "serve printed nothing");
  const std::string banner = line;
  const int port = std::stoi(banner.substr(banner.rfind(':') + 1));
  httplib::Client client("127.0.0.1", port);
  client.set_read_timeout(120, 0);
  std::size_t identical = 0, total = 0;
  for (const std::string t : {"0", "1.5", "2"}) {
    ++total;
    const std::string out = (d.artifacts / ("cli_t" + t + ".png")).string();
    Child cli = spawn({SPYR_CLI_PATH, "stylize", "--model", model_path, "--content", content_path, "--t", t, "--out", out});
    const int rc = wait_child(cli);
    auto r = client.Post("/models/desk/stylize",
                         httplib::MultipartFormDataItems{{"content", content, "content.png", "image/png"}, {"t", t, "", ""}});
    if (rc == 0 && r && r->status == 200 && r->body == read_file(out)) ++identical;
  }
  kill(server.pid, SIGTERM);
  wait_child(server);
  const bool cross = identical == total;
  return {logs && roundtrip && cross,
          std::string("TrainLog ") + (logs ? "identical" : "DIFFERS") + " across two " +
              std::to_string(kDeterminismIterations) + "-iteration runs and the desk-run prefix; checkpoint round trip " +
              (roundtrip ? "byte-identical" : "DIFFERS") + " (" + std::to_string(bytes.size()) + " bytes); CLI vs HTTP " +
              std::to_string(identical) + "/" + std::to_string(total) + " byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the desk profile"};
  std::vector<int> only;
  std::size_t iterations = kDeskIterations;
  std::string artifacts = "acceptance_artifacts";
  app.add_option("--only", only, "Run only these criteria (comma-separated)")->delimiter(',');
  app.add_option("--iterations", iterations, "Progressive desk iterations (development override)");
  app.add_option("--artifacts", artifacts, "Directory for logs and checkpoints");
  CLI11_PARSE(app, argc, argv);

  Desk desk(iterations, artifacts);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", [] { return criterion_gradients(); }},
      {"gram properties", [] { return criterion_gram(); }},
      {"receptive-field oracle", [] { return criterion_rf(); }},
      {"scale sensitivity", [&] { return criterion_scale_sensitivity(desk); }},
      {"progressive training", [&] { return criterion_progressive(desk); }},
      {"incremental training", [&] { return criterion_incremental(desk); }},
      {"cross-branch specialization", [&] { return criterion_specialization(desk); }},
      {"runtime-control identities", [&] { return criterion_runtime_control(desk); }},
      {"determinism and serialization", [&] { return criterion_determinism(desk); }},
  };
  const std::set<int> selected(only.begin(), only.end());
  if (iterations != kDeskIterations) std::cout << "note: desk iterations overridden to " << iterations << "\n";
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
