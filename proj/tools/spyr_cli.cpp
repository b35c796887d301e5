// spyr: train, augment and run stroke-controllable style transfer models.

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "spyr/service.hpp"
#include "spyr/stylizer.hpp"
#include "spyr/trainer.hpp"

namespace fs = std::filesystem;
using namespace spyr;

namespace {

struct Options {
  std::string config, model, style, content, t, gating, out, listen = "127.0.0.1:8080", log;
  std::vector<std::string> masks, models;
  double scale = 0;
  std::size_t steps = 6, iterations = 0, max_side = kDefaultMaxSide;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

TrainHooks progress(const TrainConfig& cfg, bool quiet) {
  TrainHooks h;
  if (quiet || cfg.log_every == 0) return h;
  h.on_record = [&cfg](const TrainRecord& r) {
    if ((r.iteration + 1) % cfg.log_every == 0 || r.iteration + 1 == cfg.iterations)
      std::cerr << "iter " << r.iteration + 1 << "/" << cfg.iterations << " k=" << r.branch << " total=" << r.total
                << " stroke=" << r.stroke << "\n";
  };
  return h;
}

void write_log(const std::string& path, const TrainLog& log) {
  if (!path.empty()) write_file(path, log.to_csv());
}

int cmd_train(const Options& o) {
  TrainConfig cfg = load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.iterations) cfg.iterations = o.iterations;
  cfg.validate();
  const auto style = read_image(o.style);
  const auto net = make_lossnet(cfg);
  const auto data = Dataset::from_config(cfg);
  Generator<float> model(cfg.arch, cfg.seed);
  const TrainLog log = progressive_train(model, cfg, style, net, data, progress(cfg, o.quiet));
  save_checkpoint(o.out, model, training_metadata(cfg, net, log.records.size(), o.style));
  write_log(o.log, log);
  std::cout << "wrote " << o.out << " (K=" << model.num_branches() << ", " << log.records.size() << " iterations)\n";
  return 0;
}

int cmd_augment(const Options& o) {
  auto ck = load_checkpoint(o.model);
  TrainConfig cfg = o.config.empty() ? config_from_metadata(ck) : load_config(o.config);
  const std::size_t k = ck.model.num_branches();
  if (!o.config.empty()) {
    cfg.arch = ck.model.arch();
    cfg.loss.branch_scales = cfg.arch.branch_scales;
    if (cfg.loss.beta.size() != k) {
      const bool uniform = std::all_of(cfg.loss.beta.begin(), cfg.loss.beta.end(),
                                       [&](double b) { return b == cfg.loss.beta.front(); });
      require(uniform, "config", "beta has " + std::to_string(cfg.loss.beta.size()) + " entries, model has " +
                                     std::to_string(k) + " branches");
      cfg.loss.beta.assign(k, cfg.loss.beta.front());
    }
  }
  if (o.seed) cfg.seed = *o.seed;
  if (o.iterations) cfg.iterations = o.iterations;
  std::string style_path = o.style;
  if (style_path.empty()) {
    const auto it = ck.metadata.find("meta.style");
    require(it != ck.metadata.end(), "config", "no --style given and the checkpoint does not record one");
    style_path = it->second;
  }
  const auto style = read_image(style_path);
  const auto net = make_lossnet(cfg);
  const auto data = Dataset::from_config(cfg);
  const auto res = incremental_train(ck.model, cfg, style, o.scale, net, data, progress(cfg, o.quiet));
  auto meta = training_metadata(cfg, net, res.log.records.size(), style_path);
  meta["meta.augment.scale"] = format_doubles({o.scale});
  save_checkpoint(o.out, ck.model, meta);
  write_log(o.log, res.log);
  std::cout << "wrote " << o.out << " (K=" << ck.model.num_branches() << ", new branch RF " << res.plan.new_rf.str()
            << ")\n";
  return 0;
}

ControlText control_of(const Options& o) {
  ControlText c;
  if (!o.t.empty()) c.t = o.t;
  if (!o.gating.empty()) c.gating = o.gating;
  for (const auto& m : o.masks) c.masks.push_back(read_file(m));
  return c;
}

int cmd_stylize(const Options& o) {
  const auto m = load_model(o.model);
  write_file(o.out, stylize_png(m.model, read_file(o.content), control_of(o), o.max_side));
  std::cout << "wrote " << o.out << "\n";
  return 0;
}

int cmd_interpolate(const Options& o) {
  require(o.steps >= 2, "control", "--steps must be at least 2");
  const auto m = load_model(o.model);
  const std::string content = read_file(o.content);
  fs::create_directories(o.out);
  const double top = static_cast<double>(m.model.num_branches() - 1);
  for (std::size_t i = 0; i < o.steps; ++i) {
    // Exact endpoints, evenly spaced in between.
    const double t = i + 1 == o.steps ? top : top * static_cast<double>(i) / static_cast<double>(o.steps - 1);
    std::ostringstream name;
    name << std::setw(3) << std::setfill('0') << i << ".png";
    const fs::path path = fs::path(o.out) / name.str();
    ControlText c;
    c.t = format_doubles({t});
    write_file(path.string(), stylize_png(m.model, content, c, o.max_side));
    std::cout << path.string() << " t=" << format_doubles({t}) << "\n";
  }
  return 0;
}

int cmd_rf_report(const Options& o) {
  const ArchSpec arch = !o.model.empty() ? load_checkpoint(o.model).model.arch()
                        : !o.config.empty() ? load_config(o.config).arch
                                            : default_arch();
  const auto rep = validate_pyramid(arch);
  std::cout << std::left << std::setw(8) << "branch" << std::setw(8) << "rf" << std::setw(8) << "jump"
            << std::setw(8) << "scale" << "layers\n";
  for (std::size_t k = 0; k < arch.num_branches(); ++k) {
    const auto chain = branch_chain(arch, k);
    const auto r = compute_rf(chain);
    std::cout << std::setw(8) << k << std::setw(8) << r.final_rf().str() << std::setw(8) << r.final_jump().str()
              << std::setw(8) << format_doubles({arch.branch_scales[k]}) << format_chain(chain) << "\n";
  }
  std::cout << "\n";
  for (std::size_t k = 0; k < arch.num_branches(); ++k)
    std::cout << "rf_row branch=" << k << " rf=" << rep.branch_rf[k].str() << " scale="
              << format_doubles({arch.branch_scales[k]}) << "\n";
  std::cout << "pyramid=" << (rep.ok ? "ok" : "violated") << "\n";
  for (const auto& v : rep.violations) std::cout << "violation " << v << "\n";
  return rep.ok ? 0 : 3;
}

Service* g_service = nullptr;

int cmd_serve(const Options& o) {
  const auto colon = o.listen.rfind(':');
  require(colon != std::string::npos, "config", "--listen expects host:port");
  const std::string host = o.listen.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(o.listen.substr(colon + 1));
  } catch (const std::exception&) {
    fail("config", "bad port in --listen '" + o.listen + "'");
  }
  std::vector<LoadedModel> models;
  for (const auto& p : o.models) models.push_back(load_model(p));
  require(!models.empty(), "config", "serve needs at least one --model");
  Service service(std::move(models), o.max_side);
  const int bound = service.bind(host, port);
  std::cout << "listening on " << host << ":" << bound << std::endl;
  g_service = &service;
  std::signal(SIGINT, [](int) { g_service->stop(); });
  std::signal(SIGTERM, [](int) { g_service->stop(); });
  service.run();
  g_service = nullptr;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stroke-controllable fast style transfer"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train", "Progressively train a multi-branch model");
  train->add_option("--config", o.config, "Training config (key = value)")->required()->check(CLI::ExistingFile);
  train->add_option("--style", o.style, "Style image (PNG)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", o.out, "Output checkpoint")->required();
  train->add_option("--seed", o.seed, "Override the config seed");
  train->add_option("--iterations", o.iterations, "Override the config iteration count");
  train->add_option("--log", o.log, "Write the training log as CSV");
  train->add_flag("--quiet", o.quiet, "No progress lines");

  auto* augment = app.add_subcommand("augment", "Add and train one larger-stroke branch, freezing the rest");
  augment->add_option("--model", o.model, "Input checkpoint")->required()->check(CLI::ExistingFile);
  augment->add_option("--scale", o.scale, "Stroke scale of the new branch (px)")->required();
  augment->add_option("--out", o.out, "Output checkpoint")->required();
  augment->add_option("--config", o.config, "Training config; defaults to the one stored in the checkpoint")
      ->check(CLI::ExistingFile);
  augment->add_option("--style", o.style, "Style image; defaults to the one stored in the checkpoint");
  augment->add_option("--seed", o.seed, "Override the config seed");
  augment->add_option("--iterations", o.iterations, "Override the config iteration count");
  augment->add_option("--log", o.log, "Write the training log as CSV");
  augment->add_flag("--quiet", o.quiet, "No progress lines");

  auto* stylize = app.add_subcommand("stylize", "Stylize one image");
  stylize->add_option("--model", o.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  stylize->add_option("--content", o.content, "Content image (PNG)")->required()->check(CLI::ExistingFile);
  stylize->add_option("--out", o.out, "Output PNG")->required();
  stylize->add_option("--t", o.t, "Stroke position in [0, K-1]; with --mask, one value per region");
  stylize->add_option("--gating", o.gating, "Explicit branch weights a1,a2,...");
  stylize->add_option("--mask", o.masks, "Mask PNG (indexed or grayscale); repeat for one grayscale map per region")
      ->check(CLI::ExistingFile);
  stylize->add_option("--max-side", o.max_side, "Largest accepted image side");

  auto* interp = app.add_subcommand("interpolate", "Write a sweep of stroke sizes from t=0 to t=K-1");
  interp->add_option("--model", o.model, "Checkpoint")->required()->check(CLI::ExistingFile);
  interp->add_option("--content", o.content, "Content image (PNG)")->required()->check(CLI::ExistingFile);
  interp->add_option("--out", o.out, "Output directory")->required();
  interp->add_option("--steps", o.steps, "Number of images")->capture_default_str();
  interp->add_option("--max-side", o.max_side, "Largest accepted image side");

  auto* rf = app.add_subcommand("rf-report", "Receptive field of every branch");
  rf->add_option("--config", o.config, "Config whose arch to report")->check(CLI::ExistingFile);
  rf->add_option("--model", o.model, "Checkpoint whose arch to report")->check(CLI::ExistingFile);

  auto* serve = app.add_subcommand("serve", "HTTP inference service");
  serve->add_option("--model", o.models, "Checkpoint to serve; repeatable")->required()->check(CLI::ExistingFile);
  serve->add_option("--listen", o.listen, "host:port")->capture_default_str();
  serve->add_option("--max-side", o.max_side, "Largest accepted image side")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*train) return cmd_train(o);
    if (*augment) return cmd_augment(o);
    if (*stylize) return cmd_stylize(o);
    if (*interp) return cmd_interpolate(o);
    if (*rf) return cmd_rf_report(o);
    if (*serve) return cmd_serve(o);
  } catch (const Error& e) {
    std::cerr << "error: " << e.code() << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
