#pragma once

// HTTP inference service. Models are loaded once and only read afterwards.

#include <httplib.h>
#include <json.hpp>

#include <atomic>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "spyr/generator.hpp"
#include "spyr/stylizer.hpp"

namespace spyr {

struct ModelInfo {
  std::string id;
  std::size_t k = 0;
  std::vector<double> branch_scales;
  std::vector<double> branch_rf;
  std::string checkpoint_hash;

  nlohmann::json to_json() const {
    return {{"id", id}, {"K", k}, {"branch_scales", branch_scales}, {"branch_rf", branch_rf},
            {"checkpoint_hash", checkpoint_hash}};
  }
};

struct LoadedModel {
  Generator<float> model;
  ModelInfo info;
};

inline LoadedModel load_model_bytes(const std::string& id, const std::string& bytes) {
  auto ck = decode_checkpoint(bytes);
  ModelInfo info;
  info.id = id;
  info.k = ck.model.num_branches();
  info.branch_scales = ck.model.arch().branch_scales;
  for (const auto& r : validate_pyramid(ck.model.arch()).branch_rf) info.branch_rf.push_back(r.value());
  info.checkpoint_hash = hex64(fnv1a64(bytes));
  return {std::move(ck.model), std::move(info)};
}

/// The model id is the file name without its extension.
inline LoadedModel load_model(const std::string& path) {
  return load_model_bytes(std::filesystem::path(path).stem().string(), read_file(path));
}

/// Error class -> HTTP status.
inline int http_status(const std::string& code) {
  static const std::map<std::string, int> table = {
      {"control", 400},        {"range", 400},     {"gating", 400},     {"bad_image", 400},
      {"bad_request", 400},    {"too_large", 413}, {"mask_shape", 422}, {"mask_partition", 422},
      {"mask_label", 422},     {"unknown_model", 404},
  };
  const auto it = table.find(code);
  return it == table.end() ? 500 : it->second;
}

class Service {
 public:
  explicit Service(std::vector<LoadedModel> models, std::size_t max_side = kDefaultMaxSide, std::ostream& log = std::cerr)
      : max_side_(max_side), log_(log) {
    for (auto& m : models) {
      const std::string id = m.info.id;
      require(!models_.count(id), "config", "duplicate model id '" + id + "'");
      models_.emplace(id, std::make_shared<const LoadedModel>(std::move(m)));
    }
    routes();
  }

  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds to host:port (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    const int bound = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    require(bound > 0, "io", "cannot listen on " + host + ":" + std::to_string(port));
    return bound;
  }

  /// Serves until stop(). Blocks.
  void run() { server_.listen_after_bind(); }
  void wait_until_ready() const { server_.wait_until_ready(); }
  void stop() { server_.stop(); }

  const LoadedModel& model(const std::string& id) const {
    const auto it = models_.find(id);
    require(it != models_.end(), "unknown_model", "no model named '" + id + "'");
    return *it->second;
  }

 private:
  void routes() {
    server_.set_payload_max_length(256u << 20);
    server_.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
    server_.Get(R"(/models/([^/]+)/info)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { res.set_content(model(req.matches[1]).info.to_json().dump(), "application/json"); });
    });
    server_.Post(R"(/models/([^/]+)/stylize)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto& m = model(req.matches[1]);
        require(req.is_multipart_form_data(), "bad_request", "stylize expects multipart/form-data");
        require(req.has_file("content"), "bad_request", "missing 'content' part");
        ControlText control;
        if (req.has_file("t")) control.t = req.get_file_value("t").content;
        if (req.has_file("gating")) control.gating = req.get_file_value("gating").content;
        for (const auto& part : req.get_file_values("mask")) control.masks.push_back(part.content);
        res.set_content(stylize_png(m.model, req.get_file_value("content").content, control, max_side_), "image/png");
      });
    });
  }

  template <typename F>
  void guarded(httplib::Response& res, F&& body) {
    try {
      body();
    } catch (const Error& e) {
      respond_error(res, e.code(), e.what());
    } catch (const std::exception& e) {
      respond_error(res, "internal", e.what());
    }
  }

  void respond_error(httplib::Response& res, const std::string& code, const std::string& message) {
    const int status = http_status(code);
    nlohmann::json body = {{"error", code}, {"message", message}};
    if (status == 500) {
      const std::string id = hex64(fnv1a64(code + message, ++error_counter_ ^ 0x9e3779b97f4a7c15ull));
      {
        std::lock_guard<std::mutex> lock(log_mutex_);
        log_ << "error " << id << ": " << code << ": " << message << "\n";
      }
      body = {{"error", "internal"}, {"message", "internal error"}, {"id", id}};
    }
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  std::map<std::string, std::shared_ptr<const LoadedModel>> models_;
  std::size_t max_side_;
  std::ostream& log_;
  std::mutex log_mutex_;
  std::atomic<std::uint64_t> error_counter_{0};
  httplib::Server server_;
};

}  // namespace spyr
