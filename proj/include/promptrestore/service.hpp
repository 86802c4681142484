#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "promptrestore/backbone.hpp"
#include "promptrestore/metrics.hpp"
#include "promptrestore/textenc.hpp"
#include "promptrestore/train.hpp"

namespace httplib {
class Server;
}

namespace promptrestore {

std::string base64_encode(const std::vector<uint8_t>& bytes);
/// Throws InvalidArgument on characters outside the standard alphabet.
std::vector<uint8_t> base64_decode(std::string_view text);

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  int64_t max_pixels = 1024 * 1024;
  int max_in_flight = 4;  // admitted concurrent requests; the rest are refused with 503
  int worker_threads = 4;
};

/// Parsed body of POST /restore.
struct RestoreRequest {
  std::vector<uint8_t> image;  // encoded 8-bit RGB (PNG, JPEG, ...)
  std::string prompt;
  bool return_attention = false;
  bool return_embedding = false;
};

struct ServiceResponse {
  int status = 200;
  nlohmann::json body;
};

/// Error body: {"error": {"code": ..., "message": ...}}.
ServiceResponse error_response(int status, const std::string& code, const std::string& message);

/// Inference endpoints over a shared, read-only model pair. Handlers are
/// plain functions of the request so they can be exercised without sockets.
class RestorationService {
 public:
  explicit RestorationService(ServiceConfig config = {});
  ~RestorationService();

  void load(RestorationNet backbone, TextEncoderBundle text, std::string checkpoint_id);
  /// Loads both checkpoints; the id is derived from the manifests.
  void load_checkpoints(const std::filesystem::path& backbone, const std::filesystem::path& text_encoder);
  bool loaded() const { return state_ != nullptr; }
  const ServiceConfig& config() const { return config_; }

  ServiceResponse health() const;
  ServiceResponse restore(const RestoreRequest& request) const;
  ServiceResponse embed(const std::string& prompt) const;
  /// Server-side degradation synthesis for the client:
  /// {"degradations": [spec...], "seed": n, "image"?: base64, "size"?: px, "order"?: "physical"|"given"}.
  ServiceResponse synthesize(const nlohmann::json& request) const;
  /// 2-D projections of every corpus sentence's guidance vector.
  ServiceResponse embedding_map() const;

  /// Parses JSON (base64 image) or multipart bodies; InvalidArgument on malformed input.
  static RestoreRequest parse_restore_json(const std::string& body);

  /// Registers all routes, wrapped in the admission limit.
  void mount(httplib::Server& server);
  /// Blocks until stop() is called. Returns false if binding failed.
  bool listen();
  /// Binds to an ephemeral port on config.host and serves in the calling thread;
  /// `on_bound` receives the port before serving starts.
  bool listen_any_port(const std::function<void(int)>& on_bound);
  void stop();

 private:
  struct State;
  std::vector<double> guidance(const std::string& prompt) const;

  ServiceConfig config_;
  std::shared_ptr<State> state_;
  std::unique_ptr<httplib::Server> server_;
  mutable std::atomic<int> in_flight_{0};
};

}  // namespace promptrestore
