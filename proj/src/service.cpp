#include "promptrestore/service.hpp"

#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include "httplib.h"
#include "promptrestore/pipeline.hpp"

namespace promptrestore {

namespace {

constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
constexpr const char* kCategoryMethod = "nearest training-centroid of the guidance vector (service heuristic)";

std::string preset_name(const BackboneConfig& cfg) {
  for (const char* name : {"tiny", "paper"}) {
    auto preset = BackboneConfig::preset(name);
    preset.sgi_enabled = cfg.sgi_enabled;
    if (preset.to_json() == cfg.to_json()) return name;
  }
  return "custom";
}

std::string manifest_digest(const std::filesystem::path& a, const std::filesystem::path& b) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& path : {a, b}) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    for (unsigned char c : ss.str()) {
      h ^= c;
      h *= 1099511628211ull;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json point_json(const Point2& p) { return {{"x", p.x}, {"y", p.y}}; }

nlohmann::json distances_json(const std::array<double, 3>& d) {
  nlohmann::json j = nlohmann::json::object();
  for (auto t : kAllDegradations) j[std::string(to_string(t))] = d[static_cast<size_t>(t)];
  return j;
}

bool truthy(const std::string& value) { return value == "1" || value == "true" || value == "yes" || value == "on"; }

}  // namespace

std::string base64_encode(const std::vector<uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += {kAlphabet[v >> 18], kAlphabet[(v >> 12) & 63], kAlphabet[(v >> 6) & 63], kAlphabet[v & 63]};
  }
  if (i + 1 == bytes.size()) {
    const uint32_t v = bytes[i] << 16;
    out += {kAlphabet[v >> 18], kAlphabet[(v >> 12) & 63], '=', '='};
  } else if (i + 2 == bytes.size()) {
    const uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out += {kAlphabet[v >> 18], kAlphabet[(v >> 12) & 63], kAlphabet[(v >> 6) & 63], '='};
  }
  return out;
}

std::vector<uint8_t> base64_decode(std::string_view text) {
  if (const auto comma = text.find(','); text.starts_with("data:") && comma != std::string_view::npos) {
    text.remove_prefix(comma + 1);
  }
  std::vector<uint8_t> out;
  uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r' || c == ' ') continue;
    const char* pos = std::strchr(kAlphabet, c);
    if (!pos || c == '\0') throw InvalidArgument("invalid base64 character");
    acc = (acc << 6) | static_cast<uint32_t>(pos - kAlphabet);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<uint8_t>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

ServiceResponse error_response(int status, const std::string& code, const std::string& message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

struct RestorationService::State {
  RestorationNet backbone{nullptr};
  TextEncoder encoder{nullptr};
  InstructionCorpus corpus;
  CategoryCentroids centroids;
  PcaProjection projection;
  nlohmann::json embedding_map;
  std::string checkpoint_id;
  std::string preset;
};

RestorationService::RestorationService(ServiceConfig config) : config_(std::move(config)) {}

RestorationService::~RestorationService() = default;

void RestorationService::load(RestorationNet backbone, TextEncoderBundle text, std::string checkpoint_id) {
  if (backbone->config().d_text != text.encoder->config().d_model) {
    throw InvalidArgument("backbone guidance width does not match the text encoder");
  }
  backbone->eval();
  text.encoder->eval();
  auto state = std::make_shared<State>(State{backbone, text.encoder, std::move(text.corpus), std::move(text.centroids),
                                             {}, nlohmann::json::array(), std::move(checkpoint_id),
                                             preset_name(backbone->config())});
  torch::NoGradGuard no_grad;
  std::vector<std::vector<double>> zs;
  for (const auto& ins : state->corpus.instructions()) {
    const auto z = embed_text(state->encoder, state->corpus, ins.text);
    zs.emplace_back(z.values.begin(), z.values.end());
  }
  state->projection = PcaProjection::fit(zs);
  const auto& instructions = state->corpus.instructions();
  for (size_t i = 0; i < instructions.size(); ++i) {
    auto p = state->projection.apply(zs[i]);
    state->embedding_map.push_back({{"x", p.x},
                                    {"y", p.y},
                                    {"category", std::string(to_string(instructions[i].category))},
                                    {"split", std::string(to_string(instructions[i].split))},
                                    {"text", instructions[i].text}});
  }
  state_ = std::move(state);
}

void RestorationService::load_checkpoints(const std::filesystem::path& backbone,
                                          const std::filesystem::path& text_encoder) {
  load(load_backbone(backbone), load_text_encoder(text_encoder), manifest_digest(backbone, text_encoder));
}

std::vector<double> RestorationService::guidance(const std::string& prompt) const {
  torch::NoGradGuard no_grad;
  const auto tokens = state_->corpus.tokenize(prompt);
  const auto encoded = state_->encoder->encode(tokens);
  const auto z = pool_guidance(encoded.states, std::vector<int64_t>(tokens.attention_mask.begin(),
                                                                     tokens.attention_mask.begin() +
                                                                         encoded.states.size(0)));
  return {z.values.begin(), z.values.end()};
}

ServiceResponse RestorationService::health() const {
  if (!state_) return {200, {{"ok", false}, {"status", "no model loaded"}, {"checkpoint_id", nullptr}, {"preset", nullptr}}};
  return {200, {{"ok", true}, {"status", "ready"}, {"checkpoint_id", state_->checkpoint_id}, {"preset", state_->preset}}};
}

ServiceResponse RestorationService::restore(const RestoreRequest& request) const {
  const auto start = std::chrono::steady_clock::now();
  if (!state_) return error_response(503, "model_not_loaded", "no checkpoint pair is loaded");
  if (request.prompt.find_first_not_of(" \t\r\n") == std::string::npos) {
    return error_response(400, "empty_prompt", "prompt must not be empty");
  }
  Image input;
  try {
    input = decode_image(request.image);
  } catch (const std::exception& e) {
    return error_response(400, "invalid_image", e.what());
  }
  if (static_cast<int64_t>(input.height()) * input.width() > config_.max_pixels) {
    return error_response(413, "image_too_large",
                          "image has " + std::to_string(static_cast<int64_t>(input.height()) * input.width()) +
                              " pixels, limit is " + std::to_string(config_.max_pixels));
  }

  const auto z = guidance(request.prompt);
  std::vector<float> zf(z.begin(), z.end());
  const auto z_tensor = torch::tensor(zf).unsqueeze(0);
  torch::NoGradGuard no_grad;
  const auto image_tensor = to_tensor(input);
  auto restored = to_image(state_->backbone->forward(image_tensor, z_tensor));
  restored.clamp();
  const auto png = encode_png(restored);

  nlohmann::json body;
  body["image"] = base64_encode(png);
  body["width"] = restored.width();
  body["height"] = restored.height();
  body["category"] = std::string(to_string(state_->centroids.nearest(z)));
  body["category_method"] = kCategoryMethod;
  body["centroid_distances"] = distances_json(state_->centroids.distances(z));
  const double p = psnr(quantize_8bit(restored), input);
  body["psnr_to_input"] = std::isinf(p) ? nlohmann::json("inf") : nlohmann::json(p);
  if (request.return_attention) {
    body["attention_maps"] = nlohmann::json::array();
    const auto maps = state_->backbone->attention_maps(image_tensor, z_tensor);
    for (size_t l = 0; l < maps.size(); ++l) {
      const auto m = maps[l].contiguous();
      Image map_image(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)));
      for (int c = 0; c < Image::kChannels; ++c) {
        std::copy(m.data_ptr<float>(), m.data_ptr<float>() + m.numel(), map_image.plane(c).begin());
      }
      body["attention_maps"].push_back({{"level", l + 1}, {"image", base64_encode(encode_png(map_image))}});
    }
  }
  if (request.return_embedding) body["embedding"] = point_json(state_->projection.apply(z));
  body["latency_ms"] =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return {200, body};
}

ServiceResponse RestorationService::embed(const std::string& prompt) const {
  if (!state_) return error_response(503, "model_not_loaded", "no checkpoint pair is loaded");
  if (prompt.find_first_not_of(" \t\r\n") == std::string::npos) {
    return error_response(400, "empty_prompt", "prompt must not be empty");
  }
  const auto z = guidance(prompt);
  return {200,
          {{"point", point_json(state_->projection.apply(z))},
           {"category", std::string(to_string(state_->centroids.nearest(z)))},
           {"category_method", kCategoryMethod},
           {"centroid_distances", distances_json(state_->centroids.distances(z))}}};
}

ServiceResponse RestorationService::synthesize(const nlohmann::json& request) const {
  try {
    if (!request.contains("degradations") || !request.at("degradations").is_array() ||
        request.at("degradations").empty()) {
      return error_response(400, "invalid_request", "degradations must be a non-empty list");
    }
    std::vector<DegradationSpec> specs;
    for (const auto& item : request.at("degradations")) {
      if (item.is_string()) {
        Rng rng(request.value("seed", uint64_t{0}) + specs.size());
        specs.push_back(sample_spec(parse_degradation(item.get<std::string>()), rng));
      } else {
        specs.push_back(DegradationSpec::from_json(item));
      }
    }
    if (request.value("order", std::string("physical")) == "physical") specs = physical_order(specs);
    const uint64_t seed = request.value("seed", uint64_t{0});
    Image clean;
    if (request.contains("image")) {
      clean = decode_image(base64_decode(request.at("image").get<std::string>()));
    } else {
      const int size = request.value("size", 128);
      if (size < 16 || size > 1024) return error_response(400, "invalid_request", "size must be in [16, 1024]");
      Rng rng(seed);
      clean = synthetic_clean_images(1, size, size, rng).front();
    }
    if (static_cast<int64_t>(clean.height()) * clean.width() > config_.max_pixels) {
      return error_response(413, "image_too_large", "image exceeds the pixel limit");
    }
    std::vector<SeededSpec> seeded;
    for (size_t i = 0; i < specs.size(); ++i) seeded.push_back({specs[i], seed * 7919 + i + 1});
    const auto degraded = compose_seeded(clean, seeded);
    nlohmann::json spec_json = nlohmann::json::array();
    for (const auto& s : specs) spec_json.push_back(s.to_json());
    return {200,
            {{"image", base64_encode(encode_png(degraded))},
             {"clean", base64_encode(encode_png(clean))},
             {"degradations", spec_json},
             {"width", degraded.width()},
             {"height", degraded.height()}}};
  } catch (const std::exception& e) {
    return error_response(400, "invalid_request", e.what());
  }
}

ServiceResponse RestorationService::embedding_map() const {
  if (!state_) return error_response(503, "model_not_loaded", "no checkpoint pair is loaded");
  return {200, {{"method", "pca"}, {"points", state_->embedding_map}}};
}

RestoreRequest RestorationService::parse_restore_json(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("body is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("image") || !j.at("image").is_string()) {
    throw InvalidArgument("body needs a base64 'image' string");
  }
  RestoreRequest r;
  r.image = base64_decode(j.at("image").get<std::string>());
  r.prompt = j.value("prompt", std::string{});
  r.return_attention = j.value("return_attention", false);
  r.return_embedding = j.value("return_embedding", false);
  return r;
}

void RestorationService::mount(httplib::Server& server) {
  auto send = [](httplib::Response& res, const ServiceResponse& out) {
    res.status = out.status;
    res.set_content(out.body.dump(), "application/json");
  };
  // Admission control: at most max_in_flight handlers run at once.
  auto admitted = [this, send](auto handler) {
    return [this, send, handler](const httplib::Request& req, httplib::Response& res) {
      if (in_flight_.fetch_add(1) >= config_.max_in_flight) {
        in_flight_.fetch_sub(1);
        send(res, error_response(503, "overloaded", "too many requests in flight"));
        return;
      }
      try {
        send(res, handler(req));
      } catch (const InvalidArgument& e) {
        send(res, error_response(400, "invalid_request", e.what()));
      } catch (const std::exception& e) {
        send(res, error_response(500, "internal", e.what()));
      }
      in_flight_.fetch_sub(1);
    };
  };

  server.Get("/health", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
  server.Post("/restore", admitted([this](const httplib::Request& req) {
                RestoreRequest r;
                if (req.is_multipart_form_data()) {
                  if (!req.has_file("image")) throw InvalidArgument("multipart body needs an 'image' part");
                  const auto& content = req.get_file_value("image").content;
                  r.image.assign(content.begin(), content.end());
                  if (req.has_file("prompt")) r.prompt = req.get_file_value("prompt").content;
                  if (req.has_file("return_attention")) {
                    r.return_attention = truthy(req.get_file_value("return_attention").content);
                  }
                  if (req.has_file("return_embedding")) {
                    r.return_embedding = truthy(req.get_file_value("return_embedding").content);
                  }
                } else {
                  r = parse_restore_json(req.body);
                }
                return restore(r);
              }));
  server.Post("/embed", admitted([this](const httplib::Request& req) {
                nlohmann::json j;
                try {
                  j = nlohmann::json::parse(req.body);
                } catch (const nlohmann::json::exception&) {
                  throw InvalidArgument("body is not JSON");
                }
                return embed(j.value("prompt", std::string{}));
              }));
  server.Post("/synthesize", admitted([this](const httplib::Request& req) {
                nlohmann::json j;
                try {
                  j = nlohmann::json::parse(req.body);
                } catch (const nlohmann::json::exception&) {
                  throw InvalidArgument("body is not JSON");
                }
                return synthesize(j);
              }));
  server.Get("/embedding-map", [this, send](const httplib::Request&, httplib::Response& res) {
    send(res, embedding_map());
  });
  server.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const std::string code = res.status == 404 ? "not_found" : res.status == 413 ? "payload_too_large" : "http_error";
      send(res, error_response(res.status, code, "request failed with HTTP status " + std::to_string(res.status)));
    }
  });
  const auto max_bytes = static_cast<size_t>(config_.max_pixels) * 3 * 2 + (1 << 20);
  server.set_payload_max_length(max_bytes);
  const int threads = config_.worker_threads;
  server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
}

bool RestorationService::listen() {
  server_ = std::make_unique<httplib::Server>();
  mount(*server_);
  return server_->listen(config_.host, config_.port);
}

bool RestorationService::listen_any_port(const std::function<void(int)>& on_bound) {
  server_ = std::make_unique<httplib::Server>();
  mount(*server_);
  const int port = server_->bind_to_any_port(config_.host);
  if (port <= 0) return false;
  config_.port = port;
  if (on_bound) on_bound(port);
  return server_->listen_after_bind();
}

void RestorationService::stop() {
  if (server_) server_->stop();
}

}  // namespace promptrestore
