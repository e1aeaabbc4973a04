#pragma once

// HTTP front end for DialogueService.
//
//   POST   /v1/sessions             -> 201 {session_id}
//   POST   /v1/sessions/:id/turns   multipart: audio (WAV, required), video
//                                    (tar of PNG frames, optional)
//                                    -> {emotion, text, round_index, warnings}
//   GET    /v1/sessions/:id         -> transcript
//   DELETE /v1/sessions/:id         -> {deleted}
//   GET    /v1/health               -> {status, checkpoint_hash, prompt_set_hash}
//
// Errors are {code, message} with the status from http_status(). With a
// bearer token configured every route except health requires it.

#include <optional>
#include <string>

// Before httplib: its resolver headers define a `_res` macro that breaks
// Eigen if Eigen is parsed afterwards.
#include "avemo/service.hpp"

#include <httplib.h>

namespace avemo {

inline int http_status(ErrorCode c) {
  switch (c) {
    case ErrorCode::kUnknownSession: return 404;
    case ErrorCode::kDecodeError:
    case ErrorCode::kEmptyAudio:
    case ErrorCode::kEmptyVideo:
    case ErrorCode::kSampleRateMismatch:
    case ErrorCode::kMissingField:
    case ErrorCode::kMissingMedia:
    case ErrorCode::kConfigError:
    case ErrorCode::kEmptyInput: return 400;
    case ErrorCode::kTurnTooLarge: return 413;
    case ErrorCode::kServerNotReady:
    case ErrorCode::kServerBusy: return 503;
    case ErrorCode::kGenerationTimeout: return 504;
    default: return 500;
  }
}

class HttpServer {
 public:
  HttpServer(DialogueService& svc, std::optional<std::string> bearer_token = std::nullopt)
      : svc_(svc), token_(std::move(bearer_token)) {
    routes();
  }

  /// Binds and serves on a background thread; returns the bound port.
  int start(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
    } else if (server_.bind_to_port(host, port)) {
      port_ = port;
    }
    if (port_ <= 0) fail(ErrorCode::kIoError, "cannot bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on the calling thread until stop().
  void run(const std::string& host, int port) {
    if (!server_.listen(host, port)) fail(ErrorCode::kIoError, "cannot listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }
  ~HttpServer() { stop(); }

  int port() const { return port_; }

 private:
  static void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
    res.status = status;
    res.set_content(nlohmann::json{{"code", code}, {"message", message}}.dump(), "application/json");
  }
  static void send_json(httplib::Response& res, const nlohmann::json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  template <class Fn>
  static httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        send_error(res, http_status(e.code()), to_string(e.code()), e.message());
      } catch (const nlohmann::json::exception& e) {
        send_error(res, 400, "MalformedRequest", e.what());
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  }

  static DecodeConfig decode_from_json(const nlohmann::json& j, DecodeConfig base) {
    if (j.contains("kind")) {
      const auto k = j["kind"].get<std::string>();
      if (k == "greedy") base.kind = DecodeConfig::Kind::kGreedy;
      else if (k == "top_p") base.kind = DecodeConfig::Kind::kTopP;
      else fail(ErrorCode::kConfigError, "decode.kind must be greedy or top_p");
    }
    if (j.contains("top_p")) base.top_p = j["top_p"].get<double>();
    if (j.contains("temperature")) base.temperature = j["temperature"].get<double>();
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("max_new")) base.max_new = j["max_new"].get<int>();
    if (base.top_p <= 0 || base.top_p > 1) fail(ErrorCode::kConfigError, "top_p must be in (0, 1]");
    if (base.temperature <= 0) fail(ErrorCode::kConfigError, "temperature must be positive");
    return base;
  }

  void routes() {
    server_.set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
      if (!token_ || req.path == "/v1/health") return httplib::Server::HandlerResponse::Unhandled;
      if (req.get_header_value("Authorization") != "Bearer " + *token_) {
        send_error(res, 401, "Unauthorized", "missing or wrong bearer token");
        return httplib::Server::HandlerResponse::Handled;
      }
      return httplib::Server::HandlerResponse::Unhandled;
    });
    server_.Get("/v1/health", guarded([this](const httplib::Request&, httplib::Response& res) {
                  auto h = svc_.health();
                  send_json(res, h, h["status"] == "ok" ? 200 : 503);
                }));
    server_.Post("/v1/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   std::optional<DecodeConfig> dc;
                   if (!req.body.empty()) {
                     const auto j = nlohmann::json::parse(req.body);
                     if (j.contains("decode")) dc = decode_from_json(j["decode"], svc_.config().decode);
                   }
                   send_json(res, {{"session_id", svc_.create_session(dc)}}, 201);
                 }));
    server_.Post("/v1/sessions/:id/turns", guarded([this](const httplib::Request& req, httplib::Response& res) {
                   if (!req.is_multipart_form_data())
                     fail(ErrorCode::kMissingField, "turns take multipart/form-data with an 'audio' part");
                   if (!req.has_file("audio")) fail(ErrorCode::kMissingField, "'audio' part is required");
                   std::optional<std::string> video;
                   if (req.has_file("video")) video = req.get_file_value("video").content;
                   const auto r =
                       svc_.post_turn(req.path_params.at("id"), req.get_file_value("audio").content, video);
                   send_json(res, {{"emotion", r.emotion},
                                   {"text", r.text},
                                   {"round_index", r.round_index},
                                   {"warnings", r.warnings}});
                 }));
    server_.Get("/v1/sessions/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
                  send_json(res, svc_.get_transcript(req.path_params.at("id")));
                }));
    server_.Delete("/v1/sessions/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
                     send_json(res, {{"deleted", svc_.delete_session(req.path_params.at("id"))}});
                   }));
    server_.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, res.status == 404 ? "NotFound" : "HttpError", "no such route");
    });
  }

  DialogueService& svc_;
  std::optional<std::string> token_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace avemo
