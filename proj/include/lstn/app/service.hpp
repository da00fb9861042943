#pragma once

// Live chat sessions over a trained model, exposed as JSON over HTTP.
//
//   POST   /api/v1/sessions                       -> 201 {session_id, num_states}
//   POST   /api/v1/sessions/{id}/utterances       {"text": "..."}
//          -> {turn, user, response, state_marginal, argmax_state, top_responses}
//   GET    /api/v1/sessions/{id}                  -> {session_id, turns: [...]}
//   GET    /api/v1/sessions/{id}/transcript       -> line-delimited turn records
//   DELETE /api/v1/sessions/{id}                  -> 204
//   GET    /api/v1/states                         -> per-state response catalog
//   GET    /api/v1/states/{z}                     -> one state's catalog
//   GET    /api/v1/graph?min_edge_count=N         -> dialog-flow graph
//   GET    /api/v1/model                          -> K, vocabulary size, config hash
//
// Errors carry {"error": message}: 400 malformed request, 404 unknown
// session/state/route, 405 wrong method.

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "lstn/inference.hpp"
#include "lstn/interpret.hpp"

namespace lstn::app {

inline constexpr const char* kApiVersion = "v1";

struct ServiceModel {
  LstnModel model;
  Vocabulary vocab;
  ResponseCache cache;
  std::optional<EntityLexicon> lexicon;
  std::vector<IntentClass> intents;
  std::string config_hash;
  std::string variant = "lstn";
  int top_r = 3;
  long default_min_edge_count = 1;
};

struct HttpRequest {
  std::string method;
  std::string path;
  std::map<std::string, std::string> query;
  std::string body;
};

struct HttpResponse {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

class Service {
 public:
  using Clock = std::function<double()>;  // seconds

  /// `clock` defaults to a steady clock; tests inject their own.
  Service(std::shared_ptr<const ServiceModel> model, double idle_seconds, Clock clock = {});

  HttpResponse handle(const HttpRequest& request);

  std::size_t session_count();
  /// Drops sessions idle for longer than the configured time.
  void expire_idle();

 private:
  struct Slot {
    std::mutex mutex;
    Session session;
    double last_used = 0.0;
  };

  std::shared_ptr<Slot> find(const std::string& id);
  HttpResponse create_session();
  HttpResponse post_utterance(const std::string& id, const std::string& body);
  HttpResponse get_session(const std::string& id);
  HttpResponse get_transcript(const std::string& id);
  HttpResponse delete_session(const std::string& id);
  HttpResponse get_states(std::optional<std::string> state);
  HttpResponse get_graph(const std::map<std::string, std::string>& query);
  HttpResponse get_model();

  std::shared_ptr<const ServiceModel> model_;
  SessionContext context_;
  double idle_seconds_;
  Clock clock_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
  std::uint64_t next_id_ = 1;
};

/// HTTP front end for a Service. Files in static_dir (if non-empty) are
/// served under "/".
class HttpServer {
 public:
  explicit HttpServer(Service& service, const std::string& static_dir = "");
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace lstn::app
