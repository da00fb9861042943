#include "lstn/app/service.hpp"

#include <httplib.h>

#include <cstdlib>

#include "lstn/errors.hpp"
#include "lstn/evaluation.hpp"

namespace lstn::app {

using nlohmann::json;

namespace {

HttpResponse json_response(int status, const json& body) { return {status, body.dump() + "\n", "application/json"}; }

HttpResponse error_response(int status, const std::string& message) {
  return json_response(status, {{"error", message}});
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) parts.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) parts.push_back(std::move(cur));
  return parts;
}

std::optional<long> parse_long(const std::string& s) {
  if (s.empty()) return std::nullopt;
  char* end = nullptr;
  long v = std::strtol(s.c_str(), &end, 10);
  if (*end != '\0') return std::nullopt;
  return v;
}

json turn_json(std::size_t index, const TranscriptEntry& e) {
  return {{"turn", index + 1},
          {"user", e.user},
          {"response", e.response},
          {"state_marginal", e.marginal},
          {"argmax_state", e.state}};
}

json state_catalog(const ServiceModel& m, int z) {
  json responses = json::array();
  for (const auto& r : m.cache.states[static_cast<std::size_t>(z)])
    responses.push_back(
        {{"text", join_tokens(m.vocab.decode(r.tokens))}, {"log_prob", r.log_prob}, {"terminated", r.terminated}});
  return {{"state", z}, {"responses", std::move(responses)}};
}

}  // namespace

Service::Service(std::shared_ptr<const ServiceModel> model, double idle_seconds, Clock clock)
    : model_(std::move(model)), idle_seconds_(idle_seconds), clock_(std::move(clock)) {
  if (!model_) throw ArgumentError("service needs a model");
  if (model_->cache.num_states() != model_->model.num_states())
    throw ArgumentError("response cache does not match the model");
  if (!clock_) {
    clock_ = [start = std::chrono::steady_clock::now()] {
      return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    };
  }
  context_.model = &model_->model;
  context_.cache = &model_->cache;
  context_.vocab = &model_->vocab;
  context_.lexicon = model_->lexicon ? &*model_->lexicon : nullptr;
}

std::size_t Service::session_count() {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

void Service::expire_idle() {
  const double now = clock_();
  std::lock_guard lock(mutex_);
  std::erase_if(sessions_, [&](const auto& kv) { return now - kv.second->last_used > idle_seconds_; });
}

std::shared_ptr<Service::Slot> Service::find(const std::string& id) {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(id);
  return it == sessions_.end() ? nullptr : it->second;
}

HttpResponse Service::handle(const HttpRequest& req) {
  expire_idle();
  auto parts = split_path(req.path);
  if (parts.size() < 3 || parts[0] != "api" || parts[1] != kApiVersion) return error_response(404, "no such route");
  const std::string& resource = parts[2];
  auto method_not_allowed = [] { return error_response(405, "method not allowed"); };
  try {
    if (resource == "sessions") {
      if (parts.size() == 3) return req.method == "POST" ? create_session() : method_not_allowed();
      const std::string& id = parts[3];
      if (parts.size() == 4) {
        if (req.method == "GET") return get_session(id);
        if (req.method == "DELETE") return delete_session(id);
        return method_not_allowed();
      }
      if (parts.size() == 5 && parts[4] == "utterances")
        return req.method == "POST" ? post_utterance(id, req.body) : method_not_allowed();
      if (parts.size() == 5 && parts[4] == "transcript")
        return req.method == "GET" ? get_transcript(id) : method_not_allowed();
    } else if (resource == "states" && parts.size() <= 4) {
      if (req.method != "GET") return method_not_allowed();
      return get_states(parts.size() == 4 ? std::optional<std::string>(parts[3]) : std::nullopt);
    } else if (resource == "graph" && parts.size() == 3) {
      return req.method == "GET" ? get_graph(req.query) : method_not_allowed();
    } else if (resource == "model" && parts.size() == 3) {
      return req.method == "GET" ? get_model() : method_not_allowed();
    }
  } catch (const ArgumentError& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(500, e.what());
  }
  return error_response(404, "no such route");
}

HttpResponse Service::create_session() {
  auto slot = std::make_shared<Slot>();
  slot->last_used = clock_();
  std::string id;
  {
    std::lock_guard lock(mutex_);
    id = "session-" + std::to_string(next_id_++);
    slot->session.id = id;
    sessions_[id] = slot;
  }
  return json_response(201, {{"session_id", id}, {"num_states", model_->model.num_states()}});
}

HttpResponse Service::post_utterance(const std::string& id, const std::string& body) {
  auto slot = find(id);
  if (!slot) return error_response(404, "unknown session '" + id + "'");
  json j;
  try {
    j = json::parse(body);
  } catch (const json::parse_error&) {
    return error_response(400, "body must be a JSON object with a \"text\" field");
  }
  if (!j.is_object() || !j.contains("text") || !j["text"].is_string())
    return error_response(400, "body must be a JSON object with a \"text\" field");
  std::string text = j["text"].get<std::string>();

  std::lock_guard lock(slot->mutex);
  slot->last_used = clock_();
  const TranscriptEntry& e = session_step(slot->session, text, context_);
  json out = turn_json(slot->session.transcript.size() - 1, e);
  json top = json::array();
  for (const auto& r : model_->cache.states[static_cast<std::size_t>(e.state)])
    top.push_back(join_tokens(model_->vocab.decode(r.tokens)));
  out["top_responses"] = std::move(top);
  out["session_id"] = id;
  return json_response(200, out);
}

HttpResponse Service::get_session(const std::string& id) {
  auto slot = find(id);
  if (!slot) return error_response(404, "unknown session '" + id + "'");
  std::lock_guard lock(slot->mutex);
  slot->last_used = clock_();
  json turns = json::array();
  for (std::size_t i = 0; i < slot->session.transcript.size(); ++i)
    turns.push_back(turn_json(i, slot->session.transcript[i]));
  return json_response(200, {{"session_id", id}, {"num_states", model_->model.num_states()}, {"turns", turns}});
}

HttpResponse Service::get_transcript(const std::string& id) {
  auto slot = find(id);
  if (!slot) return error_response(404, "unknown session '" + id + "'");
  std::lock_guard lock(slot->mutex);
  slot->last_used = clock_();
  return {200, transcript_jsonl(slot->session), "application/x-ndjson"};
}

HttpResponse Service::delete_session(const std::string& id) {
  std::lock_guard lock(mutex_);
  if (sessions_.erase(id) == 0) return error_response(404, "unknown session '" + id + "'");
  return {204, "", "application/json"};
}

HttpResponse Service::get_states(std::optional<std::string> state) {
  const ServiceModel& m = *model_;
  if (state) {
    auto z = parse_long(*state);
    if (!z || *z < 0 || *z >= m.model.num_states()) return error_response(404, "unknown state '" + *state + "'");
    return json_response(200, state_catalog(m, static_cast<int>(*z)));
  }
  json states = json::array();
  for (int z = 0; z < m.model.num_states(); ++z) states.push_back(state_catalog(m, z));
  return json_response(200, {{"num_states", m.model.num_states()}, {"beam_size", m.cache.beam_size}, {"states", states}});
}

HttpResponse Service::get_graph(const std::map<std::string, std::string>& query) {
  long min_edge_count = model_->default_min_edge_count;
  if (auto it = query.find("min_edge_count"); it != query.end()) {
    auto v = parse_long(it->second);
    if (!v || *v < 0) return error_response(400, "min_edge_count must be a non-negative integer");
    min_edge_count = *v;
  }
  DialogFlowGraph g = export_flow_graph(model_->intents, model_->cache, model_->vocab, min_edge_count, model_->top_r);
  return json_response(200, g.to_json());
}

HttpResponse Service::get_model() {
  const ServiceModel& m = *model_;
  return json_response(200, {{"api_version", kApiVersion},
                             {"variant", m.variant},
                             {"num_states", m.model.num_states()},
                             {"vocab_size", m.vocab.size()},
                             {"beam_size", m.cache.beam_size},
                             {"config_hash", m.config_hash},
                             {"bleu_variant", kBleuVariant},
                             {"model", m.model.config.to_json()}});
}

// ---------------------------------------------------------------------------

struct HttpServer::Impl {
  httplib::Server server;
};

HttpServer::HttpServer(Service& service, const std::string& static_dir) : impl_(std::make_unique<Impl>()) {
  auto& server = impl_->server;
  if (!static_dir.empty() && !server.set_mount_point("/", static_dir))
    throw Error("static directory '" + static_dir + "' does not exist");
  auto dispatch = [&service](const httplib::Request& req, httplib::Response& res) {
    HttpRequest r{req.method, req.path, {}, req.body};
    for (const auto& [k, v] : req.params) r.query[k] = v;
    HttpResponse out = service.handle(r);
    res.status = out.status;
    if (out.status != 204) res.set_content(out.body, out.content_type);
  };
  server.Get("/api/.*", dispatch);
  server.Post("/api/.*", dispatch);
  server.Delete("/api/.*", dispatch);
  server.Put("/api/.*", dispatch);
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind to " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind to " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace lstn::app
