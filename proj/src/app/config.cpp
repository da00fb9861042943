#include "lstn/app/config.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <sstream>
#include <type_traits>

#include "lstn/errors.hpp"
#include "lstn/hash.hpp"

namespace lstn::app {

using nlohmann::json;

namespace {

enum Scope { kResult, kPath, kService };

// Single field table shared by flag binding, serialization and hashing.
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  f("learning_rate", c.train.learning_rate, "Adam learning rate", kResult);
  f("embedding_dim", c.train.embedding_dim, "word embedding size", kResult);
  f("hidden_dim", c.train.hidden_dim, "encoder/decoder hidden size", kResult);
  f("num_states", c.train.num_states, "number of latent states K", kResult);
  f("shared_state_embeddings", c.train.shared_state_embeddings, "one embedding table for transitions and emissions",
    kResult);
  f("batch_size", c.train.batch_size, "dialogs per minibatch", kResult);
  f("epochs", c.train.epochs, "training epochs", kResult);
  f("seed", c.train.seed, "initialization and shuffling seed", kResult);
  f("m_steps_per_e_step", c.train.m_steps_per_e_step, "Adam steps per E-step", kResult);
  f("max_response_len", c.train.max_response_len, "decoding length cap", kResult);
  f("init_range", c.train.init_range, "uniform initialization half-width", kResult);
  f("restarts", c.train.restarts, "random restarts", kResult);
  f("probe_epochs", c.train.probe_epochs, "epochs each restart runs before selection", kResult);
  f("anneal_epochs", c.train.anneal_epochs, "posterior annealing epochs (0 = off)", kResult);
  f("anneal_start", c.train.anneal_start, "initial annealing exponent", kResult);
  f("allow_off_grid", c.train.allow_off_grid, "accept hyperparameters outside the standard grids", kResult);

  f("corpus", c.corpus, "corpus file", kPath);
  f("corpus_format", c.corpus_format, "jsonl or plain", kResult);
  f("lexicon", c.lexicon, "entity lexicon (jsonl) for anonymization", kPath);
  f("gold_labels", c.gold_labels, "jsonl corpus with per-turn gold states", kPath);
  f("dataset", c.dataset, "dataset name recorded in reports", kResult);
  f("min_count", c.min_count, "vocabulary frequency cutoff", kResult);
  f("run_dir", c.run_dir, "directory for all run artifacts", kPath);

  f("beam_size", c.beam_size, "responses cached per state", kResult);
  f("max_len", c.max_len, "beam search length cap (0 = max_response_len)", kResult);
  f("length_normalize", c.length_normalize, "rank beams by mean token log-probability", kResult);
  f("eval_split", c.eval_split, "split scored by eval (train, dev, test)", kResult);

  f("include_agent_context", c.include_agent_context, "split-LSTN context includes agent responses", kResult);

  f("min_edge_count", c.min_edge_count, "drop flow-graph edges seen fewer times", kResult);
  f("top_r", c.top_r, "responses shown per graph node", kResult);
  f("duplicate_threshold", c.duplicate_threshold, "Jaccard threshold for duplicate states", kResult);

  f("k_values", c.k_values, "K values for sweep-k", kResult);

  f("machine", c.machine, "oracle machine file for synth", kPath);
  f("synth_dialogs", c.synth_dialogs, "dialogs generated by synth", kResult);
  f("synth_max_turns", c.synth_max_turns, "maximum turns per synthetic dialog", kResult);
  f("synth_seed", c.synth_seed, "synth sampling seed", kResult);

  f("gradcheck_states", c.gradcheck_states, "K for gradcheck", kResult);
  f("gradcheck_turns", c.gradcheck_turns, "turns per gradcheck dialog", kResult);
  f("gradcheck_dim", c.gradcheck_dim, "embedding and hidden size for gradcheck", kResult);
  f("gradcheck_seeds", c.gradcheck_seeds, "random models checked", kResult);
  f("gradcheck_coords", c.gradcheck_coords, "coordinates sampled per parameter (0 = all)", kResult);
  f("gradcheck_tolerance", c.gradcheck_tolerance, "maximum accepted relative error", kResult);

  f("host", c.host, "bind address for serve", kService);
  f("port", c.port, "port for serve", kService);
  f("session_idle_seconds", c.session_idle_seconds, "idle time before a session expires", kService);
  f("static_dir", c.static_dir, "static files served under /", kService);
}

std::string ini_value(const std::string& v) { return json(v).dump(); }
std::string ini_value(bool v) { return v ? "true" : "false"; }
std::string ini_value(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);  // shortest round-trip form
  std::string s(buf, res.ptr);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}
template <class T>
  requires std::is_integral_v<T>
std::string ini_value(T v) {
  return std::to_string(v);
}
std::string ini_value(const std::vector<int>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  if (corpus_format != "jsonl" && corpus_format != "plain")
    throw ArgumentError("corpus_format must be 'jsonl' or 'plain'");
  if (min_count < 1) throw ArgumentError("min_count must be >= 1");
  if (beam_size < 1) throw ArgumentError("beam_size must be >= 1");
  if (max_len < 0) throw ArgumentError("max_len must be >= 0");
  if (eval_split != "train" && eval_split != "dev" && eval_split != "test")
    throw ArgumentError("eval_split must be train, dev or test");
  if (min_edge_count < 0) throw ArgumentError("min_edge_count must be >= 0");
  if (top_r < 0) throw ArgumentError("top_r must be >= 0");
  if (duplicate_threshold < 0.0 || duplicate_threshold > 1.0)
    throw ArgumentError("duplicate_threshold must be in [0, 1]");
  if (k_values.empty()) throw ArgumentError("k_values must not be empty");
  for (int k : k_values)
    if (k < 1) throw ArgumentError("k_values entries must be >= 1");
  if (synth_dialogs < 1 || synth_max_turns < 1) throw ArgumentError("synth_dialogs and synth_max_turns must be >= 1");
  if (gradcheck_states < 1 || gradcheck_turns < 1 || gradcheck_dim < 1 || gradcheck_seeds < 1)
    throw ArgumentError("gradcheck sizes must be >= 1");
  if (port < 0 || port > 65535) throw ArgumentError("port must be in [0, 65535]");
  if (!(session_idle_seconds > 0.0)) throw ArgumentError("session_idle_seconds must be positive");
}

BeamConfig RunConfig::beam() const { return {beam_size, max_len, length_normalize}; }

json RunConfig::to_json() const {
  json j = json::object();
  visit_fields(*this, [&](const char* name, const auto& value, const char*, Scope) { j[name] = value; });
  return j;
}

std::string RunConfig::to_ini() const {
  std::string out;
  visit_fields(*this, [&](const char* name, const auto& value, const char*, Scope) {
    out += std::string(name) + " = " + ini_value(value) + "\n";
  });
  return out;
}

std::string RunConfig::config_hash() const {
  json j = json::object();
  visit_fields(*this, [&](const char* name, const auto& value, const char*, Scope scope) {
    if (scope == kResult) j[name] = value;
  });
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(j.dump())));
  return buf;
}

void bind_options(CLI::App& app, RunConfig& config) {
  app.set_config("--config", "", "file of key = value settings");
  visit_fields(config, [&](const char* name, auto& value, const char* help, Scope) {
    std::string snake = name;
    std::string kebab = snake;
    for (char& ch : kebab)
      if (ch == '_') ch = '-';
    std::string names = "--" + snake + (kebab != snake ? ",--" + kebab : "");
    using T = std::remove_reference_t<decltype(value)>;
    if constexpr (std::is_same_v<T, bool>) {
      app.add_flag(names, value, help);
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      app.add_option(names, value, help)->delimiter(',')->capture_default_str();
    } else {
      app.add_option(names, value, help)->capture_default_str();
    }
  });
}

}  // namespace lstn::app
