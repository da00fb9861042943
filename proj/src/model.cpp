#include "lstn/model.hpp"

#include <fstream>
#include <numeric>

#include "lstn/errors.hpp"

namespace lstn {

using nlohmann::json;
namespace pn = param_names;

namespace {

std::vector<int> all_states(int k) {
  std::vector<int> s(static_cast<std::size_t>(k));
  std::iota(s.begin(), s.end(), 0);
  return s;
}

}  // namespace

void ModelConfig::validate() const {
  if (num_states < 1) throw ArgumentError("num_states must be >= 1");
  if (vocab_size < 1) throw ArgumentError("vocab_size must be >= 1");
  if (embed_dim < 1 || hidden_dim < 1) throw ArgumentError("embedding and hidden sizes must be >= 1");
  if (max_response_len < 1) throw ArgumentError("max_response_len must be >= 1");
  if (bos_id < 0 || bos_id >= vocab_size || eos_id < 0 || eos_id >= vocab_size)
    throw ArgumentError("BOS/EOS ids outside the vocabulary");
}

json ModelConfig::to_json() const {
  return {{"num_states", num_states},
          {"vocab_size", vocab_size},
          {"embed_dim", embed_dim},
          {"hidden_dim", hidden_dim},
          {"shared_state_embeddings", shared_state_embeddings},
          {"max_response_len", max_response_len},
          {"bos_id", bos_id},
          {"eos_id", eos_id},
          {"vocab_fingerprint", vocab_fingerprint}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  c.num_states = j.at("num_states").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.shared_state_embeddings = j.at("shared_state_embeddings").get<bool>();
  c.max_response_len = j.at("max_response_len").get<int>();
  c.bos_id = j.at("bos_id").get<int>();
  c.eos_id = j.at("eos_id").get<int>();
  c.vocab_fingerprint = j.at("vocab_fingerprint").get<std::uint64_t>();
  return c;
}

void add_lstn_params(ParamStore& store, const ModelConfig& c) {
  store.add(pn::kWordEmbedding, c.vocab_size, c.embed_dim);
  add_lstm_params(store, pn::kEncoder, c.embed_dim, c.hidden_dim);
  store.add(pn::kTransitionW, c.num_states, 2L * c.hidden_dim);
  store.add(pn::kTransitionB, c.num_states, 1);
  store.add(pn::kTransitionStates, c.num_states + 1, c.hidden_dim);
  if (!c.shared_state_embeddings) store.add(pn::kEmissionStates, c.num_states, c.hidden_dim);
  add_lstm_params(store, pn::kDecoder, c.embed_dim, c.hidden_dim);
  store.add(pn::kOutputW, c.vocab_size, c.hidden_dim);
  store.add(pn::kOutputB, c.vocab_size, 1);
}

LstnModel LstnModel::create(const ModelConfig& config, double init_range, std::uint64_t seed) {
  config.validate();
  LstnModel m;
  m.config = config;
  add_lstn_params(m.store, config);
  m.store.init_uniform(init_range, seed);
  return m;
}

const std::string& LstnModel::emission_table() const {
  return config.shared_state_embeddings ? pn::kTransitionStates : pn::kEmissionStates;
}

json LstnModel::to_json() const {
  return {{"format", "lstn-model"}, {"version", 1}, {"model", config.to_json()}, {"params", store.to_json()}};
}

LstnModel LstnModel::from_json(const json& j) {
  if (j.value("format", "") != "lstn-model") throw ParseError("not an lstn model checkpoint", 1);
  LstnModel m;
  m.config = ModelConfig::from_json(j.at("model"));
  m.store = ParamStore::from_json(j.at("params"));
  return m;
}

void LstnModel::save(const std::filesystem::path& path, const json& extra) const {
  json j = to_json();
  if (!extra.is_null()) j["meta"] = extra;
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  out << j.dump() << '\n';
}

LstnModel LstnModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed checkpoint: ") + e.what(), 1);
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------

Var encode_utterance_node(Tape& tape, std::span<const int> x, const std::string& cell) {
  if (x.empty()) throw ArgumentError("encode_utterance: empty utterance");
  long hidden = tape.param(cell + ".Wh").cols();
  LstmState state{tape.constant(Matrix::Zero(hidden, 1)), tape.constant(Matrix::Zero(hidden, 1))};
  Var table = tape.param(pn::kWordEmbedding);
  for (int token : x) {
    int idx[] = {token};
    state = recurrent_step(state, ad::gather_rows(table, idx), cell);
  }
  return state.hidden;
}

Var transition_logprobs_node(Tape& tape, const ModelConfig& config, Var hidden, std::span<const int> predecessors) {
  std::vector<int> rows;
  rows.reserve(predecessors.size());
  for (int p : predecessors) {
    if (p == kStartState)
      rows.push_back(config.num_states);
    else if (p < 0 || p >= config.num_states)
      throw RangeError("previous state " + std::to_string(p) + " outside [0, " + std::to_string(config.num_states) + ")");
    else
      rows.push_back(p);
  }
  Var states = ad::gather_rows(tape.param(pn::kTransitionStates), rows);
  Var input = ad::concat_rows(ad::repeat_cols(hidden, static_cast<long>(rows.size())), states);
  return ad::log_softmax(affine(input, pn::kTransitionW, pn::kTransitionB));
}

Var emission_logprobs_node(Tape& tape, const ModelConfig& config, std::span<const int> y,
                           std::span<const int> states, const std::string& state_table) {
  if (y.empty() || y.back() != config.eos_id) throw ArgumentError("emission_logprob: response must end with EOS");
  for (int z : states)
    if (z < 0 || z >= config.num_states)
      throw RangeError("state " + std::to_string(z) + " outside [0, " + std::to_string(config.num_states) + ")");
  Var h0 = ad::gather_rows(tape.param(state_table), states);
  LstmState state{h0, tape.constant(Matrix::Zero(h0.rows(), h0.cols()))};
  Var table = tape.param(pn::kWordEmbedding);
  Var total;
  int prev = config.bos_id;
  for (int token : y) {
    if (token < 0 || token >= config.vocab_size)
      throw RangeError("token id " + std::to_string(token) + " outside vocabulary of size " +
                       std::to_string(config.vocab_size));
    int idx[] = {prev};
    state = recurrent_step(state, ad::gather_rows(table, idx), pn::kDecoder);
    Var logp = ad::log_softmax(affine(state.hidden, pn::kOutputW, pn::kOutputB));
    Var pick = ad::select_row(logp, token);
    total = total.valid() ? ad::add(total, pick) : pick;
    prev = token;
  }
  return total;
}

Var emission_logprobs_node(Tape& tape, const LstnModel& model, std::span<const int> y) {
  auto states = all_states(model.num_states());
  return emission_logprobs_node(tape, model.config, y, states, model.emission_table());
}

// ---------------------------------------------------------------------------

Vector encode_utterance(const LstnModel& model, std::span<const int> x) {
  Tape tape(model.store);
  return encode_utterance_node(tape, x).value();
}

Vector transition_logprobs(const LstnModel& model, int prev_state, std::span<const int> x) {
  Tape tape(model.store);
  int preds[] = {prev_state};
  return transition_logprobs_node(tape, model.config, encode_utterance_node(tape, x), preds).value().col(0);
}

Matrix transition_table(const LstnModel& model, std::span<const int> x) {
  Tape tape(model.store);
  auto preds = all_states(model.num_states());
  preds.push_back(kStartState);
  return transition_logprobs_node(tape, model.config, encode_utterance_node(tape, x), preds).value();
}

double emission_logprob(const LstnModel& model, std::span<const int> y, int state) {
  Tape tape(model.store);
  int states[] = {state};
  return emission_logprobs_node(tape, model.config, y, states, model.emission_table()).scalar();
}

Vector emission_logprobs(const LstnModel& model, std::span<const int> y) {
  Tape tape(model.store);
  return emission_logprobs_node(tape, model, y).value().col(0);
}

DecoderState decoder_start(const LstnModel& model, std::span<const int> states) {
  const Matrix& table = model.store.at(model.emission_table()).value;
  DecoderState s;
  s.hidden.resize(table.cols(), static_cast<long>(states.size()));
  for (std::size_t j = 0; j < states.size(); ++j) {
    if (states[j] < 0 || states[j] >= model.num_states())
      throw RangeError("state " + std::to_string(states[j]) + " outside [0, " + std::to_string(model.num_states()) + ")");
    s.hidden.col(static_cast<long>(j)) = table.row(states[j]).transpose();
  }
  s.cell = Matrix::Zero(s.hidden.rows(), s.hidden.cols());
  return s;
}

Matrix decoder_step(const LstnModel& model, DecoderState& state, std::span<const int> prev_tokens) {
  Tape tape(model.store);
  LstmState prev{tape.constant(state.hidden), tape.constant(state.cell)};
  Var input = ad::gather_rows(tape.param(pn::kWordEmbedding), prev_tokens);
  LstmState next = recurrent_step(prev, input, pn::kDecoder);
  Var logp = ad::log_softmax(affine(next.hidden, pn::kOutputW, pn::kOutputB));
  state.hidden = next.hidden.value();
  state.cell = next.cell.value();
  return logp.value();
}

Vector emission_next_token(const LstnModel& model, std::span<const int> prefix, int state) {
  int states[] = {state};
  DecoderState s = decoder_start(model, states);
  int tok[] = {model.config.bos_id};
  Matrix logp = decoder_step(model, s, tok);
  for (int t : prefix) {
    tok[0] = t;
    logp = decoder_step(model, s, tok);
  }
  return logp.col(0);
}

double joint_logprob(const LstnModel& model, const EncodedDialog& dialog, std::span<const int> states) {
  if (states.size() != dialog.turns.size())
    throw ArgumentError("joint_logprob: " + std::to_string(states.size()) + " states for " +
                        std::to_string(dialog.turns.size()) + " turns");
  double total = 0.0;
  int prev = kStartState;
  for (std::size_t i = 0; i < states.size(); ++i) {
    total += transition_logprobs(model, prev, dialog.turns[i].user)(states[i]);
    total += emission_logprob(model, dialog.turns[i].agent, states[i]);
    prev = states[i];
  }
  return total;
}

// ---------------------------------------------------------------------------

const Matrix& FactorCache::transition_table(const IdSeq& x) {
  auto it = transitions_.find(x);
  if (it == transitions_.end()) it = transitions_.emplace(x, lstn::transition_table(*model_, x)).first;
  return it->second;
}

const Vector& FactorCache::emission(const IdSeq& y) {
  auto it = emissions_.find(y);
  if (it == emissions_.end()) it = emissions_.emplace(y, emission_logprobs(*model_, y)).first;
  return it->second;
}

DialogFactors FactorCache::factors(const EncodedDialog& dialog) {
  if (dialog.turns.empty()) throw ArgumentError("dialog '" + dialog.id + "' has no turns");
  const int k = model_->num_states();
  DialogFactors f;
  for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
    const Matrix& table = transition_table(dialog.turns[i].user);
    f.log_trans.push_back(i == 0 ? Matrix(table.col(k)) : Matrix(table.leftCols(k)));
    f.log_emit.push_back(emission(dialog.turns[i].agent));
  }
  return f;
}

DialogFactors compute_factors(const LstnModel& model, const EncodedDialog& dialog) {
  FactorCache cache(model);
  return cache.factors(dialog);
}

Var FactorNodeCache::transition_table(const IdSeq& x) {
  auto it = transitions_.find(x);
  if (it != transitions_.end()) return it->second;
  auto preds = all_states(model_->num_states());
  preds.push_back(kStartState);
  Var table = transition_logprobs_node(*tape_, model_->config, encode_utterance_node(*tape_, x), preds);
  transitions_.emplace(x, table);
  return table;
}

Var FactorNodeCache::emission(const IdSeq& y) {
  auto it = emissions_.find(y);
  if (it != emissions_.end()) return it->second;
  Var e = emission_logprobs_node(*tape_, *model_, y);
  emissions_.emplace(y, e);
  return e;
}

FactorNodes FactorNodeCache::build(const EncodedDialog& dialog) {
  if (dialog.turns.empty()) throw ArgumentError("dialog '" + dialog.id + "' has no turns");
  const long k = model_->num_states();
  FactorNodes f;
  for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
    Var table = transition_table(dialog.turns[i].user);
    f.log_trans.push_back(i == 0 ? ad::slice_cols(table, k, 1) : ad::slice_cols(table, 0, k));
    f.log_emit.push_back(emission(dialog.turns[i].agent));
  }
  return f;
}

DialogFactors factor_values(const FactorNodes& nodes) {
  DialogFactors f;
  for (const auto& v : nodes.log_trans) f.log_trans.push_back(v.value());
  for (const auto& v : nodes.log_emit) f.log_emit.push_back(v.value().col(0));
  return f;
}

}  // namespace lstn
