#pragma once

// The latent state tracking network: an utterance encoder, a transition
// classifier over K discrete states conditioned on the previous state, and
// a recurrent decoder that emits the agent response from the current state.
//
//   p(z_i | z_{i-1}, x_i) = softmax(W [h(x_i); v_{z_{i-1}}] + b)
//   p(y_i | z_i)          = prod_j p(w_j | w_<j, z_i), decoder hidden state
//                           initialized with r_{z_i}

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "lstn/corpus.hpp"
#include "lstn/diffcore.hpp"

namespace lstn {

/// Predecessor of the first turn. Valid only as a previous state.
inline constexpr int kStartState = -1;

namespace param_names {
inline const std::string kWordEmbedding = "word_emb";
inline const std::string kEncoder = "enc";
inline const std::string kTransitionW = "trans.W";
inline const std::string kTransitionB = "trans.b";
inline const std::string kTransitionStates = "state_v";  // K + 1 rows, last = START
inline const std::string kEmissionStates = "state_r";    // K rows, absent when shared
inline const std::string kDecoder = "dec";
inline const std::string kOutputW = "out.W";
inline const std::string kOutputB = "out.b";
}  // namespace param_names

struct ModelConfig {
  int num_states = 8;
  int vocab_size = 0;
  int embed_dim = 32;
  /// Encoder and decoder hidden size; also the state embedding size.
  int hidden_dim = 32;
  bool shared_state_embeddings = false;
  int max_response_len = 40;
  int bos_id = Vocabulary::kBos;
  int eos_id = Vocabulary::kEos;
  std::uint64_t vocab_fingerprint = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

struct LstnModel {
  ModelConfig config;
  ParamStore store;

  /// Registers all parameters and initializes them uniformly in
  /// [-init_range, init_range].
  static LstnModel create(const ModelConfig& config, double init_range, std::uint64_t seed);

  int num_states() const { return config.num_states; }
  /// Table holding r_z: state_v when embeddings are shared.
  const std::string& emission_table() const;

  /// Model checkpoint: parameter store plus the model config record.
  nlohmann::json to_json() const;
  static LstnModel from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static LstnModel load(const std::filesystem::path& path);
};

/// Registers the parameters used by encode/transition/emission on `store`.
void add_lstn_params(ParamStore& store, const ModelConfig& config);

// ---------------------------------------------------------------------------
// Differentiable builders

/// Final hidden state of `cell` run over the word embeddings of x.
Var encode_utterance_node(Tape& tape, std::span<const int> x, const std::string& cell = param_names::kEncoder);

/// Log transition probabilities: column p is the distribution over the K
/// next states given predecessor predecessors[p] (kStartState allowed).
Var transition_logprobs_node(Tape& tape, const ModelConfig& config, Var hidden, std::span<const int> predecessors);

/// log p(y | z) for each z in `states`, as a column. y must end with EOS.
Var emission_logprobs_node(Tape& tape, const ModelConfig& config, std::span<const int> y,
                           std::span<const int> states, const std::string& state_table);

/// Convenience: all K states, using the model's emission table.
Var emission_logprobs_node(Tape& tape, const LstnModel& model, std::span<const int> y);

// ---------------------------------------------------------------------------
// Plain evaluation

Vector encode_utterance(const LstnModel& model, std::span<const int> x);
Vector transition_logprobs(const LstnModel& model, int prev_state, std::span<const int> x);
/// K x (K + 1): columns 0..K-1 are predecessors, column K is START.
Matrix transition_table(const LstnModel& model, std::span<const int> x);
double emission_logprob(const LstnModel& model, std::span<const int> y, int state);
Vector emission_logprobs(const LstnModel& model, std::span<const int> y);
/// Log-probabilities of the next response token after `prefix` (no BOS).
Vector emission_next_token(const LstnModel& model, std::span<const int> prefix, int state);
/// Sum over turns of log p(z_i | z_{i-1}, x_i) + log p(y_i | z_i), z_0 = START.
double joint_logprob(const LstnModel& model, const EncodedDialog& dialog, std::span<const int> states);

/// Batched decoder state for step-wise generation, one column per hypothesis.
struct DecoderState {
  Matrix hidden;
  Matrix cell;
};

DecoderState decoder_start(const LstnModel& model, std::span<const int> states);
/// Feeds prev_tokens (one per column) and returns V x B next-token
/// log-probabilities; advances `state`.
Matrix decoder_step(const LstnModel& model, DecoderState& state, std::span<const int> prev_tokens);

// ---------------------------------------------------------------------------
// Per-dialog factors

/// log_trans[0] is K x 1 (from START); later turns are K x K with
/// column = previous state, row = current state. log_emit[i] holds
/// log p(y_i | z) for all z.
struct DialogFactors {
  std::vector<Matrix> log_trans;
  std::vector<Vector> log_emit;
  int num_turns() const { return static_cast<int>(log_emit.size()); }
};

/// Memoizes encoder and emission evaluations for one fixed parameter
/// snapshot. Corpora built from templates repeat utterances heavily.
class FactorCache {
 public:
  explicit FactorCache(const LstnModel& model) : model_(&model) {}
  const Matrix& transition_table(const IdSeq& x);
  const Vector& emission(const IdSeq& y);
  DialogFactors factors(const EncodedDialog& dialog);

 private:
  const LstnModel* model_;
  std::map<IdSeq, Matrix> transitions_;
  std::map<IdSeq, Vector> emissions_;
};

DialogFactors compute_factors(const LstnModel& model, const EncodedDialog& dialog);

/// Same factors as graph nodes, deduplicating repeated utterances and
/// responses within one tape.
struct FactorNodes {
  std::vector<Var> log_trans;
  std::vector<Var> log_emit;
};

class FactorNodeCache {
 public:
  FactorNodeCache(Tape& tape, const LstnModel& model) : tape_(&tape), model_(&model) {}
  FactorNodes build(const EncodedDialog& dialog);
  Var transition_table(const IdSeq& x);
  Var emission(const IdSeq& y);

 private:
  Tape* tape_;
  const LstnModel* model_;
  std::map<IdSeq, Var> transitions_;
  std::map<IdSeq, Var> emissions_;
};

DialogFactors factor_values(const FactorNodes& nodes);

}  // namespace lstn
