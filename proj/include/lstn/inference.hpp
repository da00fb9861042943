#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "lstn/corpus.hpp"
#include "lstn/model.hpp"

namespace lstn {

/// Belief over the current state given the user utterances so far,
/// p(z_i | x_{1:i}). The initial marginal is a point mass on START.
class StateMarginal {
 public:
  static StateMarginal initial() { return StateMarginal(); }
  static StateMarginal from_log_probs(Vector log_probs);

  bool is_initial() const { return initial_; }
  const Vector& log_probs() const { return log_probs_; }
  Vector probs() const { return log_probs_.array().exp().matrix(); }
  int num_states() const { return static_cast<int>(log_probs_.size()); }
  /// Most probable state, ties toward the lowest id.
  int argmax() const;

 private:
  StateMarginal() = default;
  bool initial_ = true;
  Vector log_probs_;
};

struct CachedResponse {
  IdSeq tokens;  // without EOS
  double log_prob = 0.0;
  bool terminated = true;  // false: length-capped beam used as padding
};

struct ResponseCache {
  int beam_size = 0;
  std::vector<std::vector<CachedResponse>> states;

  int num_states() const { return static_cast<int>(states.size()); }
  nlohmann::json to_json() const;
  static ResponseCache from_json(const nlohmann::json& j);
};

struct BeamConfig {
  int beam_size = 10;
  /// 0 = model.config.max_response_len
  int max_len = 0;
  /// Rank by mean per-token log-probability instead of the total.
  bool length_normalize = false;
};

/// Per-state top responses by beam search over the decoder, run once.
/// PAD and BOS are never generated.
ResponseCache build_response_cache(const LstnModel& model, const BeamConfig& config = {});
std::vector<CachedResponse> beam_search(const LstnModel& model, int state, const BeamConfig& config = {});

/// p(z_i | x_{1:i}) = sum_{z'} p(z_i | z', x_i) p(z' | x_{1:i-1})
StateMarginal track_state(const StateMarginal& prev, std::span<const int> x, const LstnModel& model);
StateMarginal track_state(const StateMarginal& prev, const Matrix& transition_table);

struct Reply {
  int state = 0;
  IdSeq tokens;
};

/// Rank-1 cached response of the most probable state.
Reply respond(const StateMarginal& marginal, const ResponseCache& cache);
/// Same state choice; the response is drawn uniformly from the state's list.
Reply respond_sampled(const StateMarginal& marginal, const ResponseCache& cache, std::mt19937_64& rng);

struct TranscriptEntry {
  std::string user;
  std::vector<double> marginal;
  int state = 0;
  std::string response;
};

struct Session {
  std::string id;
  StateMarginal marginal = StateMarginal::initial();
  std::vector<TranscriptEntry> transcript;
  /// Entity placeholder indices persist across the session's turns.
  std::optional<EntityIndexer> indexer;
};

struct SessionContext {
  const LstnModel* model = nullptr;
  const ResponseCache* cache = nullptr;
  const Vocabulary* vocab = nullptr;
  const EntityLexicon* lexicon = nullptr;  // optional
};

/// Tokenizes (and anonymizes, when a lexicon is configured), advances the
/// marginal, answers and appends to the transcript.
const TranscriptEntry& session_step(Session& session, const std::string& user_utterance, const SessionContext& ctx);

/// Line-delimited {turn, user, marginal, state, response}.
std::string transcript_jsonl(const Session& session);

}  // namespace lstn
