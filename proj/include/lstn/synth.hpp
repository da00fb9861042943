#pragma once

// Ground-truth finite-state dialog machine. States emit templated agent
// responses; user intents (each with a few paraphrases) drive deterministic
// transitions. Corpora sampled from it come with per-turn gold states.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lstn/corpus.hpp"

namespace lstn {

struct OracleMachine {
  std::vector<std::string> state_names;
  std::vector<std::vector<std::string>> templates;  // per state
  std::vector<std::string> intent_names;
  std::vector<std::vector<std::string>> paraphrases;  // per intent
  /// (state or kStartState, intent) -> next state
  std::map<std::pair<int, int>, int> transitions;

  int num_states() const { return static_cast<int>(state_names.size()); }
  int num_intents() const { return static_cast<int>(intent_names.size()); }

  /// Throws if a state is unreachable from START, START has no outgoing
  /// intent, or a state/intent lacks templates.
  void validate() const;

  /// Distinct (from, to) state pairs, START encoded as kStartState.
  std::set<std::pair<int, int>> transition_pairs() const;

  /// greet -> request -> inform -> thank, five intents with three
  /// paraphrases each. "ok" means different things in greet and inform.
  static OracleMachine default_machine();

  /// Line-oriented text:
  ///   state <name>          followed by   template <text>  lines
  ///   intent <name>         followed by   say <text>       lines
  ///   transition <from|START> <intent> <to>
  std::string to_text() const;
  static OracleMachine parse(std::istream& in);
  static OracleMachine load(const std::filesystem::path& path);
};

struct SyntheticCorpus {
  CorpusSplit corpus;
  TurnLabels gold;
};

/// Random intent walks of uniform length in [1, max_turns], split 80/10/10
/// in generation order.
SyntheticCorpus generate_corpus(const OracleMachine& machine, int n_dialogs, int max_turns, std::uint64_t seed);

/// Purity: fraction of turns whose learned label agrees with the majority
/// gold state of that label.
double state_recovery(const std::vector<int>& learned, const std::vector<int>& gold);

/// Each learned label mapped to the gold state it overlaps most (ties toward
/// the lower gold id). This is the alignment purity scores against.
std::map<int, int> majority_alignment(const std::vector<int>& learned, const std::vector<int>& gold);

}  // namespace lstn
