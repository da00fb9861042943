#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "lstn/corpus.hpp"
#include "lstn/inference.hpp"

namespace lstn {

/// User utterances that moved the argmax state from `from` to `to` when the
/// training dialogs were replayed through track_state.
struct IntentClass {
  int from = kStartState;
  int to = 0;
  long count = 0;
  /// Distinct utterances with their counts, most frequent first, then by text.
  std::vector<std::pair<std::string, long>> utterances;

  bool operator==(const IntentClass&) const = default;
};

/// Sorted by (from, to), START first.
std::vector<IntentClass> mine_intents(const LstnModel& model, const Vocabulary& vocab,
                                      const std::vector<Dialog>& dialogs);

/// States whose rank-1 cached responses have token-set Jaccard similarity
/// >= threshold, merged transitively. Only groups of two or more states are
/// returned, each sorted, ordered by their first state.
std::vector<std::vector<int>> detect_duplicates(const ResponseCache& cache, double threshold = 0.8);
double jaccard(const IdSeq& a, const IdSeq& b);

struct GraphNode {
  int state = kStartState;
  std::vector<std::string> responses;  // top-R cached responses

  bool operator==(const GraphNode&) const = default;
};

struct GraphEdge {
  int from = kStartState;
  int to = 0;
  long count = 0;
  std::vector<std::string> samples;  // at most 3

  bool operator==(const GraphEdge&) const = default;
};

struct DialogFlowGraph {
  long min_edge_count = 1;
  int top_r = 3;
  std::vector<GraphNode> nodes;  // START, then states in id order
  std::vector<GraphEdge> edges;  // by (from, to)

  bool operator==(const DialogFlowGraph&) const = default;

  /// Graphviz digraph.
  std::string to_dot() const;
  /// One header record, then one record per node and per edge.
  std::string to_jsonl() const;
  static DialogFlowGraph parse_jsonl(const std::string& text);
  nlohmann::json to_json() const;
};

inline constexpr int kMaxEdgeSamples = 3;

/// Nodes are START plus every state touched by a mined transition; edges
/// with count below min_edge_count are dropped.
DialogFlowGraph export_flow_graph(const std::vector<IntentClass>& intents, const ResponseCache& cache,
                                  const Vocabulary& vocab, long min_edge_count = 1, int top_r = 3);

nlohmann::json intents_to_json(const std::vector<IntentClass>& intents);
std::vector<IntentClass> intents_from_json(const nlohmann::json& j);

}  // namespace lstn
