#include <doctest.h>

#include <map>

#include "lstn/evaluation.hpp"
#include "lstn/interpret.hpp"
#include "lstn/synth.hpp"
#include "support.hpp"

using namespace lstn;
using namespace lstn::testing;

namespace {

ResponseCache cache_of(const Vocabulary& vocab, const std::vector<std::string>& rank1) {
  ResponseCache c;
  c.beam_size = 1;
  for (const auto& text : rank1) c.states.push_back({{vocab.encode(tokenize(text)), -1.0, true}});
  return c;
}

Vocabulary words_vocab() {
  return Vocabulary::build({Dialog{"w", {Turn{tokenize("a b c d e you are welcome"), tokenize("thanks bye")}}}}, 1);
}

std::vector<IntentClass> hand_intents() {
  return {IntentClass{kStartState, 0, 5, {{"hi", 4}, {"hello", 1}}},
          IntentClass{0, 1, 2, {{"book a table", 1}, {"a table please", 1}}},
          IntentClass{1, 1, 1, {{"again", 1}}}};
}

}  // namespace

TEST_CASE("mined intents replay the tracked argmax path") {
  SyntheticCorpus syn = generate_corpus(OracleMachine::default_machine(), 30, 4, 2);
  Vocabulary vocab = Vocabulary::build(syn.corpus.train, 1);
  LstnModel m = random_model(4, vocab.size(), 4, 3, 1.2);
  const auto& dialogs = syn.corpus.train;
  auto intents = mine_intents(m, vocab, dialogs);

  std::map<std::pair<int, int>, std::map<std::string, long>> expected;
  long turns = 0;
  auto tracked = tracked_states(m, vocab, dialogs);
  for (std::size_t d = 0; d < dialogs.size(); ++d) {
    int prev = kStartState;
    for (std::size_t t = 0; t < dialogs[d].turns.size(); ++t) {
      ++expected[{prev, tracked[d][t]}][join_tokens(dialogs[d].turns[t].user)];
      prev = tracked[d][t];
      ++turns;
    }
  }
  REQUIRE(intents.size() == expected.size());
  long total = 0;
  for (std::size_t i = 0; i < intents.size(); ++i) {
    const auto& c = intents[i];
    total += c.count;
    if (i > 0) CHECK(std::make_pair(intents[i - 1].from, intents[i - 1].to) < std::make_pair(c.from, c.to));
    const auto& want = expected.at({c.from, c.to});
    CHECK(c.utterances.size() == want.size());
    long sum = 0;
    for (std::size_t u = 0; u < c.utterances.size(); ++u) {
      CHECK(want.at(c.utterances[u].first) == c.utterances[u].second);
      sum += c.utterances[u].second;
      if (u > 0) CHECK(c.utterances[u - 1].second >= c.utterances[u].second);
    }
    CHECK(sum == c.count);
  }
  CHECK(total == turns);

  std::vector<Dialog> doubled = dialogs;
  doubled.insert(doubled.end(), dialogs.begin(), dialogs.end());
  auto twice = mine_intents(m, vocab, doubled);
  REQUIRE(twice.size() == intents.size());
  for (std::size_t i = 0; i < intents.size(); ++i) {
    CHECK(twice[i].count == 2 * intents[i].count);
    for (std::size_t u = 0; u < intents[i].utterances.size(); ++u) {
      CHECK(twice[i].utterances[u].first == intents[i].utterances[u].first);
      CHECK(twice[i].utterances[u].second == 2 * intents[i].utterances[u].second);
    }
  }
  CHECK(intents_from_json(intents_to_json(intents)) == intents);
}

TEST_CASE("jaccard") {
  CHECK(jaccard({1, 2, 3}, {1, 2, 3}) == 1.0);
  CHECK(jaccard({1, 2, 3}, {2, 3, 4}) == 0.5);
  CHECK(jaccard({1, 1, 2}, {1, 2}) == 1.0);
  CHECK(jaccard({1}, {2}) == 0.0);
  CHECK(jaccard({}, {}) == 1.0);
}

TEST_CASE("duplicate states") {
  Vocabulary v = words_vocab();
  SUBCASE("identical rank-1 responses group together") {
    auto groups = detect_duplicates(cache_of(v, {"thanks bye", "you are welcome", "a b", "you are welcome"}));
    CHECK(groups == std::vector<std::vector<int>>{{1, 3}});
  }
  SUBCASE("groups merge transitively") {
    auto groups = detect_duplicates(cache_of(v, {"a b c", "b c d", "c d e", "you are welcome"}), 0.5);
    CHECK(groups == std::vector<std::vector<int>>{{0, 1, 2}});
  }
  SUBCASE("distinct responses give no groups") {
    CHECK(detect_duplicates(cache_of(v, {"a b", "c d", "e"})).empty());
  }
  SUBCASE("threshold zero groups everything") {
    CHECK(detect_duplicates(cache_of(v, {"a b", "c d", "e"}), 0.0) == std::vector<std::vector<int>>{{0, 1, 2}});
  }
}

TEST_CASE("flow graph export") {
  Vocabulary v = words_vocab();
  ResponseCache cache = cache_of(v, {"thanks bye", "you are welcome", "a b"});
  auto intents = hand_intents();

  DialogFlowGraph g = export_flow_graph(intents, cache, v);
  REQUIRE(g.nodes.size() == 3);  // START, 0, 1
  CHECK(g.nodes[0].state == kStartState);
  CHECK(g.nodes[0].responses.empty());
  CHECK(g.nodes[1].responses == std::vector<std::string>{"thanks bye"});
  REQUIRE(g.edges.size() == 3);
  CHECK(g.edges[0].samples == std::vector<std::string>{"hi", "hello"});
  CHECK(g.edges[2].from == 1);
  CHECK(g.edges[2].to == 1);

  DialogFlowGraph pruned = export_flow_graph(intents, cache, v, 2);
  CHECK(pruned.edges.size() == 2);
  CHECK(pruned.min_edge_count == 2);
  CHECK(export_flow_graph(intents, cache, v, 6).edges.empty());

  CHECK(DialogFlowGraph::parse_jsonl(g.to_jsonl()) == g);
  CHECK(DialogFlowGraph::parse_jsonl(pruned.to_jsonl()) == pruned);
  std::string dot = g.to_dot();
  CHECK(dot.rfind("digraph", 0) == 0);
  CHECK(dot.find("START") != std::string::npos);
  CHECK(dot.find("hello") != std::string::npos);
  CHECK(g.to_json()["edges"].size() == 3);
}

TEST_CASE("edge samples are capped") {
  Vocabulary v = words_vocab();
  ResponseCache cache = cache_of(v, {"a"});
  std::vector<IntentClass> intents{IntentClass{kStartState, 0, 4, {{"a", 1}, {"b", 1}, {"c", 1}, {"d", 1}}}};
  DialogFlowGraph g = export_flow_graph(intents, cache, v);
  CHECK(g.edges[0].samples.size() == kMaxEdgeSamples);
}
