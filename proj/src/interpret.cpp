#include "lstn/interpret.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "lstn/errors.hpp"

namespace lstn {

using nlohmann::json;

std::vector<IntentClass> mine_intents(const LstnModel& model, const Vocabulary& vocab,
                                      const std::vector<Dialog>& dialogs) {
  std::map<IdSeq, Matrix> tables;
  std::map<std::pair<int, int>, std::map<std::string, long>> groups;
  for (const auto& d : dialogs) {
    StateMarginal marginal = StateMarginal::initial();
    int prev = kStartState;
    for (const auto& turn : d.turns) {
      IdSeq x = vocab.encode(turn.user);
      auto it = tables.find(x);
      if (it == tables.end()) it = tables.emplace(x, transition_table(model, x)).first;
      marginal = track_state(marginal, it->second);
      int z = marginal.argmax();
      ++groups[{prev, z}][join_tokens(turn.user)];
      prev = z;
    }
  }
  std::vector<IntentClass> out;
  for (auto& [key, utterances] : groups) {
    IntentClass c;
    c.from = key.first;
    c.to = key.second;
    for (const auto& [text, n] : utterances) {
      c.count += n;
      c.utterances.emplace_back(text, n);
    }
    std::stable_sort(c.utterances.begin(), c.utterances.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    out.push_back(std::move(c));
  }
  return out;
}

double jaccard(const IdSeq& a, const IdSeq& b) {
  std::set<int> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  if (sa.empty() && sb.empty()) return 1.0;
  std::size_t common = 0;
  for (int t : sa) common += sb.count(t);
  return static_cast<double>(common) / static_cast<double>(sa.size() + sb.size() - common);
}

std::vector<std::vector<int>> detect_duplicates(const ResponseCache& cache, double threshold) {
  const int k = cache.num_states();
  std::vector<int> parent(static_cast<std::size_t>(k));
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  };
  for (int a = 0; a < k; ++a) {
    const auto& la = cache.states[static_cast<std::size_t>(a)];
    if (la.empty()) continue;
    for (int b = a + 1; b < k; ++b) {
      const auto& lb = cache.states[static_cast<std::size_t>(b)];
      if (lb.empty() || jaccard(la.front().tokens, lb.front().tokens) < threshold) continue;
      int ra = find(a), rb = find(b);
      if (ra != rb) parent[static_cast<std::size_t>(std::max(ra, rb))] = std::min(ra, rb);
    }
  }
  std::map<int, std::vector<int>> groups;
  for (int s = 0; s < k; ++s) groups[find(s)].push_back(s);
  std::vector<std::vector<int>> out;
  for (auto& [root, members] : groups)
    if (members.size() >= 2) out.push_back(std::move(members));
  return out;
}

DialogFlowGraph export_flow_graph(const std::vector<IntentClass>& intents, const ResponseCache& cache,
                                  const Vocabulary& vocab, long min_edge_count, int top_r) {
  if (top_r < 0) throw ArgumentError("top_r must be >= 0");
  DialogFlowGraph g;
  g.min_edge_count = min_edge_count;
  g.top_r = top_r;
  std::set<int> states{kStartState};
  for (const auto& c : intents) {
    states.insert(c.from);
    states.insert(c.to);
  }
  for (int s : states) {
    GraphNode node{s, {}};
    if (s != kStartState) {
      if (s >= cache.num_states()) throw RangeError("intent refers to state " + std::to_string(s) + " beyond the cache");
      const auto& list = cache.states[static_cast<std::size_t>(s)];
      for (std::size_t r = 0; r < list.size() && r < static_cast<std::size_t>(top_r); ++r)
        node.responses.push_back(join_tokens(vocab.decode(list[r].tokens)));
    }
    g.nodes.push_back(std::move(node));
  }
  for (const auto& c : intents) {
    if (c.count < min_edge_count) continue;
    GraphEdge e{c.from, c.to, c.count, {}};
    for (std::size_t i = 0; i < c.utterances.size() && i < static_cast<std::size_t>(kMaxEdgeSamples); ++i)
      e.samples.push_back(c.utterances[i].first);
    g.edges.push_back(std::move(e));
  }
  std::sort(g.edges.begin(), g.edges.end(),
            [](const GraphEdge& a, const GraphEdge& b) { return std::tie(a.from, a.to) < std::tie(b.from, b.to); });
  return g;
}

namespace {

std::string node_id(int state) { return state == kStartState ? "START" : "s" + std::to_string(state); }

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

}  // namespace

std::string DialogFlowGraph::to_dot() const {
  std::ostringstream out;
  out << "digraph dialog_flow {\n";
  out << "  // min_edge_count=" << min_edge_count << " top_r=" << top_r << '\n';
  out << "  node [shape=box];\n";
  for (const auto& n : nodes) {
    out << "  " << node_id(n.state) << " [label=\"";
    if (n.state == kStartState) {
      out << "START";
    } else {
      out << "state " << n.state;
      for (std::size_t r = 0; r < n.responses.size(); ++r) out << "\\n" << r + 1 << ". " << dot_escape(n.responses[r]);
    }
    out << "\"];\n";
  }
  for (const auto& e : edges) {
    out << "  " << node_id(e.from) << " -> " << node_id(e.to) << " [label=\"" << e.count;
    for (const auto& s : e.samples) out << "\\n" << dot_escape(s);
    out << "\"];\n";
  }
  out << "}\n";
  return out.str();
}

json DialogFlowGraph::to_json() const {
  json j_nodes = json::array(), j_edges = json::array();
  for (const auto& n : nodes) j_nodes.push_back({{"state", n.state}, {"responses", n.responses}});
  for (const auto& e : edges)
    j_edges.push_back({{"from", e.from}, {"to", e.to}, {"count", e.count}, {"samples", e.samples}});
  return {{"min_edge_count", min_edge_count}, {"top_r", top_r}, {"nodes", j_nodes}, {"edges", j_edges}};
}

std::string DialogFlowGraph::to_jsonl() const {
  std::string out = json{{"type", "graph"}, {"min_edge_count", min_edge_count}, {"top_r", top_r}}.dump() + "\n";
  for (const auto& n : nodes)
    out += json{{"type", "node"}, {"state", n.state}, {"responses", n.responses}}.dump() + "\n";
  for (const auto& e : edges)
    out += json{{"type", "edge"}, {"from", e.from}, {"to", e.to}, {"count", e.count}, {"samples", e.samples}}.dump() +
           "\n";
  return out;
}

DialogFlowGraph DialogFlowGraph::parse_jsonl(const std::string& text) {
  DialogFlowGraph g;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      std::string type = j.at("type").get<std::string>();
      if (type == "graph") {
        g.min_edge_count = j.at("min_edge_count").get<long>();
        g.top_r = j.at("top_r").get<int>();
        header = true;
      } else if (type == "node") {
        g.nodes.push_back({j.at("state").get<int>(), j.at("responses").get<std::vector<std::string>>()});
      } else if (type == "edge") {
        g.edges.push_back({j.at("from").get<int>(), j.at("to").get<int>(), j.at("count").get<long>(),
                           j.at("samples").get<std::vector<std::string>>()});
      } else {
        throw ParseError("unknown record type '" + type + "'", lineno);
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed graph record: ") + e.what(), lineno);
    }
  }
  if (!header) throw ParseError("graph header record missing", 1);
  return g;
}

json intents_to_json(const std::vector<IntentClass>& intents) {
  json out = json::array();
  for (const auto& c : intents) {
    json utterances = json::array();
    for (const auto& [text, n] : c.utterances) utterances.push_back({{"text", text}, {"count", n}});
    out.push_back({{"from", c.from}, {"to", c.to}, {"count", c.count}, {"utterances", std::move(utterances)}});
  }
  return out;
}

std::vector<IntentClass> intents_from_json(const json& j) {
  std::vector<IntentClass> out;
  for (const auto& c : j) {
    IntentClass ic;
    ic.from = c.at("from").get<int>();
    ic.to = c.at("to").get<int>();
    ic.count = c.at("count").get<long>();
    for (const auto& u : c.at("utterances")) ic.utterances.emplace_back(u.at("text").get<std::string>(), u.at("count").get<long>());
    out.push_back(std::move(ic));
  }
  return out;
}

}  // namespace lstn
