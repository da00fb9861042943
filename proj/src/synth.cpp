#include "lstn/synth.hpp"

#include <cstdio>
#include <fstream>
#include <queue>
#include <random>
#include <sstream>

#include "lstn/errors.hpp"
#include "lstn/model.hpp"

namespace lstn {

namespace {

int index_of(const std::vector<std::string>& names, const std::string& name, const char* what, std::size_t line) {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  throw ParseError(std::string("unknown ") + what + " '" + name + "'", line);
}

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  return dist(rng);
}

}  // namespace

void OracleMachine::validate() const {
  if (state_names.empty()) throw ArgumentError("oracle machine has no states");
  if (templates.size() != state_names.size() || paraphrases.size() != intent_names.size())
    throw ArgumentError("oracle machine tables are inconsistent");
  for (int s = 0; s < num_states(); ++s)
    if (templates[static_cast<std::size_t>(s)].empty())
      throw ArgumentError("state '" + state_names[static_cast<std::size_t>(s)] + "' has no templates");
  for (int i = 0; i < num_intents(); ++i)
    if (paraphrases[static_cast<std::size_t>(i)].empty())
      throw ArgumentError("intent '" + intent_names[static_cast<std::size_t>(i)] + "' has no paraphrases");
  for (const auto& [key, to] : transitions) {
    if (key.first < kStartState || key.first >= num_states() || key.second < 0 || key.second >= num_intents() ||
        to < 0 || to >= num_states())
      throw ArgumentError("oracle transition refers to an unknown state or intent");
  }
  std::vector<bool> seen(state_names.size(), false);
  std::queue<int> frontier;
  frontier.push(kStartState);
  bool start_has_exit = false;
  while (!frontier.empty()) {
    int s = frontier.front();
    frontier.pop();
    for (const auto& [key, to] : transitions) {
      if (key.first != s) continue;
      if (s == kStartState) start_has_exit = true;
      if (!seen[static_cast<std::size_t>(to)]) {
        seen[static_cast<std::size_t>(to)] = true;
        frontier.push(to);
      }
    }
  }
  if (!start_has_exit) throw Error("oracle machine: no transition leaves START");
  for (int s = 0; s < num_states(); ++s)
    if (!seen[static_cast<std::size_t>(s)])
      throw Error("oracle machine: state '" + state_names[static_cast<std::size_t>(s)] + "' is unreachable from START");
}

std::set<std::pair<int, int>> OracleMachine::transition_pairs() const {
  std::set<std::pair<int, int>> pairs;
  for (const auto& [key, to] : transitions) pairs.emplace(key.first, to);
  return pairs;
}

OracleMachine OracleMachine::default_machine() {
  std::istringstream in(R"(# greet -> request -> inform -> thank
state greet
template hello , how can i help you today ?
state request
template sure , which date_0 is the event_0 on ?
state inform
template your event_0 is at time_0 on date_0 .
state thank
template you are welcome , have a nice day !

intent hello
say hello
say hi there
say good morning
intent ask_event
say when is my event_0 ?
say what time is my event_0 scheduled ?
say can you check the time of my event_0 ?
intent give_date
say it is on date_0
say the one on date_0 please
say i mean date_0
intent thanks
say thanks
say great , thanks .
say that will do just fine , thanks .
intent ack
say ok
say sure
say alright then

transition START hello greet
transition START ask_event request
transition greet ask_event request
transition greet ack request
transition request give_date inform
transition inform thanks thank
transition inform ack thank
transition inform ask_event request
transition thank ask_event request
)");
  return parse(in);
}

std::string OracleMachine::to_text() const {
  std::ostringstream out;
  for (int s = 0; s < num_states(); ++s) {
    out << "state " << state_names[static_cast<std::size_t>(s)] << '\n';
    for (const auto& t : templates[static_cast<std::size_t>(s)]) out << "template " << t << '\n';
  }
  for (int i = 0; i < num_intents(); ++i) {
    out << "intent " << intent_names[static_cast<std::size_t>(i)] << '\n';
    for (const auto& p : paraphrases[static_cast<std::size_t>(i)]) out << "say " << p << '\n';
  }
  for (const auto& [key, to] : transitions) {
    out << "transition " << (key.first == kStartState ? "START" : state_names[static_cast<std::size_t>(key.first)])
        << ' ' << intent_names[static_cast<std::size_t>(key.second)] << ' '
        << state_names[static_cast<std::size_t>(to)] << '\n';
  }
  return out.str();
}

OracleMachine OracleMachine::parse(std::istream& in) {
  OracleMachine m;
  enum { kNone, kState, kIntent } section = kNone;
  struct PendingTransition {
    std::string from, intent, to;
    std::size_t line;
  };
  std::vector<PendingTransition> pending;
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::istringstream ls(raw);
    std::string key;
    if (!(ls >> key) || key[0] == '#') continue;
    std::string rest;
    std::getline(ls >> std::ws, rest);
    if (key == "state") {
      if (rest.empty()) throw ParseError("state needs a name", lineno);
      m.state_names.push_back(rest);
      m.templates.emplace_back();
      section = kState;
    } else if (key == "template") {
      if (section != kState) throw ParseError("template outside a state block", lineno);
      m.templates.back().push_back(join_tokens(tokenize(rest)));
    } else if (key == "intent") {
      if (rest.empty()) throw ParseError("intent needs a name", lineno);
      m.intent_names.push_back(rest);
      m.paraphrases.emplace_back();
      section = kIntent;
    } else if (key == "say") {
      if (section != kIntent) throw ParseError("say outside an intent block", lineno);
      m.paraphrases.back().push_back(join_tokens(tokenize(rest)));
    } else if (key == "transition") {
      std::istringstream ts(rest);
      PendingTransition t{"", "", "", lineno};
      if (!(ts >> t.from >> t.intent >> t.to)) throw ParseError("transition needs <from> <intent> <to>", lineno);
      pending.push_back(t);
    } else {
      throw ParseError("unknown directive '" + key + "'", lineno);
    }
  }
  for (const auto& t : pending) {
    int from = t.from == "START" ? kStartState : index_of(m.state_names, t.from, "state", t.line);
    int intent = index_of(m.intent_names, t.intent, "intent", t.line);
    int to = index_of(m.state_names, t.to, "state", t.line);
    if (!m.transitions.emplace(std::make_pair(from, intent), to).second)
      throw ParseError("duplicate transition for (" + t.from + ", " + t.intent + ")", t.line);
  }
  return m;
}

OracleMachine OracleMachine::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open machine file '" + path.string() + "'");
  return parse(in);
}

SyntheticCorpus generate_corpus(const OracleMachine& machine, int n_dialogs, int max_turns, std::uint64_t seed) {
  if (n_dialogs < 1) throw ArgumentError("n_dialogs must be >= 1");
  if (max_turns < 1) throw ArgumentError("max_turns must be >= 1");
  machine.validate();

  std::map<int, std::vector<std::pair<int, int>>> exits;  // state -> (intent, next)
  for (const auto& [key, to] : machine.transitions) exits[key.first].emplace_back(key.second, to);

  std::mt19937_64 rng(seed);
  SyntheticCorpus out;
  const int n_train = n_dialogs * 8 / 10;
  const int n_dev = n_dialogs / 10;
  for (int d = 0; d < n_dialogs; ++d) {
    Dialog dialog;
    char id[32];
    std::snprintf(id, sizeof id, "synth-%05d", d);
    dialog.id = id;
    std::vector<int> states;
    const int length = static_cast<int>(pick(rng, static_cast<std::size_t>(max_turns))) + 1;
    int state = kStartState;
    for (int t = 0; t < length; ++t) {
      auto it = exits.find(state);
      if (it == exits.end()) break;
      const auto& [intent, next] = it->second[pick(rng, it->second.size())];
      const auto& says = machine.paraphrases[static_cast<std::size_t>(intent)];
      const auto& temps = machine.templates[static_cast<std::size_t>(next)];
      Turn turn;
      turn.user = tokenize(says[pick(rng, says.size())]);
      turn.agent = tokenize(temps[pick(rng, temps.size())]);
      dialog.turns.push_back(std::move(turn));
      states.push_back(next);
      state = next;
    }
    out.gold[dialog.id] = std::move(states);
    if (d < n_train)
      out.corpus.train.push_back(std::move(dialog));
    else if (d < n_train + n_dev)
      out.corpus.dev.push_back(std::move(dialog));
    else
      out.corpus.test.push_back(std::move(dialog));
  }
  return out;
}

double state_recovery(const std::vector<int>& learned, const std::vector<int>& gold) {
  if (learned.size() != gold.size())
    throw ArgumentError("state_recovery: " + std::to_string(learned.size()) + " learned labels vs " +
                        std::to_string(gold.size()) + " gold labels");
  if (learned.empty()) return 0.0;
  std::map<int, std::map<int, long>> overlap;
  for (std::size_t i = 0; i < learned.size(); ++i) ++overlap[learned[i]][gold[i]];
  long matched = 0;
  for (const auto& [label, counts] : overlap) {
    long best = 0;
    for (const auto& [g, c] : counts) best = std::max(best, c);
    matched += best;
  }
  return static_cast<double>(matched) / static_cast<double>(learned.size());
}

std::map<int, int> majority_alignment(const std::vector<int>& learned, const std::vector<int>& gold) {
  if (learned.size() != gold.size()) throw ArgumentError("majority_alignment: label sequences differ in length");
  std::map<int, std::map<int, long>> overlap;
  for (std::size_t i = 0; i < learned.size(); ++i) ++overlap[learned[i]][gold[i]];
  std::map<int, int> out;
  for (const auto& [label, counts] : overlap) {
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it)
      if (it->second > best->second) best = it;
    out[label] = best->first;
  }
  return out;
}

}  // namespace lstn
