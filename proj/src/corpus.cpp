#include "lstn/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lstn/errors.hpp"
#include "lstn/hash.hpp"

namespace lstn {

using nlohmann::json;

namespace {

bool is_split_punct(unsigned char ch) {
  switch (ch) {
    case ',': case '.': case '!': case '?': case ';': case ':':
    case '(': case ')': case '"': case '[': case ']': case '{': case '}':
      return true;
    default:
      return false;
  }
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

enum class SplitName { kTrain, kDev, kTest };

SplitName parse_split(const std::string& name, std::size_t line) {
  if (name == "train") return SplitName::kTrain;
  if (name == "dev" || name == "valid" || name == "validation") return SplitName::kDev;
  if (name == "test") return SplitName::kTest;
  throw ParseError("unknown split '" + name + "'", line);
}

class CorpusBuilder {
 public:
  void add(Dialog dialog, SplitName split, std::size_t line) {
    if (dialog.turns.empty()) throw ParseError("dialog has no turns", line);
    for (const auto& turn : dialog.turns) {
      if (turn.user.empty()) throw ParseError("empty user utterance", line);
      if (turn.agent.empty()) throw ParseError("empty agent response", line);
    }
    if (dialog.id.empty()) dialog.id = "dialog-" + std::to_string(count_);
    if (!ids_.insert(dialog.id).second) throw ParseError("duplicate dialog id '" + dialog.id + "'", line);
    ++count_;
    switch (split) {
      case SplitName::kTrain: corpus_.train.push_back(std::move(dialog)); break;
      case SplitName::kDev: corpus_.dev.push_back(std::move(dialog)); break;
      case SplitName::kTest: corpus_.test.push_back(std::move(dialog)); break;
    }
  }

  CorpusSplit finish() {
    if (count_ == 0) throw EmptyCorpusError("corpus contains no dialogs");
    return std::move(corpus_);
  }

 private:
  CorpusSplit corpus_;
  std::set<std::string> ids_;
  std::size_t count_ = 0;
};

CorpusSplit parse_jsonl(std::istream& in) {
  CorpusBuilder builder;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed json: ") + e.what(), lineno);
    }
    if (!record.is_object() || !record.contains("turns") || !record["turns"].is_array())
      throw ParseError("record lacks a 'turns' array", lineno);
    Dialog dialog;
    if (record.contains("id")) {
      if (!record["id"].is_string()) throw ParseError("'id' must be a string", lineno);
      dialog.id = record["id"].get<std::string>();
    }
    SplitName split = SplitName::kTrain;
    if (record.contains("split")) {
      if (!record["split"].is_string()) throw ParseError("'split' must be a string", lineno);
      split = parse_split(record["split"].get<std::string>(), lineno);
    }
    for (const auto& t : record["turns"]) {
      if (!t.is_object() || !t.contains("user") || !t["user"].is_string())
        throw ParseError("turn lacks a 'user' string", lineno);
      if (!t.contains("agent") || !t["agent"].is_string())
        throw ParseError("user utterance without an agent reply", lineno);
      dialog.turns.push_back({tokenize(t["user"].get<std::string>()), tokenize(t["agent"].get<std::string>())});
    }
    builder.add(std::move(dialog), split, lineno);
  }
  return builder.finish();
}

CorpusSplit parse_plain(std::istream& in) {
  CorpusBuilder builder;
  Dialog current;
  SplitName split = SplitName::kTrain;
  std::optional<TokenSeq> pending_user;
  std::size_t pending_line = 0;
  std::size_t start_line = 0;
  bool open = false;

  auto flush = [&](std::size_t lineno) {
    if (!open) return;
    if (pending_user) throw ParseError("user utterance without an agent reply", pending_line);
    builder.add(std::move(current), split, start_line ? start_line : lineno);
    current = Dialog{};
    split = SplitName::kTrain;
    open = false;
  };

  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty()) {
      flush(lineno);
      continue;
    }
    if (line[0] == '#') continue;
    auto colon = line.find(':');
    if (colon == std::string::npos) throw ParseError("expected 'key: value'", lineno);
    std::string key = trim(std::string_view(line).substr(0, colon));
    std::string value = trim(std::string_view(line).substr(colon + 1));
    if (!open) {
      open = true;
      start_line = lineno;
    }
    if (key == "id") {
      if (!current.turns.empty() || pending_user) throw ParseError("'id' must precede the turns", lineno);
      current.id = value;
    } else if (key == "split") {
      split = parse_split(value, lineno);
    } else if (key == "user") {
      if (pending_user) throw ParseError("two user utterances in a row", lineno);
      pending_user = tokenize(value);
      pending_line = lineno;
    } else if (key == "agent") {
      if (!pending_user) throw ParseError("agent response without a preceding user utterance", lineno);
      current.turns.push_back({std::move(*pending_user), tokenize(value)});
      pending_user.reset();
    } else {
      throw ParseError("unknown key '" + key + "'", lineno);
    }
  }
  flush(lineno);
  return builder.finish();
}

std::string split_name(int which) {
  static const char* names[] = {"train", "dev", "test"};
  return names[which];
}

}  // namespace

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "plain") return CorpusFormat::kPlain;
  if (name == "jsonl") return CorpusFormat::kJsonl;
  throw ArgumentError("unknown corpus format '" + std::string(name) + "' (expected plain or jsonl)");
}

TokenSeq tokenize(std::string_view text) {
  TokenSeq tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      flush();
    } else if (is_split_punct(ch)) {
      flush();
      tokens.emplace_back(1, static_cast<char>(ch));
    } else {
      word.push_back(static_cast<char>(std::tolower(ch)));
    }
  }
  flush();
  return tokens;
}

std::string join_tokens(const TokenSeq& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

CorpusSplit parse_corpus(std::istream& in, CorpusFormat format) {
  return format == CorpusFormat::kJsonl ? parse_jsonl(in) : parse_plain(in);
}

CorpusSplit load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file '" + path.string() + "'");
  return parse_corpus(in, format);
}

void write_corpus(std::ostream& out, const CorpusSplit& corpus, const TurnLabels* labels) {
  const std::vector<Dialog>* splits[] = {&corpus.train, &corpus.dev, &corpus.test};
  for (int s = 0; s < 3; ++s) {
    for (const auto& dialog : *splits[s]) {
      const std::vector<int>* states = nullptr;
      if (labels) {
        auto it = labels->find(dialog.id);
        if (it != labels->end()) states = &it->second;
      }
      json turns = json::array();
      for (std::size_t i = 0; i < dialog.turns.size(); ++i) {
        json t = {{"user", join_tokens(dialog.turns[i].user)}, {"agent", join_tokens(dialog.turns[i].agent)}};
        if (states && i < states->size()) t["state"] = (*states)[i];
        turns.push_back(std::move(t));
      }
      json record = {{"id", dialog.id}, {"split", split_name(s)}, {"turns", std::move(turns)}};
      out << record.dump() << '\n';
    }
  }
}

void save_corpus(const std::filesystem::path& path, const CorpusSplit& corpus, const TurnLabels* labels) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write corpus file '" + path.string() + "'");
  write_corpus(out, corpus, labels);
}

TurnLabels load_turn_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus file '" + path.string() + "'");
  TurnLabels labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(std::string("malformed json: ") + e.what(), lineno);
    }
    std::vector<int> states;
    for (const auto& t : record.at("turns")) {
      if (!t.contains("state")) throw ParseError("turn lacks a 'state' label", lineno);
      states.push_back(t["state"].get<int>());
    }
    labels[record.at("id").get<std::string>()] = std::move(states);
  }
  return labels;
}

CorpusSplit filter_dialogs(CorpusSplit corpus, const std::function<bool(const Dialog&)>& keep) {
  auto drop = [&](const Dialog& d) { return !keep(d); };
  std::erase_if(corpus.train, drop);
  std::erase_if(corpus.dev, drop);
  std::erase_if(corpus.test, drop);
  return corpus;
}

// ---------------------------------------------------------------------------

void EntityLexicon::add_type(const std::string& type, const std::vector<std::string>& surface_forms) {
  if (std::find(types_.begin(), types_.end(), type) == types_.end()) types_.push_back(type);
  for (const auto& form : surface_forms) {
    TokenSeq surface = tokenize(form);
    if (surface.empty()) continue;
    std::string key = join_tokens(surface);
    if (owner_.count(key)) continue;
    owner_[key] = type;
    auto& bucket = by_head_[surface.front()];
    bucket.push_back({std::move(surface), type});
    std::stable_sort(bucket.begin(), bucket.end(),
                     [](const Entry& a, const Entry& b) { return a.surface.size() > b.surface.size(); });
  }
}

std::optional<EntityLexicon::Match> EntityLexicon::match(const TokenSeq& tokens, std::size_t pos) const {
  auto it = by_head_.find(tokens[pos]);
  if (it == by_head_.end()) return std::nullopt;
  for (const auto& entry : it->second) {
    if (pos + entry.surface.size() > tokens.size()) continue;
    if (std::equal(entry.surface.begin(), entry.surface.end(), tokens.begin() + static_cast<long>(pos)))
      return Match{entry.surface.size(), entry.type};
  }
  return std::nullopt;
}

EntityLexicon EntityLexicon::parse(std::istream& in) {
  EntityLexicon lexicon;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      json record = json::parse(line);
      lexicon.add_type(record.at("type").get<std::string>(), record.at("values").get<std::vector<std::string>>());
    } catch (const json::exception& e) {
      throw ParseError(std::string("malformed lexicon record: ") + e.what(), lineno);
    }
  }
  return lexicon;
}

EntityLexicon EntityLexicon::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open lexicon file '" + path.string() + "'");
  return parse(in);
}

TokenSeq EntityIndexer::apply(const TokenSeq& tokens) {
  TokenSeq out;
  out.reserve(tokens.size());
  std::size_t pos = 0;
  while (pos < tokens.size()) {
    auto m = lexicon_->match(tokens, pos);
    if (!m) {
      out.push_back(tokens[pos++]);
      continue;
    }
    TokenSeq surface(tokens.begin() + static_cast<long>(pos), tokens.begin() + static_cast<long>(pos + m->length));
    auto& ids = seen_[m->type];
    auto [it, inserted] = ids.try_emplace(join_tokens(surface), static_cast<int>(ids.size()));
    out.push_back(m->type + "_" + std::to_string(it->second));
    pos += m->length;
  }
  return out;
}

Dialog anonymize(const Dialog& dialog, const EntityLexicon& lexicon) {
  if (lexicon.empty()) throw ArgumentError("anonymize: lexicon is empty");
  EntityIndexer indexer(lexicon);
  Dialog out{dialog.id, {}};
  out.turns.reserve(dialog.turns.size());
  for (const auto& turn : dialog.turns) {
    Turn t;
    t.user = indexer.apply(turn.user);
    t.agent = indexer.apply(turn.agent);
    out.turns.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() {
  tokens_ = {"<pad>", "<unk>", "<s>", "</s>"};
  for (int i = 0; i < kNumReserved; ++i) ids_[tokens_[static_cast<std::size_t>(i)]] = i;
}

Vocabulary Vocabulary::build(const std::vector<Dialog>& dialogs, int min_count) {
  if (min_count < 1) throw ArgumentError("build_vocab: min_count must be >= 1");
  if (dialogs.empty()) throw ArgumentError("build_vocab: corpus is empty");
  std::map<std::string, long> counts;
  for (const auto& d : dialogs)
    for (const auto& t : d.turns) {
      for (const auto& w : t.user) ++counts[w];
      for (const auto& w : t.agent) ++counts[w];
    }
  std::vector<std::pair<std::string, long>> kept;
  Vocabulary probe;
  for (auto& [w, c] : counts)
    if (c >= min_count && !probe.contains(w)) kept.emplace_back(w, c);
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary vocab;
  vocab.min_count_ = min_count;
  for (auto& [w, c] : kept) {
    vocab.ids_[w] = vocab.size();
    vocab.tokens_.push_back(w);
  }
  return vocab;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(size()));
  return tokens_[static_cast<std::size_t>(id)];
}

IdSeq Vocabulary::encode(const TokenSeq& tokens) const {
  IdSeq ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

TokenSeq Vocabulary::decode(const IdSeq& ids) const {
  TokenSeq tokens;
  tokens.reserve(ids.size());
  for (int i : ids) tokens.push_back(token(i));
  return tokens;
}

IdSeq Vocabulary::encode_response(const TokenSeq& tokens) const {
  IdSeq ids = encode(tokens);
  ids.push_back(kEos);
  return ids;
}

TokenSeq Vocabulary::decode_response(const IdSeq& ids) const {
  IdSeq trimmed = ids;
  if (!trimmed.empty() && trimmed.back() == kEos) trimmed.pop_back();
  return decode(trimmed);
}

std::uint64_t Vocabulary::fingerprint() const {
  Fnv1a h;
  for (const auto& t : tokens_) h.update(t).update(std::string_view("\n", 1));
  return h.digest();
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write vocabulary file '" + path.string() + "'");
  json j = {{"min_count", min_count_}, {"tokens", tokens_}};
  out << j.dump() << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open vocabulary file '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ParseError(std::string("malformed vocabulary: ") + e.what(), 1);
  }
  Vocabulary vocab;
  auto tokens = j.at("tokens").get<std::vector<std::string>>();
  if (tokens.size() < static_cast<std::size_t>(kNumReserved) ||
      !std::equal(vocab.tokens_.begin(), vocab.tokens_.end(), tokens.begin()))
    throw ParseError("vocabulary lacks the reserved entries", 1);
  vocab.min_count_ = j.at("min_count").get<int>();
  for (std::size_t i = kNumReserved; i < tokens.size(); ++i) {
    vocab.ids_[tokens[i]] = static_cast<int>(i);
    vocab.tokens_.push_back(tokens[i]);
  }
  return vocab;
}

EncodedDialog encode_dialog(const Dialog& dialog, const Vocabulary& vocab) {
  EncodedDialog out{dialog.id, {}};
  out.turns.reserve(dialog.turns.size());
  for (const auto& t : dialog.turns) out.turns.push_back({vocab.encode(t.user), vocab.encode_response(t.agent)});
  return out;
}

std::vector<EncodedDialog> encode_dialogs(const std::vector<Dialog>& dialogs, const Vocabulary& vocab) {
  std::vector<EncodedDialog> out;
  out.reserve(dialogs.size());
  for (const auto& d : dialogs) out.push_back(encode_dialog(d, vocab));
  return out;
}

}  // namespace lstn
