#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace lstn {

using TokenSeq = std::vector<std::string>;
using IdSeq = std::vector<int>;

struct Turn {
  TokenSeq user;
  TokenSeq agent;
  bool operator==(const Turn&) const = default;
};

struct Dialog {
  std::string id;
  std::vector<Turn> turns;
  bool operator==(const Dialog&) const = default;
};

struct CorpusSplit {
  std::vector<Dialog> train;
  std::vector<Dialog> dev;
  std::vector<Dialog> test;
  bool operator==(const CorpusSplit&) const = default;
};

enum class CorpusFormat { kPlain, kJsonl };

CorpusFormat parse_corpus_format(std::string_view name);

/// Lowercases, separates punctuation from words and splits on whitespace.
/// Apostrophes and underscores stay inside words ("let's", "cuisine_0").
TokenSeq tokenize(std::string_view text);
std::string join_tokens(const TokenSeq& tokens);

/// Reads a corpus file. Records may carry a "split" tag (train/dev/test);
/// untagged dialogs land in train.
///
/// Native jsonl: one dialog per line,
///   {"id": "...", "split": "train", "turns": [{"user": "...", "agent": "..."}]}
/// Plain: blank-line separated blocks of "user: ..." / "agent: ..." lines
/// with optional "id: ..." and "split: ..." header lines; '#' starts a comment.
CorpusSplit load_corpus(const std::filesystem::path& path, CorpusFormat format);
CorpusSplit parse_corpus(std::istream& in, CorpusFormat format);

/// Per-dialog, per-turn integer annotations (gold oracle states).
using TurnLabels = std::map<std::string, std::vector<int>>;

/// Writes the native jsonl format. When labels are given, each turn record
/// gets a "state" field; load_corpus ignores it.
void write_corpus(std::ostream& out, const CorpusSplit& corpus, const TurnLabels* labels = nullptr);
void save_corpus(const std::filesystem::path& path, const CorpusSplit& corpus,
                 const TurnLabels* labels = nullptr);
TurnLabels load_turn_labels(const std::filesystem::path& path);

/// Removes dialogs failing the predicate from every split.
CorpusSplit filter_dialogs(CorpusSplit corpus, const std::function<bool(const Dialog&)>& keep);

// ---------------------------------------------------------------------------
// Anonymization

class EntityLexicon {
 public:
  struct Match {
    std::size_t length = 0;
    std::string type;
  };

  /// Surface forms are tokenized and lowercased. A surface form already owned
  /// by an earlier type is skipped.
  void add_type(const std::string& type, const std::vector<std::string>& surface_forms);

  bool empty() const { return types_.empty(); }
  const std::vector<std::string>& types() const { return types_; }

  /// Longest surface form starting at tokens[pos], if any.
  std::optional<Match> match(const TokenSeq& tokens, std::size_t pos) const;

  /// jsonl, one record per type: {"type": "cuisine", "values": ["japanese", ...]}
  static EntityLexicon load(const std::filesystem::path& path);
  static EntityLexicon parse(std::istream& in);

 private:
  struct Entry {
    TokenSeq surface;
    std::string type;
  };
  std::vector<std::string> types_;
  // First token -> entries, longest first.
  std::unordered_map<std::string, std::vector<Entry>> by_head_;
  std::unordered_map<std::string, std::string> owner_;
};

/// Assigns typed placeholder indices in order of first appearance. One
/// indexer spans one dialog (or one live session).
class EntityIndexer {
 public:
  explicit EntityIndexer(const EntityLexicon& lexicon) : lexicon_(&lexicon) {}
  TokenSeq apply(const TokenSeq& tokens);

 private:
  const EntityLexicon* lexicon_;
  std::map<std::string, std::map<std::string, int>> seen_;
};

Dialog anonymize(const Dialog& dialog, const EntityLexicon& lexicon);

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;
  static constexpr int kNumReserved = 4;

  Vocabulary();

  /// Tokens with frequency >= min_count, ordered by descending frequency
  /// then alphabetically, after the four reserved entries.
  static Vocabulary build(const std::vector<Dialog>& dialogs, int min_count);

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  int min_count() const { return min_count_; }

  IdSeq encode(const TokenSeq& tokens) const;
  TokenSeq decode(const IdSeq& ids) const;
  /// encode() plus a trailing EOS.
  IdSeq encode_response(const TokenSeq& tokens) const;
  /// decode() with any trailing EOS dropped.
  TokenSeq decode_response(const IdSeq& ids) const;

  std::uint64_t fingerprint() const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const {
    return tokens_ == other.tokens_ && min_count_ == other.min_count_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  int min_count_ = 1;
};

struct EncodedTurn {
  IdSeq user;
  IdSeq agent;  // ends with Vocabulary::kEos
};

struct EncodedDialog {
  std::string id;
  std::vector<EncodedTurn> turns;
};

EncodedDialog encode_dialog(const Dialog& dialog, const Vocabulary& vocab);
std::vector<EncodedDialog> encode_dialogs(const std::vector<Dialog>& dialogs, const Vocabulary& vocab);

}  // namespace lstn
