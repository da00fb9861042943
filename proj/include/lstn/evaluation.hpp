#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lstn/corpus.hpp"
#include "lstn/em.hpp"
#include "lstn/inference.hpp"

namespace lstn {

/// Name recorded in every report for the scoring rule implemented by bleu().
inline constexpr const char* kBleuVariant = "sentence-bleu4-add1";

/// Sentence-level BLEU-4 on a 0-100 scale. Unigram precision is clipped and
/// unsmoothed; orders 2-4 use (matches + 1) / (candidates + 1). The brevity
/// penalty uses the reference length closest to the hypothesis (shorter on
/// ties). Empty hypothesis scores 0; no references throws ArgumentError.
double bleu(const TokenSeq& hypothesis, const std::vector<TokenSeq>& references);
double bleu(const TokenSeq& hypothesis, const TokenSeq& reference);

struct TurnScores {
  double recoverability = 0.0;
  double end_to_end = 0.0;
  int tracked_state = 0;   // argmax of p(z_i | x_{1:i})
  int emission_state = 0;  // argmax_z p(y_i | z)
};

/// Gold responses are compared as tokens, so out-of-vocabulary words in the
/// reference count as misses.
std::vector<TurnScores> score_dialog(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                                     const Dialog& dialog);

/// Mean over test responses of bleu(cache[z̄][0], y), z̄ = argmax_z p(y | z).
double recoverability(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                      const std::vector<Dialog>& test);
/// Mean over test turns of bleu(respond(p(z_i | x_{1:i})), y_i), tracking
/// from the gold user utterances.
double end_to_end_bleu(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                       const std::vector<Dialog>& test);

/// Per-turn argmax of the tracked marginal, in dialog order.
std::vector<std::vector<int>> tracked_states(const LstnModel& model, const Vocabulary& vocab,
                                             const std::vector<Dialog>& dialogs);

struct DialogBreakdown {
  std::string id;
  int turns = 0;
  double recoverability = 0.0;
  double end_to_end_bleu = 0.0;
};

struct EvalReport {
  std::string dataset;
  std::string variant = "lstn";
  int num_states = 0;
  std::string bleu_variant = kBleuVariant;
  double recoverability = 0.0;
  double end_to_end_bleu = 0.0;
  std::optional<double> purity;  // only with gold state labels
  long num_dialogs = 0;
  long num_turns = 0;
  std::string config_hash;
  std::vector<DialogBreakdown> per_dialog;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
  /// One JSON object followed by a newline.
  std::string to_jsonl() const;
  std::string to_table() const;
};

struct EvalOptions {
  std::string dataset = "test";
  std::string variant = "lstn";
  std::string config_hash;
};

EvalReport evaluate(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                    const std::vector<Dialog>& test, const EvalOptions& options, const TurnLabels* gold = nullptr);

// ---------------------------------------------------------------------------
// K sweep

struct KSweepRow {
  int num_states = 0;
  double bleu = 0.0;  // end-to-end
  double recoverability = 0.0;
  double best_dev_ppl = 0.0;
  std::string error;  // non-empty when this K failed

  bool ok() const { return error.empty(); }
};

struct KSweepInput {
  const CorpusSplit* corpus = nullptr;
  const Vocabulary* vocab = nullptr;
  TrainConfig config;
  BeamConfig beam;
};

/// Trains and evaluates (on the test split) once per K with everything else
/// fixed. A failing K is reported in its row and the sweep moves on. Rows are
/// sorted by K.
std::vector<KSweepRow> k_sweep(const KSweepInput& input, std::vector<int> k_values,
                               const std::function<void(const KSweepRow&)>& on_row = {});

/// "K<TAB>BLEU" lines after a header; failed rows are omitted.
std::string k_sweep_plot_data(const std::vector<KSweepRow>& rows);
nlohmann::json k_sweep_to_json(const std::vector<KSweepRow>& rows);

}  // namespace lstn
