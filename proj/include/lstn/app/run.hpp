#pragma once

// One function per CLI subcommand. Each reads its inputs from the config
// (corpus, run directory), writes artifacts under run_dir and records them
// in run_dir/manifest.json. Progress goes to `out`.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "lstn/app/config.hpp"
#include "lstn/app/service.hpp"
#include "lstn/baseline.hpp"
#include "lstn/corpus.hpp"
#include "lstn/diffcore.hpp"
#include "lstn/evaluation.hpp"
#include "lstn/interpret.hpp"

namespace lstn::app {

namespace artifact {
inline constexpr const char* kConfig = "config.ini";
inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kCorpus = "corpus.jsonl";
inline constexpr const char* kMachine = "machine.txt";
inline constexpr const char* kVocab = "vocab.json";
inline constexpr const char* kModel = "model.json";
inline constexpr const char* kPhase1Model = "phase1_model.json";
inline constexpr const char* kLabels = "labels.json";
inline constexpr const char* kCache = "cache.json";
inline constexpr const char* kTrainLog = "train_log.jsonl";
inline constexpr const char* kEvalReport = "eval_report.jsonl";
inline constexpr const char* kEvalTable = "eval_report.txt";
inline constexpr const char* kIntents = "intents.json";
inline constexpr const char* kGraphDot = "graph.dot";
inline constexpr const char* kGraphJsonl = "graph.jsonl";
inline constexpr const char* kDuplicates = "duplicates.json";
inline constexpr const char* kSweep = "sweep.json";
inline constexpr const char* kSweepPlot = "sweep.dat";
}  // namespace artifact

/// Corpus named by the config, tokenized and (with a lexicon) anonymized.
CorpusSplit load_run_corpus(const RunConfig& config);
const std::vector<Dialog>& split_of(const CorpusSplit& corpus, const std::string& name);

/// Writes a file under run_dir and records its size and digest.
void write_artifact(const RunConfig& config, const std::string& name, const std::string& content);
void write_resolved_config(const RunConfig& config);

void cmd_synth(const RunConfig& config, std::ostream& out);
void cmd_preprocess(const RunConfig& config, std::ostream& out);
TrainResult cmd_train(const RunConfig& config, std::ostream& out);
SplitResult cmd_train_baseline(const RunConfig& config, std::ostream& out);
EvalReport cmd_eval(const RunConfig& config, std::ostream& out);
std::vector<KSweepRow> cmd_sweep_k(const RunConfig& config, std::ostream& out);
DialogFlowGraph cmd_export_tree(const RunConfig& config, std::ostream& out);

/// Random small models on short dialogs drawn from the corpus; compares the
/// gradient of the M-step objective with central differences.
struct GradCheckReport {
  std::vector<GradCheckResult> per_seed;
  double max_rel_error = 0.0;
  bool passed = false;
};
GradCheckReport cmd_gradcheck(const RunConfig& config, std::ostream& out);

/// Trained model, vocabulary and response cache from run_dir. The cache is
/// rebuilt when missing.
struct LoadedRun {
  LstnModel model;
  Vocabulary vocab;
  ResponseCache cache;
  std::string variant = "lstn";
};
LoadedRun load_run(const RunConfig& config);

/// Everything the service needs. Intents come from intents.json when
/// export-tree has run, otherwise they are mined from the training split
/// (empty without a corpus). The lexicon is loaded when configured.
ServiceModel load_service_model(const RunConfig& config);

}  // namespace lstn::app
