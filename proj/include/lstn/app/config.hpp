#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lstn/em.hpp"
#include "lstn/inference.hpp"

namespace CLI {
class App;
}

namespace lstn::app {

/// Everything a CLI run needs. Keys in config files use the field names
/// below; command-line flags take precedence over the file.
struct RunConfig {
  TrainConfig train;

  // data
  std::string corpus;
  std::string corpus_format = "jsonl";
  std::string lexicon;
  std::string gold_labels;  // jsonl corpus with per-turn "state" fields
  std::string dataset = "corpus";
  int min_count = 1;
  std::string run_dir = "runs/default";

  // inference and evaluation
  int beam_size = 10;
  int max_len = 0;  // 0 = max_response_len
  bool length_normalize = false;
  std::string eval_split = "test";

  // split-LSTN
  bool include_agent_context = false;

  // interpretability exports
  long min_edge_count = 1;
  int top_r = 3;
  double duplicate_threshold = 0.8;

  // K sweep
  std::vector<int> k_values{1, 8, 16, 64};

  // synthetic corpus
  std::string machine;  // empty = built-in four-state machine
  int synth_dialogs = 500;
  int synth_max_turns = 5;
  std::uint64_t synth_seed = 7;

  // gradient check
  int gradcheck_states = 3;
  int gradcheck_turns = 2;
  int gradcheck_dim = 4;
  int gradcheck_seeds = 3;
  long gradcheck_coords = 16;  // sampled coordinates per parameter, 0 = all
  double gradcheck_tolerance = 1e-3;

  // service
  std::string host = "127.0.0.1";
  int port = 8080;
  double session_idle_seconds = 1800.0;
  std::string static_dir;

  /// Grid checks (TrainConfig::validate) plus range checks on the rest.
  /// Throws ArgumentError.
  void validate() const;

  BeamConfig beam() const;

  nlohmann::json to_json() const;
  /// key = value lines, loadable again with --config.
  std::string to_ini() const;
  /// Hash of the settings that affect results: paths, service settings and
  /// the run directory are excluded.
  std::string config_hash() const;
};

/// Registers every RunConfig field as a flag (both --snake_case and
/// --kebab-case spellings) and --config for a file of key = value lines.
void bind_options(CLI::App& app, RunConfig& config);

}  // namespace lstn::app
