#include "lstn/app/run.hpp"

#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include "lstn/baseline.hpp"
#include "lstn/errors.hpp"
#include "lstn/hash.hpp"
#include "lstn/synth.hpp"

namespace lstn::app {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError("malformed json in '" + path.string() + "': " + e.what(), 1);
  }
}

fs::path run_path(const RunConfig& config, const std::string& name) { return fs::path(config.run_dir) / name; }

json load_manifest(const RunConfig& config) {
  fs::path p = run_path(config, artifact::kManifest);
  if (!fs::exists(p)) return {{"artifacts", json::object()}};
  return read_json(p);
}

void save_manifest(const RunConfig& config, const json& manifest) {
  std::ofstream out(run_path(config, artifact::kManifest), std::ios::binary);
  if (!out) throw Error("cannot write manifest in '" + config.run_dir + "'");
  out << manifest.dump(2) << '\n';
}

void set_variant(const RunConfig& config, const std::string& variant) {
  json m = load_manifest(config);
  m["variant"] = variant;
  m["config_hash"] = config.config_hash();
  save_manifest(config, m);
}

std::string read_variant(const RunConfig& config) {
  json m = load_manifest(config);
  return m.value("variant", std::string("lstn"));
}

Vocabulary build_vocab(const CorpusSplit& corpus, const RunConfig& config) {
  return Vocabulary::build(corpus.train, config.min_count);
}

std::string jsonl(const std::vector<TrainLogRecord>& log) {
  std::string out;
  for (const auto& r : log) out += r.to_json().dump() + "\n";
  return out;
}

void log_line(std::ostream& out, const TrainLogRecord& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "[%s] restart %d epoch %3d  elbo %.4f  dev ppl %.4f\n", r.phase.c_str(), r.restart,
                r.epoch, r.elbo, r.dev_ppl);
  out << buf << std::flush;
}

void save_model(const RunConfig& config, const std::string& name, const LstnModel& model, const json& meta) {
  json j = model.to_json();
  j["meta"] = meta;
  write_artifact(config, name, j.dump() + "\n");
}

}  // namespace

CorpusSplit load_run_corpus(const RunConfig& config) {
  if (config.corpus.empty()) throw ArgumentError("no corpus configured (set corpus)");
  if (!fs::exists(config.corpus)) throw Error("corpus file '" + config.corpus + "' does not exist");
  CorpusSplit corpus = load_corpus(config.corpus, parse_corpus_format(config.corpus_format));
  if (!config.lexicon.empty()) {
    if (!fs::exists(config.lexicon)) throw Error("lexicon file '" + config.lexicon + "' does not exist");
    EntityLexicon lexicon = EntityLexicon::load(config.lexicon);
    for (auto* split : {&corpus.train, &corpus.dev, &corpus.test})
      for (auto& d : *split) d = anonymize(d, lexicon);
  }
  return corpus;
}

const std::vector<Dialog>& split_of(const CorpusSplit& corpus, const std::string& name) {
  if (name == "train") return corpus.train;
  if (name == "dev") return corpus.dev;
  if (name == "test") return corpus.test;
  throw ArgumentError("unknown split '" + name + "'");
}

void write_artifact(const RunConfig& config, const std::string& name, const std::string& content) {
  fs::create_directories(config.run_dir);
  fs::path p = run_path(config, name);
  {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error("cannot write '" + p.string() + "'");
    out << content;
  }
  if (name == artifact::kManifest) return;
  json m = load_manifest(config);
  m["artifacts"][name] = {{"bytes", content.size()}, {"fnv1a", hex64(fnv1a(content))}};
  save_manifest(config, m);
}

void write_resolved_config(const RunConfig& config) { write_artifact(config, artifact::kConfig, config.to_ini()); }

// ---------------------------------------------------------------------------

void cmd_synth(const RunConfig& config, std::ostream& out) {
  OracleMachine machine = config.machine.empty() ? OracleMachine::default_machine() : OracleMachine::load(config.machine);
  SyntheticCorpus syn = generate_corpus(machine, config.synth_dialogs, config.synth_max_turns, config.synth_seed);
  std::ostringstream text;
  write_corpus(text, syn.corpus, &syn.gold);
  fs::path target = config.corpus.empty() ? run_path(config, artifact::kCorpus) : fs::path(config.corpus);
  if (config.corpus.empty()) {
    write_artifact(config, artifact::kCorpus, text.str());
  } else {
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    std::ofstream f(target, std::ios::binary);
    if (!f) throw Error("cannot write corpus '" + target.string() + "'");
    f << text.str();
  }
  write_artifact(config, artifact::kMachine, machine.to_text());
  write_resolved_config(config);
  out << "synthetic corpus: " << syn.corpus.train.size() << " train / " << syn.corpus.dev.size() << " dev / "
      << syn.corpus.test.size() << " test dialogs, " << machine.num_states() << " oracle states\n"
      << "written to " << target.string() << '\n';
}

void cmd_preprocess(const RunConfig& config, std::ostream& out) {
  CorpusSplit corpus = load_run_corpus(config);
  Vocabulary vocab = build_vocab(corpus, config);
  TurnLabels gold;
  if (!config.gold_labels.empty()) gold = load_turn_labels(config.gold_labels);
  std::ostringstream text;
  write_corpus(text, corpus, gold.empty() ? nullptr : &gold);
  write_artifact(config, artifact::kCorpus, text.str());
  fs::create_directories(config.run_dir);
  vocab.save(run_path(config, artifact::kVocab));
  write_artifact(config, artifact::kVocab, read_file(run_path(config, artifact::kVocab)));
  write_resolved_config(config);

  auto turns = [](const std::vector<Dialog>& ds) {
    long n = 0;
    for (const auto& d : ds) n += static_cast<long>(d.turns.size());
    return n;
  };
  auto oov = [&](const std::vector<Dialog>& ds) {
    long total = 0, unknown = 0;
    for (const auto& d : ds)
      for (const auto& t : d.turns)
        for (const auto* seq : {&t.user, &t.agent})
          for (const auto& w : *seq) {
            ++total;
            if (!vocab.contains(w)) ++unknown;
          }
    return total ? 100.0 * static_cast<double>(unknown) / static_cast<double>(total) : 0.0;
  };
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "train %zu dialogs (%ld turns), dev %zu (%ld), test %zu (%ld)\nvocabulary %d tokens, OOV dev %.2f%% "
                "test %.2f%%\n",
                corpus.train.size(), turns(corpus.train), corpus.dev.size(), turns(corpus.dev), corpus.test.size(),
                turns(corpus.test), vocab.size(), oov(corpus.dev), oov(corpus.test));
  out << buf;
}

TrainResult cmd_train(const RunConfig& config, std::ostream& out) {
  CorpusSplit corpus = load_run_corpus(config);
  Vocabulary vocab = build_vocab(corpus, config);
  auto train_set = encode_dialogs(corpus.train, vocab);
  auto dev_set = encode_dialogs(corpus.dev, vocab);
  TrainResult result = train(train_set, dev_set, make_model_config(config.train, vocab), config.train,
                             [&](const TrainLogRecord& r) { log_line(out, r); });

  fs::create_directories(config.run_dir);
  write_resolved_config(config);
  vocab.save(run_path(config, artifact::kVocab));
  write_artifact(config, artifact::kVocab, read_file(run_path(config, artifact::kVocab)));
  save_model(config, artifact::kModel, result.model,
             {{"variant", "lstn"},
              {"config_hash", config.config_hash()},
              {"best_epoch", result.best_epoch},
              {"restart", result.restart},
              {"best_dev_ppl", result.best_dev_ppl}});
  write_artifact(config, artifact::kTrainLog, jsonl(result.log));
  ResponseCache cache = build_response_cache(result.model, config.beam());
  write_artifact(config, artifact::kCache, cache.to_json().dump() + "\n");
  set_variant(config, "lstn");
  out << "best epoch " << result.best_epoch << " (restart " << result.restart << "), dev perplexity "
      << result.best_dev_ppl << "\n";
  if (result.aborted) throw NumericalError("training aborted, best checkpoint kept: " + result.abort_reason);
  return result;
}

SplitResult cmd_train_baseline(const RunConfig& config, std::ostream& out) {
  CorpusSplit corpus = load_run_corpus(config);
  Vocabulary vocab = build_vocab(corpus, config);
  auto train_set = encode_dialogs(corpus.train, vocab);
  auto dev_set = encode_dialogs(corpus.dev, vocab);
  SplitOptions options{config.include_agent_context};
  SplitResult result = train_split(train_set, dev_set, make_model_config(config.train, vocab), config.train, options,
                                   [&](const TrainLogRecord& r) { log_line(out, r); });

  fs::create_directories(config.run_dir);
  write_resolved_config(config);
  vocab.save(run_path(config, artifact::kVocab));
  write_artifact(config, artifact::kVocab, read_file(run_path(config, artifact::kVocab)));
  json meta = {{"config_hash", config.config_hash()}, {"include_agent_context", config.include_agent_context}};
  meta["variant"] = "split-lstn-phase1";
  save_model(config, artifact::kPhase1Model, result.phase1.model, meta);
  meta["variant"] = "split-lstn";
  save_model(config, artifact::kModel, result.phase2.model, meta);
  json labels = json::object();
  for (std::size_t d = 0; d < corpus.train.size(); ++d) labels[corpus.train[d].id] = result.train_labels[d];
  write_artifact(config, artifact::kLabels, labels.dump() + "\n");
  std::vector<TrainLogRecord> log = result.phase1.log;
  log.insert(log.end(), result.phase2.log.begin(), result.phase2.log.end());
  write_artifact(config, artifact::kTrainLog, jsonl(log));
  ResponseCache cache = build_response_cache(result.phase2.model, config.beam());
  write_artifact(config, artifact::kCache, cache.to_json().dump() + "\n");
  set_variant(config, "split-lstn");
  if (result.phase1.aborted || result.phase2.aborted)
    throw NumericalError("training aborted, best checkpoint kept: " + result.phase1.abort_reason +
                         result.phase2.abort_reason);
  return result;
}

LoadedRun load_run(const RunConfig& config) {
  fs::path model_path = run_path(config, artifact::kModel);
  if (!fs::exists(model_path)) throw Error("no trained model at '" + model_path.string() + "' (run train first)");
  LoadedRun run{LstnModel::load(model_path), Vocabulary::load(run_path(config, artifact::kVocab)), {}, read_variant(config)};
  if (run.model.config.vocab_fingerprint != run.vocab.fingerprint())
    throw Error("vocabulary in '" + config.run_dir + "' does not match the checkpoint");
  fs::path cache_path = run_path(config, artifact::kCache);
  bool rebuild = true;
  if (fs::exists(cache_path)) {
    run.cache = ResponseCache::from_json(read_json(cache_path));
    rebuild = run.cache.beam_size != config.beam_size || run.cache.num_states() != run.model.num_states();
  }
  if (rebuild) run.cache = build_response_cache(run.model, config.beam());
  return run;
}

ServiceModel load_service_model(const RunConfig& config) {
  LoadedRun run = load_run(config);
  ServiceModel m{std::move(run.model), std::move(run.vocab), std::move(run.cache), std::nullopt, {},
                 load_manifest(config).value("config_hash", config.config_hash()), run.variant, config.top_r, config.min_edge_count};
  if (!config.lexicon.empty()) m.lexicon = EntityLexicon::load(config.lexicon);
  fs::path intents_path = run_path(config, artifact::kIntents);
  if (fs::exists(intents_path)) {
    m.intents = intents_from_json(read_json(intents_path));
  } else if (!config.corpus.empty()) {
    m.intents = mine_intents(m.model, m.vocab, load_run_corpus(config).train);
  }
  return m;
}

EvalReport cmd_eval(const RunConfig& config, std::ostream& out) {
  LoadedRun run = load_run(config);
  CorpusSplit corpus = load_run_corpus(config);
  TurnLabels gold;
  if (!config.gold_labels.empty()) gold = load_turn_labels(config.gold_labels);
  EvalOptions options{config.dataset + "/" + config.eval_split, run.variant, config.config_hash()};
  EvalReport report = evaluate(run.model, run.cache, run.vocab, split_of(corpus, config.eval_split), options,
                               gold.empty() ? nullptr : &gold);
  write_artifact(config, artifact::kEvalReport, report.to_jsonl());
  write_artifact(config, artifact::kEvalTable, report.to_table());
  out << report.to_table();
  return report;
}

DialogFlowGraph cmd_export_tree(const RunConfig& config, std::ostream& out) {
  LoadedRun run = load_run(config);
  CorpusSplit corpus = load_run_corpus(config);
  auto intents = mine_intents(run.model, run.vocab, corpus.train);
  DialogFlowGraph graph = export_flow_graph(intents, run.cache, run.vocab, config.min_edge_count, config.top_r);
  auto duplicates = detect_duplicates(run.cache, config.duplicate_threshold);
  write_artifact(config, artifact::kIntents, intents_to_json(intents).dump(2) + "\n");
  write_artifact(config, artifact::kGraphDot, graph.to_dot());
  write_artifact(config, artifact::kGraphJsonl, graph.to_jsonl());
  write_artifact(config, artifact::kDuplicates,
                 json{{"threshold", config.duplicate_threshold}, {"groups", duplicates}}.dump() + "\n");
  out << graph.nodes.size() << " nodes, " << graph.edges.size() << " edges (min_edge_count " << config.min_edge_count
      << "), " << intents.size() << " intent classes, " << duplicates.size() << " duplicate groups\n";
  return graph;
}

std::vector<KSweepRow> cmd_sweep_k(const RunConfig& config, std::ostream& out) {
  CorpusSplit corpus = load_run_corpus(config);
  Vocabulary vocab = build_vocab(corpus, config);
  KSweepInput input{&corpus, &vocab, config.train, config.beam()};
  auto rows = k_sweep(input, config.k_values, [&](const KSweepRow& r) {
    if (r.ok())
      out << "K=" << r.num_states << "  BLEU " << r.bleu << "  recoverability " << r.recoverability << "\n";
    else
      out << "K=" << r.num_states << "  failed: " << r.error << "\n";
  });
  write_resolved_config(config);
  write_artifact(config, artifact::kSweep, k_sweep_to_json(rows).dump(2) + "\n");
  write_artifact(config, artifact::kSweepPlot, k_sweep_plot_data(rows));
  return rows;
}

GradCheckReport cmd_gradcheck(const RunConfig& config, std::ostream& out) {
  CorpusSplit corpus = load_run_corpus(config);
  Vocabulary vocab = build_vocab(corpus, config);
  auto dialogs = encode_dialogs(corpus.train, vocab);
  if (dialogs.empty()) throw EmptyCorpusError("gradcheck: no training dialogs");
  GradCheckReport report;
  for (int s = 0; s < config.gradcheck_seeds; ++s) {
    ModelConfig mc = make_model_config(config.train, vocab);
    mc.num_states = config.gradcheck_states;
    mc.embed_dim = config.gradcheck_dim;
    mc.hidden_dim = config.gradcheck_dim;
    LstnModel model = LstnModel::create(mc, config.train.init_range, config.train.seed + static_cast<std::uint64_t>(s));
    EncodedDialog d = dialogs[static_cast<std::size_t>(s) % dialogs.size()];
    if (d.turns.size() > static_cast<std::size_t>(config.gradcheck_turns))
      d.turns.resize(static_cast<std::size_t>(config.gradcheck_turns));
    PosteriorTable q = e_step(model, d);
    auto fn = [&](Tape& tape) {
      FactorNodeCache cache(tape, model);
      return m_step_objective(cache.build(d), q);
    };
    GradCheckResult r = grad_check(fn, model.store, 1e-5, config.gradcheck_coords, static_cast<std::uint64_t>(s));
    char buf[200];
    std::snprintf(buf, sizeof buf, "seed %d: max rel. error %.3e (%s), %ld coordinates\n", s, r.max_rel_error,
                  r.worst_param.c_str(), r.coordinates_checked);
    out << buf;
    report.max_rel_error = std::max(report.max_rel_error, r.max_rel_error);
    report.per_seed.push_back(std::move(r));
  }
  report.passed = report.max_rel_error <= config.gradcheck_tolerance;
  char buf[160];
  std::snprintf(buf, sizeof buf, "max rel. error %.3e (tolerance %.1e): %s\n", report.max_rel_error,
                config.gradcheck_tolerance, report.passed ? "ok" : "FAILED");
  out << buf;
  return report;
}

}  // namespace lstn::app
