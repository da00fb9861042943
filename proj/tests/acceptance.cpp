// Acceptance checks: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Run from the source tree (ctest does this).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lstn/app/cli.hpp"
#include "lstn/app/config.hpp"
#include "lstn/app/run.hpp"
#include "lstn/baseline.hpp"
#include "lstn/evaluation.hpp"
#include "lstn/interpret.hpp"
#include "lstn/synth.hpp"
#include "support.hpp"

using namespace lstn;
using namespace lstn::app;
using namespace lstn::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kPosteriorTol = 1e-8;
constexpr double kElboTol = 1e-6;
constexpr double kGradTol = 1e-3;
constexpr double kAscentTol = 1e-6;
constexpr double kMinRecoverability = 95.0;
constexpr double kMinEndToEnd = 85.0;
constexpr double kMinPurity = 0.9;
constexpr double kUpperBoundTol = 1e-6;
constexpr double kMinKGain = 20.0;
constexpr double kMaxKPlateau = 5.0;

int failures = 0;

void report(const std::string& name, bool ok, const std::string& detail, double seconds) {
  std::printf("%s %s: %s (%.1f s)\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str(), seconds);
  std::fflush(stdout);
  failures += ok ? 0 : 1;
}

/// Runs `body` (returning pass/fail and filling the detail) and reports it.
void criterion(const std::string& name, const std::function<bool(std::string&)>& body) {
  auto start = std::chrono::steady_clock::now();
  std::string detail;
  bool ok = false;
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    detail += std::string(detail.empty() ? "" : "; ") + "exception: " + e.what();
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  report(name, ok, detail, secs);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::string kSynthIni = std::string(LSTN_SOURCE_DIR) + "/configs/synth.ini";

std::vector<std::string> run_args(const fs::path& dir) {
  const std::string corpus = (dir / artifact::kCorpus).string();
  return {"--config", kSynthIni, "--run_dir", dir.string(), "--corpus", corpus, "--gold_labels", corpus};
}

RunConfig load_config(const fs::path& dir) {
  RunConfig c;
  CLI::App app;
  bind_options(app, c);
  std::vector<std::string> args = run_args(dir);
  args.insert(args.begin(), "acceptance");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  app.parse(static_cast<int>(argv.size()), argv.data());
  return c;
}

/// synth, train, eval and export-tree through the CLI into `dir`.
void run_pipeline(const fs::path& dir) {
  fs::remove_all(dir);
  for (const char* cmd : {"synth", "train", "eval", "export-tree"}) {
    std::vector<std::string> args{"lstn", cmd};
    for (const auto& a : run_args(dir)) args.push_back(a);
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    std::ostringstream out, err;
    if (run_cli(static_cast<int>(argv.size()), argv.data(), out, err) != 0)
      throw std::runtime_error(std::string(cmd) + " failed: " + err.str());
  }
}

struct RandomInstance {
  LstnModel model;
  EncodedDialog dialog;
};

/// 50 models cycling K over {2,3,4} and N over {1..4}.
std::vector<RandomInstance> random_instances() {
  std::vector<RandomInstance> out;
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 50; ++i) {
    const int k = 2 + i % 3, n = 1 + i % 4;
    out.push_back({random_model(k, 12, 4, static_cast<std::uint64_t>(100 + i), 1.0), random_dialog(n, 12, rng)});
  }
  return out;
}

struct SynthScores {
  double rec = 0, e2e = 0;
};

}  // namespace

int main() {
  const auto instances = random_instances();
  const fs::path root = fs::temp_directory_path() / "lstn_acceptance";
  fs::remove_all(root);

  criterion("e-step matches exhaustive enumeration", [&](std::string& detail) {
    auto start = std::chrono::steady_clock::now();
    double worst = 0.0;
    for (const auto& inst : instances)
      worst = std::max(worst, max_abs_q_error(e_step(inst.model, inst.dialog), enumerate(inst.model, inst.dialog)));
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    detail = fmt("50 models, max |q - q_enum| = %.2e (tol %.0e), %.1f s (limit 60 s)", worst, kPosteriorTol, secs);
    return worst <= kPosteriorTol && secs < 60.0;
  });

  criterion("ELBO identity at the exact posterior", [&](std::string& detail) {
    double worst = 0.0;
    for (const auto& inst : instances) {
      PosteriorTable q = e_step(inst.model, inst.dialog);
      double gap = m_step_objective(inst.model, inst.dialog, q) + posterior_entropy(q) -
                   marginal_loglik(inst.model, inst.dialog);
      worst = std::max(worst, std::abs(gap));
    }
    DialogFactors hand = hand_instance();
    PosteriorTable hq = e_step(hand);
    double f1 = m_step_table(hand, hq)[0](0), h = posterior_entropy(hq), ll = marginal_loglik(hand);
    bool hand_ok = std::abs(f1 - -1.47863) < 1e-5 && std::abs(h - 0.56234) < 1e-5 &&
                   std::abs(ll - std::log(0.4)) < 1e-12 && std::abs(f1 + h - ll) < kElboTol;
    detail = fmt("max |f_1 + H - LL| = %.2e (tol %.0e); hand f_1 %.5f, H %.5f", worst, kElboTol, f1, h) +
             fmt(", LL %.5f", ll);
    return worst <= kElboTol && hand_ok;
  });

  criterion("f_1 gradients match central differences", [&](std::string& detail) {
    auto start = std::chrono::steady_clock::now();
    std::mt19937_64 rng(77);
    double worst = 0.0;
    long coords = 0;
    std::string worst_param;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      LstnModel m = random_model(3, 10, 4, seed);
      EncodedDialog d = random_dialog(2, 10, rng);
      PosteriorTable q = e_step(m, d);
      auto fn = [&](Tape& tape) {
        FactorNodeCache c(tape, m);
        return m_step_objective(c.build(d), q);
      };
      GradCheckResult r = grad_check(fn, m.store, 1e-5);
      coords += r.coordinates_checked;
      if (r.max_rel_error > worst) worst = r.max_rel_error, worst_param = r.worst_param;
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    detail = fmt("K=3 N=2, 20 seeds, %.0f coordinates, max rel. error %.2e", static_cast<double>(coords), worst) +
             " (" + worst_param + fmt(", tol %.0e), %.1f s (limit 120 s)", kGradTol, secs);
    return worst <= kGradTol && secs < 120.0;
  });

  criterion("generalized EM ascent", [&](std::string& detail) {
    std::mt19937_64 rng(31);
    LstnModel m = random_model(3, 10, 4, 32);
    std::vector<EncodedDialog> store;
    for (int i = 0; i < 6; ++i) store.push_back(random_dialog(1 + i % 4, 10, rng));
    std::vector<const EncodedDialog*> batch;
    for (const auto& d : store) batch.push_back(&d);
    TrainConfig config;
    config.learning_rate = 1e-4;
    config.m_steps_per_e_step = 1;
    auto total = [&] {
      double s = 0.0;
      for (const auto& d : store) s += marginal_loglik(m, d);
      return s;
    };
    double prev = total(), first = prev, worst_drop = 0.0;
    for (int step = 0; step < 20; ++step) {
      em_step(m, batch, config);
      double now = total();
      worst_drop = std::max(worst_drop, prev - now);
      prev = now;
    }
    detail = fmt("20 steps at lr 1e-4: log-lik %.6f -> %.6f, largest decrease %.2e (tol %.0e)", first, prev,
                 worst_drop, kAscentTol);
    return worst_drop <= kAscentTol;
  });

  // Full pipeline runs (shared by the synthetic, upper-bound and determinism
  // criteria).
  const fs::path run_a = root / "a", run_b = root / "b";
  double pipeline_secs = 0.0;
  std::string pipeline_error;
  try {
    auto start = std::chrono::steady_clock::now();
    run_pipeline(run_a);
    pipeline_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  } catch (const std::exception& e) {
    pipeline_error = e.what();
  }
  std::vector<std::pair<std::string, SynthScores>> synthetic_runs;

  criterion("synthetic K=8 run", [&](std::string& detail) {
    if (!pipeline_error.empty()) throw std::runtime_error(pipeline_error);
    RunConfig config = load_config(run_a);
    EvalReport rep = EvalReport::from_json(nlohmann::json::parse(read_file(run_a / artifact::kEvalReport)));
    synthetic_runs.push_back({"pipeline", {rep.recoverability, rep.end_to_end_bleu}});

    LoadedRun run = load_run(config);
    CorpusSplit corpus = load_run_corpus(config);
    TurnLabels gold = load_turn_labels(config.gold_labels);
    std::vector<int> learned, truth;
    auto tracked = tracked_states(run.model, run.vocab, corpus.train);
    for (std::size_t d = 0; d < corpus.train.size(); ++d) {
      const auto& g = gold.at(corpus.train[d].id);
      learned.insert(learned.end(), tracked[d].begin(), tracked[d].end());
      truth.insert(truth.end(), g.begin(), g.end());
    }
    auto align = majority_alignment(learned, truth);
    auto mapped = [&](int z) { return z == kStartState ? kStartState : align.at(z); };
    DialogFlowGraph graph = DialogFlowGraph::parse_jsonl(read_file(run_a / artifact::kGraphJsonl));
    std::set<std::pair<int, int>> edges;
    for (const auto& e : graph.edges) edges.insert({mapped(e.from), mapped(e.to)});
    auto oracle = OracleMachine::default_machine().transition_pairs();
    bool edges_ok = edges == oracle;

    double purity = rep.purity.value_or(0.0);
    detail = fmt("recoverability %.2f (>= %.0f), end-to-end %.2f (>= %.0f)", rep.recoverability, kMinRecoverability,
                 rep.end_to_end_bleu, kMinEndToEnd) +
             fmt(", purity %.3f (>= %.1f), edges %.0f mapped / %.0f oracle", purity, kMinPurity,
                 static_cast<double>(edges.size()), static_cast<double>(oracle.size())) +
             (edges_ok ? " match" : " differ") + fmt(", %.0f s (limit 900 s)", pipeline_secs);
    return rep.recoverability >= kMinRecoverability && rep.end_to_end_bleu >= kMinEndToEnd &&
           purity >= kMinPurity && edges_ok && pipeline_secs < 900.0;
  });

  // In-process runs on the same corpus: LSTN vs split-LSTN over three seeds,
  // then the K sweep.
  RunConfig config;
  CorpusSplit corpus;
  Vocabulary vocab;
  bool have_corpus = pipeline_error.empty();
  if (have_corpus) {
    config = load_config(run_a);
    corpus = load_run_corpus(config);
    vocab = load_run(config).vocab;
  }

  criterion("LSTN beats split-LSTN end to end", [&](std::string& detail) {
    if (!have_corpus) throw std::runtime_error("no synthetic corpus: " + pipeline_error);
    auto train_set = encode_dialogs(corpus.train, vocab);
    auto dev_set = encode_dialogs(corpus.dev, vocab);
    int wins = 0;
    for (std::uint64_t seed : {1, 2, 3}) {
      TrainConfig tc = config.train;
      tc.seed = seed;
      ModelConfig mc = make_model_config(tc, vocab);
      LstnModel lstn = train(train_set, dev_set, mc, tc).model;
      LstnModel split = train_split(train_set, dev_set, mc, tc).phase2.model;
      ResponseCache lc = build_response_cache(lstn, config.beam());
      ResponseCache sc = build_response_cache(split, config.beam());
      SynthScores l{recoverability(lstn, lc, vocab, corpus.test), end_to_end_bleu(lstn, lc, vocab, corpus.test)};
      SynthScores s{recoverability(split, sc, vocab, corpus.test), end_to_end_bleu(split, sc, vocab, corpus.test)};
      synthetic_runs.push_back({"lstn seed " + std::to_string(seed), l});
      synthetic_runs.push_back({"split seed " + std::to_string(seed), s});
      wins += l.e2e >= s.e2e;
      if (!detail.empty()) detail += ", ";
      detail += fmt("seed %.0f: %.2f vs %.2f", static_cast<double>(seed), l.e2e, s.e2e);
    }
    detail += fmt("; LSTN >= split on %.0f of 3 seeds", wins);
    return wins >= 2;
  });

  std::vector<KSweepRow> rows;
  criterion("K sweep rises then saturates", [&](std::string& detail) {
    if (!have_corpus) throw std::runtime_error("no synthetic corpus: " + pipeline_error);
    KSweepInput in{&corpus, &vocab, config.train, config.beam()};
    rows = k_sweep(in, {1, 8, 16, 64});
    std::map<int, double> bleu;
    for (const auto& r : rows) {
      if (!r.ok()) throw std::runtime_error("K=" + std::to_string(r.num_states) + ": " + r.error);
      bleu[r.num_states] = r.bleu;
      synthetic_runs.push_back({"sweep K=" + std::to_string(r.num_states), {r.recoverability, r.bleu}});
    }
    double gain = bleu.at(8) - bleu.at(1), plateau = std::abs(bleu.at(64) - bleu.at(16));
    detail = fmt("BLEU K=1 %.2f, K=8 %.2f, K=16 %.2f, K=64 %.2f", bleu.at(1), bleu.at(8), bleu.at(16), bleu.at(64)) +
             fmt("; gain %.2f (> %.0f), plateau %.2f (< %.0f)", gain, kMinKGain, plateau, kMaxKPlateau);
    return gain > kMinKGain && plateau < kMaxKPlateau;
  });

  criterion("end-to-end BLEU bounded by recoverability", [&](std::string& detail) {
    if (synthetic_runs.empty()) throw std::runtime_error("no synthetic runs completed");
    double worst = -INFINITY;
    std::string worst_run;
    for (const auto& [name, s] : synthetic_runs)
      if (s.e2e - s.rec > worst) worst = s.e2e - s.rec, worst_run = name;
    detail = fmt("%.0f runs, max (e2e - rec) = %.2e", static_cast<double>(synthetic_runs.size()), worst) + " (" +
             worst_run + fmt(", tol %.0e)", kUpperBoundTol);
    return worst <= kUpperBoundTol;
  });

  criterion("repeated pipeline runs are byte-identical", [&](std::string& detail) {
    if (!pipeline_error.empty()) throw std::runtime_error(pipeline_error);
    run_pipeline(run_b);
    std::vector<std::string> differing;
    for (const char* name : {artifact::kEvalReport, artifact::kGraphJsonl, artifact::kGraphDot, artifact::kIntents,
                             artifact::kModel, artifact::kCache}) {
      std::string a = read_file(run_a / name), b = read_file(run_b / name);
      if (a.empty() || a != b) differing.push_back(name);
    }
    detail = differing.empty() ? "eval report, graph, intents, model and cache identical" : "differ:";
    for (const auto& n : differing) detail += " " + n;
    return differing.empty();
  });

  fs::remove_all(root);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
