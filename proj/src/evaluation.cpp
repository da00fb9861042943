#include "lstn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "lstn/errors.hpp"
#include "lstn/synth.hpp"

namespace lstn {

using nlohmann::json;

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts ngrams(const TokenSeq& s, std::size_t n) {
  NgramCounts out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[TokenSeq(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
  return out;
}

std::string fmt(double v, int precision = 2) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

}  // namespace

double bleu(const TokenSeq& hyp, const std::vector<TokenSeq>& refs) {
  if (refs.empty()) throw ArgumentError("bleu: no references");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    NgramCounts h = ngrams(hyp, n);
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], c);
    long matches = 0, total = 0;
    for (const auto& [g, c] : h) {
      total += c;
      auto it = max_ref.find(g);
      if (it != max_ref.end()) matches += std::min(c, it->second);
    }
    double p = n == 1 ? static_cast<double>(matches) / static_cast<double>(total)
                      : static_cast<double>(matches + 1) / static_cast<double>(total + 1);
    if (p <= 0.0) return 0.0;
    log_sum += std::log(p);
  }
  const double c = static_cast<double>(hyp.size());
  double r = static_cast<double>(refs.front().size());
  for (const auto& ref : refs) {
    double len = static_cast<double>(ref.size());
    if (std::abs(len - c) < std::abs(r - c) || (std::abs(len - c) == std::abs(r - c) && len < r)) r = len;
  }
  double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

double bleu(const TokenSeq& hyp, const TokenSeq& ref) { return bleu(hyp, std::vector<TokenSeq>{ref}); }

std::vector<TurnScores> score_dialog(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                                     const Dialog& dialog) {
  if (cache.num_states() != model.num_states()) throw ShapeError("response cache does not match the model's K");
  std::vector<TurnScores> out;
  StateMarginal marginal = StateMarginal::initial();
  for (const auto& turn : dialog.turns) {
    TurnScores s;
    Vector e = emission_logprobs(model, vocab.encode_response(turn.agent));
    for (long z = 1; z < e.size(); ++z)
      if (e(z) > e(s.emission_state)) s.emission_state = static_cast<int>(z);
    const auto& list = cache.states[static_cast<std::size_t>(s.emission_state)];
    if (list.empty()) throw InferenceError("no cached response for state " + std::to_string(s.emission_state));
    s.recoverability = bleu(vocab.decode(list.front().tokens), turn.agent);

    marginal = track_state(marginal, vocab.encode(turn.user), model);
    Reply reply = respond(marginal, cache);
    s.tracked_state = reply.state;
    s.end_to_end = bleu(vocab.decode(reply.tokens), turn.agent);
    out.push_back(s);
  }
  return out;
}

double recoverability(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                      const std::vector<Dialog>& test) {
  return evaluate(model, cache, vocab, test, {}).recoverability;
}

double end_to_end_bleu(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                       const std::vector<Dialog>& test) {
  return evaluate(model, cache, vocab, test, {}).end_to_end_bleu;
}

std::vector<std::vector<int>> tracked_states(const LstnModel& model, const Vocabulary& vocab,
                                             const std::vector<Dialog>& dialogs) {
  std::vector<std::vector<int>> out;
  for (const auto& d : dialogs) {
    std::vector<int> row;
    StateMarginal marginal = StateMarginal::initial();
    for (const auto& turn : d.turns) {
      marginal = track_state(marginal, vocab.encode(turn.user), model);
      row.push_back(marginal.argmax());
    }
    out.push_back(std::move(row));
  }
  return out;
}

EvalReport evaluate(const LstnModel& model, const ResponseCache& cache, const Vocabulary& vocab,
                    const std::vector<Dialog>& test, const EvalOptions& options, const TurnLabels* gold) {
  EvalReport report;
  report.dataset = options.dataset;
  report.variant = options.variant;
  report.config_hash = options.config_hash;
  report.num_states = model.num_states();
  double rec_sum = 0.0, e2e_sum = 0.0;
  std::vector<int> learned, truth;
  for (const auto& dialog : test) {
    auto scores = score_dialog(model, cache, vocab, dialog);
    DialogBreakdown b{dialog.id, static_cast<int>(scores.size()), 0.0, 0.0};
    for (const auto& s : scores) {
      b.recoverability += s.recoverability;
      b.end_to_end_bleu += s.end_to_end;
    }
    rec_sum += b.recoverability;
    e2e_sum += b.end_to_end_bleu;
    if (b.turns > 0) {
      b.recoverability /= b.turns;
      b.end_to_end_bleu /= b.turns;
    }
    report.num_turns += b.turns;
    report.per_dialog.push_back(std::move(b));
    if (gold) {
      auto it = gold->find(dialog.id);
      if (it == gold->end() || it->second.size() != scores.size())
        throw ArgumentError("gold labels missing or misaligned for dialog '" + dialog.id + "'");
      for (std::size_t i = 0; i < scores.size(); ++i) {
        learned.push_back(scores[i].tracked_state);
        truth.push_back(it->second[i]);
      }
    }
  }
  report.num_dialogs = static_cast<long>(test.size());
  if (report.num_turns > 0) {
    report.recoverability = rec_sum / static_cast<double>(report.num_turns);
    report.end_to_end_bleu = e2e_sum / static_cast<double>(report.num_turns);
  }
  if (gold) report.purity = state_recovery(learned, truth);
  return report;
}

json EvalReport::to_json() const {
  json dialogs = json::array();
  for (const auto& d : per_dialog)
    dialogs.push_back({{"id", d.id},
                       {"turns", d.turns},
                       {"recoverability", d.recoverability},
                       {"end_to_end_bleu", d.end_to_end_bleu}});
  json j = {{"dataset", dataset},
            {"variant", variant},
            {"num_states", num_states},
            {"bleu_variant", bleu_variant},
            {"recoverability", recoverability},
            {"end_to_end_bleu", end_to_end_bleu},
            {"num_dialogs", num_dialogs},
            {"num_turns", num_turns},
            {"config_hash", config_hash},
            {"per_dialog", std::move(dialogs)}};
  if (purity) j["purity"] = *purity;
  return j;
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.dataset = j.at("dataset").get<std::string>();
  r.variant = j.at("variant").get<std::string>();
  r.num_states = j.at("num_states").get<int>();
  r.bleu_variant = j.at("bleu_variant").get<std::string>();
  r.recoverability = j.at("recoverability").get<double>();
  r.end_to_end_bleu = j.at("end_to_end_bleu").get<double>();
  r.num_dialogs = j.at("num_dialogs").get<long>();
  r.num_turns = j.at("num_turns").get<long>();
  r.config_hash = j.at("config_hash").get<std::string>();
  if (j.contains("purity")) r.purity = j.at("purity").get<double>();
  for (const auto& d : j.at("per_dialog"))
    r.per_dialog.push_back({d.at("id").get<std::string>(), d.at("turns").get<int>(),
                            d.at("recoverability").get<double>(), d.at("end_to_end_bleu").get<double>()});
  return r;
}

std::string EvalReport::to_jsonl() const { return to_json().dump() + "\n"; }

std::string EvalReport::to_table() const {
  std::ostringstream out;
  out << "dataset          " << dataset << '\n'
      << "variant          " << variant << '\n'
      << "K                " << num_states << '\n'
      << "dialogs / turns  " << num_dialogs << " / " << num_turns << '\n'
      << "bleu variant     " << bleu_variant << '\n'
      << "recoverability   " << fmt(recoverability) << '\n'
      << "end-to-end BLEU  " << fmt(end_to_end_bleu) << '\n';
  if (purity) out << "state purity     " << fmt(*purity, 4) << '\n';
  out << "config hash      " << config_hash << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------

std::vector<KSweepRow> k_sweep(const KSweepInput& input, std::vector<int> k_values,
                               const std::function<void(const KSweepRow&)>& on_row) {
  if (k_values.empty()) throw ArgumentError("k_sweep: no K values");
  if (!input.corpus || !input.vocab) throw ArgumentError("k_sweep: corpus and vocabulary are required");
  std::sort(k_values.begin(), k_values.end());
  const auto train_set = encode_dialogs(input.corpus->train, *input.vocab);
  const auto dev_set = encode_dialogs(input.corpus->dev, *input.vocab);
  std::vector<KSweepRow> rows;
  for (int k : k_values) {
    KSweepRow row;
    row.num_states = k;
    try {
      TrainConfig cfg = input.config;
      cfg.num_states = k;
      TrainResult result = train(train_set, dev_set, make_model_config(cfg, *input.vocab), cfg);
      if (result.aborted) throw NumericalError(result.abort_reason);
      ResponseCache cache = build_response_cache(result.model, input.beam);
      EvalReport report = evaluate(result.model, cache, *input.vocab, input.corpus->test, {});
      row.bleu = report.end_to_end_bleu;
      row.recoverability = report.recoverability;
      row.best_dev_ppl = result.best_dev_ppl;
    } catch (const std::exception& e) {
      row.error = e.what();
    }
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string k_sweep_plot_data(const std::vector<KSweepRow>& rows) {
  std::string out = "# K\tBLEU\n";
  for (const auto& r : rows)
    if (r.ok()) out += std::to_string(r.num_states) + "\t" + fmt(r.bleu, 4) + "\n";
  return out;
}

json k_sweep_to_json(const std::vector<KSweepRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json row = {{"num_states", r.num_states}};
    if (r.ok()) {
      row["bleu"] = r.bleu;
      row["recoverability"] = r.recoverability;
      row["best_dev_ppl"] = r.best_dev_ppl;
    } else {
      row["error"] = r.error;
    }
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace lstn
