#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "lstn/errors.hpp"
#include "lstn/evaluation.hpp"
#include "lstn/synth.hpp"
#include "support.hpp"

using namespace lstn;
using namespace lstn::testing;

namespace {

using Gram = std::vector<std::string>;

std::map<Gram, int> grams(const TokenSeq& s, std::size_t n) {
  std::map<Gram, int> out;
  for (std::size_t i = 0; i + n <= s.size(); ++i) ++out[Gram(s.begin() + static_cast<long>(i), s.begin() + static_cast<long>(i + n))];
  return out;
}

/// Single-reference BLEU-4, unsmoothed unigrams and add-one higher orders.
double bleu_oracle(const TokenSeq& h, const TokenSeq& r) {
  if (h.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    auto hg = grams(h, n), rg = grams(r, n);
    double match = 0, total = 0;
    for (const auto& [g, c] : hg) {
      total += c;
      auto it = rg.find(g);
      if (it != rg.end()) match += std::min(c, it->second);
    }
    double p = n == 1 ? match / total : (match + 1) / (total + 1);
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  double c = static_cast<double>(h.size()), rl = static_cast<double>(r.size());
  double bp = c < rl ? std::exp(1.0 - rl / c) : 1.0;
  return 100.0 * bp * std::exp(log_sum / 4.0);
}

struct Fixture {
  SyntheticCorpus syn = generate_corpus(OracleMachine::default_machine(), 40, 3, 4);
  Vocabulary vocab = Vocabulary::build(syn.corpus.train, 1);
};

}  // namespace

TEST_CASE("bleu fixed cases") {
  TokenSeq s = tokenize("the cat sat on the mat");
  CHECK(bleu(s, s) == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(bleu(tokenize("a b c d"), tokenize("w x y z")) == 0.0);
  CHECK(bleu(tokenize("the the the"), tokenize("the cat")) ==
        doctest::Approx(100.0 * std::pow(1.0 / 18.0, 0.25)).epsilon(1e-12));
  CHECK(bleu({}, s) == 0.0);
  CHECK_THROWS_AS(bleu(s, std::vector<TokenSeq>{}), ArgumentError);
}

TEST_CASE("bleu agrees with an n-gram oracle") {
  std::mt19937_64 rng(3);
  const std::vector<std::string> words{"a", "b", "c", "d", "e"};
  std::uniform_int_distribution<int> pick(0, 4), len(1, 9);
  for (int trial = 0; trial < 200; ++trial) {
    TokenSeq h, r;
    for (int i = len(rng); i > 0; --i) h.push_back(words[static_cast<std::size_t>(pick(rng))]);
    for (int i = len(rng); i > 0; --i) r.push_back(words[static_cast<std::size_t>(pick(rng))]);
    CHECK(bleu(h, r) == doctest::Approx(bleu_oracle(h, r)).epsilon(1e-12));
  }
}

TEST_CASE("bleu brevity penalty picks the closest reference") {
  TokenSeq h = tokenize("a b c");
  std::vector<TokenSeq> refs{tokenize("a b c d e f"), tokenize("a b c d")};
  CHECK(bleu(h, refs) == doctest::Approx(std::max(bleu_oracle(h, refs[0]), bleu_oracle(h, refs[1]))).epsilon(1e-12));
  CHECK(bleu(h, refs) < 100.0);
}

TEST_CASE("recoverability matches a direct computation") {
  Fixture f;
  LstnModel m = random_model(3, f.vocab.size(), 4, 5, 1.0);
  ResponseCache cache = build_response_cache(m, BeamConfig{2, 6, false});
  double total = 0;
  long n = 0;
  for (const auto& d : f.syn.corpus.test)
    for (const auto& t : d.turns) {
      Vector e = emission_logprobs(m, f.vocab.encode_response(t.agent));
      Eigen::Index z;
      e.maxCoeff(&z);
      total += bleu(f.vocab.decode(cache.states[static_cast<std::size_t>(z)][0].tokens), t.agent);
      ++n;
    }
  CHECK(recoverability(m, cache, f.vocab, f.syn.corpus.test) == doctest::Approx(total / n).epsilon(1e-12));
}

TEST_CASE("with one state both metrics score the single rank-1 response") {
  Fixture f;
  LstnModel m = random_model(1, f.vocab.size(), 4, 6, 1.0);
  ResponseCache cache = build_response_cache(m, BeamConfig{1, 6, false});
  TokenSeq only = f.vocab.decode(cache.states[0][0].tokens);
  double total = 0;
  long n = 0;
  for (const auto& d : f.syn.corpus.test)
    for (const auto& t : d.turns) total += bleu(only, t.agent), ++n;
  CHECK(recoverability(m, cache, f.vocab, f.syn.corpus.test) == doctest::Approx(total / n).epsilon(1e-12));
  CHECK(end_to_end_bleu(m, cache, f.vocab, f.syn.corpus.test) == doctest::Approx(total / n).epsilon(1e-12));
}

TEST_CASE("metrics are means over turns") {
  Fixture f;
  LstnModel m = random_model(3, f.vocab.size(), 4, 7, 1.0);
  ResponseCache cache = build_response_cache(m, BeamConfig{2, 6, false});
  std::vector<Dialog> twice = f.syn.corpus.test;
  twice.insert(twice.end(), f.syn.corpus.test.begin(), f.syn.corpus.test.end());
  CHECK(recoverability(m, cache, f.vocab, twice) ==
        doctest::Approx(recoverability(m, cache, f.vocab, f.syn.corpus.test)).epsilon(1e-12));
  CHECK(end_to_end_bleu(m, cache, f.vocab, twice) ==
        doctest::Approx(end_to_end_bleu(m, cache, f.vocab, f.syn.corpus.test)).epsilon(1e-12));

  auto tracked = tracked_states(m, f.vocab, f.syn.corpus.test);
  for (std::size_t i = 0; i < f.syn.corpus.test.size(); ++i) {
    auto scores = score_dialog(m, cache, f.vocab, f.syn.corpus.test[i]);
    REQUIRE(scores.size() == tracked[i].size());
    for (std::size_t t = 0; t < scores.size(); ++t) {
      CHECK(scores[t].tracked_state == tracked[i][t]);
      if (scores[t].tracked_state == scores[t].emission_state) CHECK(scores[t].end_to_end == scores[t].recoverability);
    }
  }
}

TEST_CASE("evaluation report") {
  Fixture f;
  LstnModel m = random_model(3, f.vocab.size(), 4, 8, 1.0);
  ResponseCache cache = build_response_cache(m, BeamConfig{2, 6, false});
  EvalOptions opts{"synth", "lstn", "abc"};
  EvalReport r = evaluate(m, cache, f.vocab, f.syn.corpus.test, opts, &f.syn.gold);
  CHECK(r.num_states == 3);
  CHECK(r.bleu_variant == std::string(kBleuVariant));
  CHECK(r.num_dialogs == static_cast<long>(f.syn.corpus.test.size()));
  REQUIRE(r.purity.has_value());
  CHECK(*r.purity > 0.0);
  CHECK(*r.purity <= 1.0);
  CHECK(r.per_dialog.size() == f.syn.corpus.test.size());

  EvalReport back = EvalReport::from_json(nlohmann::json::parse(r.to_jsonl()));
  CHECK(back.to_json() == r.to_json());
  CHECK(r.to_jsonl().back() == '\n');
  CHECK(r.to_table().find("recoverability") != std::string::npos);
  CHECK_FALSE(evaluate(m, cache, f.vocab, f.syn.corpus.test, opts).purity.has_value());
  CHECK(evaluate(m, cache, f.vocab, f.syn.corpus.test, opts, &f.syn.gold).to_json() == r.to_json());
}

TEST_CASE("k sweep rows") {
  Fixture f;
  KSweepInput in;
  in.corpus = &f.syn.corpus;
  in.vocab = &f.vocab;
  in.config.epochs = 1;
  in.config.embedding_dim = 8;
  in.config.hidden_dim = 8;
  in.config.allow_off_grid = true;
  in.beam = BeamConfig{2, 6, false};
  std::vector<int> seen;
  auto rows = k_sweep(in, {3, 1, 0}, [&](const KSweepRow& r) { seen.push_back(r.num_states); });
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].num_states == 0);
  CHECK_FALSE(rows[0].ok());
  CHECK(rows[1].num_states == 1);
  CHECK(rows[2].num_states == 3);
  CHECK(rows[1].ok());
  CHECK(rows[1].bleu == doctest::Approx(rows[1].recoverability).epsilon(1e-12));
  CHECK(seen.size() == 3);

  std::string plot = k_sweep_plot_data(rows);
  CHECK(plot.find("\n0\t") == std::string::npos);
  CHECK(plot.find("\n1\t") != std::string::npos);
  CHECK(k_sweep_to_json(rows).size() == 3);
}
