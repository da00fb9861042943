#include <doctest.h>

#include <cmath>
#include <random>

#include "lstn/em.hpp"
#include "lstn/errors.hpp"
#include "lstn/synth.hpp"
#include "support.hpp"

using namespace lstn;
using namespace lstn::testing;

namespace {

PosteriorTable uniform_q(int k, int n) {
  PosteriorTable q;
  q.log_q.push_back(Matrix::Constant(k, 1, -std::log(k)));
  for (int i = 1; i < n; ++i) q.log_q.push_back(Matrix::Constant(k, k, -std::log(k)));
  return q;
}

}  // namespace

TEST_CASE("hand instance: two-term Bayes, f_1, entropy and log-likelihood") {
  DialogFactors f = hand_instance();
  PosteriorTable q = e_step(f);
  REQUIRE(q.num_turns() == 1);
  CHECK(std::exp(q.log_q[0](0, 0)) == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(std::exp(q.log_q[0](1, 0)) == doctest::Approx(0.25).epsilon(1e-14));

  double f1 = m_step_table(f, q)[0](0);
  CHECK(f1 == doctest::Approx(0.75 * std::log(0.3) + 0.25 * std::log(0.1)).epsilon(1e-14));
  CHECK(f1 == doctest::Approx(-1.47863).epsilon(1e-5));
  double h = posterior_entropy(q);
  CHECK(h == doctest::Approx(0.56234).epsilon(1e-5));
  CHECK(marginal_loglik(f) == doctest::Approx(std::log(0.4)).epsilon(1e-14));
  CHECK(f1 + h == doctest::Approx(std::log(0.4)).epsilon(1e-12));
}

TEST_CASE("hand instance: last-turn expectation") {
  DialogFactors f;
  f.log_trans.push_back((Matrix(2, 1) << std::log(0.5), std::log(0.5)).finished());
  f.log_emit.push_back((Vector(2) << std::log(0.5), std::log(0.5)).finished());
  f.log_trans.push_back((Matrix(2, 2) << std::log(0.5), std::log(0.7), std::log(0.5), std::log(0.3)).finished());
  f.log_emit.push_back((Vector(2) << std::log(0.2), std::log(0.1)).finished());
  PosteriorTable q = uniform_q(2, 2);
  double fn = m_step_table(f, q)[1](1);
  CHECK(fn == doctest::Approx(0.5 * std::log(0.14) + 0.5 * std::log(0.03)).epsilon(1e-14));
  CHECK(fn == doctest::Approx(-2.7363).epsilon(1e-4));
}

TEST_CASE("symmetric factors give a uniform posterior") {
  DialogFactors f;
  for (int i = 0; i < 3; ++i) {
    f.log_trans.push_back(Matrix::Constant(4, i ? 4 : 1, std::log(0.25)));
    f.log_emit.push_back(Vector::Constant(4, -1.7));
  }
  PosteriorTable q = e_step(f);
  for (const auto& lq : q.log_q) CHECK(lq.array().exp().isApprox(Matrix::Constant(lq.rows(), lq.cols(), 0.25).array(), 1e-14));
}

TEST_CASE("e_step, entropy and marginal agree with enumeration on random models") {
  std::mt19937_64 rng(21);
  for (int k = 1; k <= 4; ++k)
    for (int n = 1; n <= 4; ++n) {
      LstnModel m = random_model(k, 9, 3, static_cast<std::uint64_t>(10 * k + n), 1.0);
      EncodedDialog d = random_dialog(n, 9, rng);
      Enumeration e = enumerate(m, d);
      PosteriorTable q = e_step(m, d);
      CHECK(max_abs_q_error(q, e) < 1e-8);
      CHECK(std::abs(posterior_entropy(q) - e.entropy) < 1e-8);
      CHECK(std::abs(marginal_loglik(m, d) - e.loglik) < 1e-6);
      for (const auto& lq : q.log_q)
        for (long c = 0; c < lq.cols(); ++c) CHECK(std::abs(lq.col(c).array().exp().sum() - 1.0) < 1e-6);
    }
}

TEST_CASE("recursions agree with enumeration on random factor tables") {
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 30; ++trial) {
    int k = 1 + trial % 4, n = 1 + (trial / 4) % 4;
    DialogFactors f = random_factors(k, n, rng);
    Enumeration e = enumerate(f);
    PosteriorTable q = e_step(f);
    CHECK(max_abs_q_error(q, e) < 1e-8);
    CHECK(std::abs(marginal_loglik(f) - e.loglik) < 1e-9);
    CHECK(std::abs(m_step_table(f, q)[0](0) + posterior_entropy(q) - e.loglik) < 1e-9);
  }
}

TEST_CASE("entropy edge cases") {
  PosteriorTable det;
  det.log_q.push_back((Matrix(2, 1) << 0.0, -INFINITY).finished());
  det.log_q.push_back((Matrix(2, 2) << -INFINITY, 0.0, 0.0, -INFINITY).finished());
  CHECK(posterior_entropy(det) == 0.0);
  CHECK(posterior_entropy(uniform_q(4, 1)) == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  CHECK(posterior_entropy(uniform_q(3, 3)) == doctest::Approx(3 * std::log(3.0)).epsilon(1e-14));
}

TEST_CASE("ELBO is a lower bound away from the exact posterior") {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    LstnModel old_model = random_model(3, 9, 3, 300 + static_cast<std::uint64_t>(trial), 1.0);
    LstnModel model = random_model(3, 9, 3, 400 + static_cast<std::uint64_t>(trial), 1.0);
    EncodedDialog d = random_dialog(3, 9, rng);
    PosteriorTable stale = e_step(old_model, d);
    double elbo = m_step_objective(model, d, stale) + posterior_entropy(stale);
    CHECK(elbo <= marginal_loglik(model, d) + 1e-6);
    PosteriorTable exact = e_step(model, d);
    CHECK(std::abs(m_step_objective(model, d, exact) + posterior_entropy(exact) - marginal_loglik(model, d)) < 1e-6);
  }
}

TEST_CASE("f_1 value and recursion table agree") {
  std::mt19937_64 rng(24);
  LstnModel m = random_model(3, 9, 4, 25);
  EncodedDialog d = random_dialog(3, 9, rng);
  PosteriorTable q = e_step(m, d);
  CHECK(m_step_objective(m, d, q) == doctest::Approx(m_step_table(compute_factors(m, d), q)[0](0)).epsilon(1e-12));
  CHECK(m_step_objective(m, d, q) <= 0.0);
}

TEST_CASE("q enters f_1 as a constant") {
  std::mt19937_64 rng(26);
  LstnModel m = random_model(3, 9, 3, 27);
  EncodedDialog d = random_dialog(2, 9, rng);
  PosteriorTable q = e_step(m, d);
  PosteriorTable perturbed = q;
  perturbed.log_q[0] = uniform_q(3, 1).log_q[0];
  CHECK(m_step_objective(m, d, perturbed) != doctest::Approx(m_step_objective(m, d, q)));

  // At the exact posterior the gradient of f_1 (q held fixed) equals the
  // gradient of the marginal log-likelihood; a gradient path through q would
  // break this.
  m.store.zero_grad();
  {
    Tape tape(m.store);
    FactorNodeCache c(tape, m);
    tape.backward(m_step_objective(c.build(d), q));
  }
  const double eps = 1e-6;
  double worst = 0.0;
  for (auto& [name, p] : m.store.params())
    for (long i = 0; i < p.value.size(); i += 3) {
      double orig = p.value(i);
      p.value(i) = orig + eps;
      double up = marginal_loglik(m, d);
      p.value(i) = orig - eps;
      double down = marginal_loglik(m, d);
      p.value(i) = orig;
      worst = std::max(worst, std::abs(p.grad(i) - (up - down) / (2 * eps)) / std::max(1.0, std::abs(p.grad(i))));
    }
  CHECK(worst < 1e-5);
  m.store.zero_grad();
}

TEST_CASE("f_1 gradient check on K=3, N=2 toys") {
  std::mt19937_64 rng(28);
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    LstnModel m = random_model(3, 8, 3, seed);
    EncodedDialog d = random_dialog(2, 8, rng);
    PosteriorTable q = e_step(m, d);
    auto fn = [&](Tape& tape) {
      FactorNodeCache c(tape, m);
      return m_step_objective(c.build(d), q);
    };
    CHECK(grad_check(fn, m.store, 1e-5).max_rel_error < 1e-3);
  }
}

TEST_CASE("e_step input errors") {
  DialogFactors empty;
  CHECK_THROWS(e_step(empty));
  DialogFactors f = hand_instance();
  f.log_emit[0](0) = NAN;
  CHECK_THROWS_AS(e_step(f), NumericalError);
  DialogFactors g = hand_instance();
  g.log_emit[0].setConstant(-INFINITY);
  CHECK_THROWS_AS(marginal_loglik(g), NumericalError);
}

TEST_CASE("generalized EM ascent at a small learning rate") {
  std::mt19937_64 rng(29);
  LstnModel m = random_model(3, 10, 4, 30);
  std::vector<EncodedDialog> batch_store;
  for (int i = 0; i < 4; ++i) batch_store.push_back(random_dialog(1 + i % 3, 10, rng));
  std::vector<const EncodedDialog*> batch;
  for (const auto& d : batch_store) batch.push_back(&d);
  TrainConfig config;
  config.learning_rate = 1e-4;
  config.m_steps_per_e_step = 1;
  auto total = [&] {
    double s = 0.0;
    for (const auto& d : batch_store) s += marginal_loglik(m, d);
    return s;
  };
  double prev = total();
  for (int step = 0; step < 20; ++step) {
    BatchStats stats = em_step(m, batch, config);
    CHECK(stats.elbo == doctest::Approx(prev / 4).epsilon(1e-9));
    double now = total();
    CHECK(now >= prev - 1e-6);
    prev = now;
  }
}

TEST_CASE("annealing schedule") {
  TrainConfig c;
  CHECK(anneal_beta(c, 1) == 1.0);
  c.anneal_epochs = 4;
  c.anneal_start = 0.2;
  CHECK(anneal_beta(c, 1) == doctest::Approx(0.2));
  CHECK(anneal_beta(c, 5) == 1.0);
  CHECK(anneal_beta(c, 2) > anneal_beta(c, 1));
  DialogFactors f = hand_instance();
  DialogFactors same = temper(f, 1.0);
  CHECK(same.log_trans[0] == f.log_trans[0]);
  CHECK(same.log_emit[0] == f.log_emit[0]);
  PosteriorTable flat = e_step(temper(f, 1e-9));
  CHECK(std::exp(flat.log_q[0](0, 0)) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("train config grids and serialization") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.num_states = 5;
  CHECK_THROWS_AS(c.validate(), ArgumentError);
  c.allow_off_grid = true;
  CHECK_NOTHROW(c.validate());
  c.learning_rate = 0.0;
  CHECK_THROWS_AS(c.validate(), ArgumentError);

  TrainConfig d;
  d.learning_rate = 0.003;
  CHECK_THROWS_AS(d.validate(), ArgumentError);
  d = TrainConfig{};
  d.embedding_dim = 24;
  CHECK_THROWS_AS(d.validate(), ArgumentError);
  d = TrainConfig{};
  d.restarts = 0;
  CHECK_THROWS_AS(d.validate(), ArgumentError);

  TrainConfig e;
  e.restarts = 3;
  e.seed = 99;
  e.shared_state_embeddings = true;
  TrainConfig back = TrainConfig::from_json(e.to_json());
  CHECK(back.to_json() == e.to_json());
  CHECK(back.fingerprint() == e.fingerprint());
  CHECK(restart_seed(5, 0) == 5);
  CHECK(restart_seed(5, 1) != restart_seed(5, 2));
}

TEST_CASE("training on a small synthetic corpus") {
  SyntheticCorpus syn = generate_corpus(OracleMachine::default_machine(), 120, 4, 5);
  Vocabulary vocab = Vocabulary::build(syn.corpus.train, 1);
  auto train_set = encode_dialogs(syn.corpus.train, vocab);
  auto dev_set = encode_dialogs(syn.corpus.dev, vocab);
  TrainConfig config;
  config.epochs = 6;
  config.embedding_dim = 16;
  config.hidden_dim = 16;
  config.restarts = 2;
  config.probe_epochs = 2;

  std::vector<TrainLogRecord> streamed;
  TrainResult a = train(train_set, dev_set, make_model_config(config, vocab), config,
                        [&](const TrainLogRecord& r) { streamed.push_back(r); });
  TrainResult b = train(train_set, dev_set, make_model_config(config, vocab), config);

  SUBCASE("log layout") {
    CHECK(streamed.size() == a.log.size());
    int epoch_zero = 0;
    for (const auto& r : a.log) epoch_zero += r.epoch == 0;
    CHECK(epoch_zero == 2);  // one per restart
    CHECK(a.log.back().epoch == config.epochs);
    CHECK(a.log.back().restart == a.restart);
    CHECK(a.best_epoch >= 1);
  }
  SUBCASE("seeded runs repeat exactly") {
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
      CHECK(a.log[i].elbo == b.log[i].elbo);
      CHECK(a.log[i].dev_ppl == b.log[i].dev_ppl);
    }
    CHECK(a.model.store.at(param_names::kOutputW).value == b.model.store.at(param_names::kOutputW).value);
  }
  SUBCASE("dev perplexity falls by more than half") {
    double initial = 0.0;
    for (const auto& r : a.log)
      if (r.epoch == 0 && r.restart == a.restart) initial = r.dev_ppl;
    CHECK(a.best_dev_ppl < 0.5 * initial);
    DevScore s = score_corpus(a.model, dev_set);
    CHECK(s.perplexity == doctest::Approx(std::exp(-s.loglik / static_cast<double>(s.tokens))));
    CHECK(s.perplexity == doctest::Approx(a.best_dev_ppl));
  }
}

TEST_CASE("train rejects empty splits") {
  SyntheticCorpus syn = generate_corpus(OracleMachine::default_machine(), 20, 2, 5);
  Vocabulary vocab = Vocabulary::build(syn.corpus.train, 1);
  auto train_set = encode_dialogs(syn.corpus.train, vocab);
  TrainConfig config;
  CHECK_THROWS_AS(train(train_set, {}, make_model_config(config, vocab), config), ArgumentError);
  CHECK_THROWS_AS(train({}, train_set, make_model_config(config, vocab), config), ArgumentError);
}
